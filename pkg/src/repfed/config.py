"""Run configuration: INI-style sections, documented defaults, strict validation.

An empty file yields the ``desk-bench-v1`` benchmark. Sections and keys::

    [world]   latent_dim img_dim txt_dim num_classes noise_std seed
              n_public n_test n_private_img n_private_txt n_private_mm
    [clients] n_img n_txt n_mm dirichlet_alpha local_epochs client_lr gamma
              private_batch public_batch temperature max_steps_per_epoch
    [server]  rep_dim server_hidden_dims client_hidden_dims activation server_lr
              distill_epochs public_train_epochs distill_mode
    [run]     rounds participation_fraction master_seed aggregator regularizer
              iot_boost_value public_subset include_diagonal score_temperature workers
    [output]  log_path summary_path

List values are comma separated (``server_hidden_dims = 64, 64``).
"""

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .aggregation import STRATEGIES
from .data import SplitSizes, WorldSpec
from .errors import ConfigurationError
from .losses import DISTILL_MODES

REGULARIZERS = ("none", "inter", "intra", "both")
OUTPUT_DIR_ENV = "REPFED_OUTPUT_DIR"


@dataclass(frozen=True)
class ClientConfig:
    n_img: int = 4
    n_txt: int = 4
    n_mm: int = 4
    dirichlet_alpha: float = 0.1
    local_epochs: int = 2
    client_lr: float = 1e-3
    gamma: float = 0.5
    private_batch: int = 32
    public_batch: int = 128
    temperature: float = 0.07
    max_steps_per_epoch: int = 0  # 0 = full pass over the private shard

    @property
    def total(self):
        return self.n_img + self.n_txt + self.n_mm


@dataclass(frozen=True)
class ServerConfig:
    rep_dim: int = 16
    server_hidden_dims: tuple = (64, 64)
    client_hidden_dims: tuple = (32,)
    activation: str = "tanh"
    server_lr: float = 2e-4
    distill_epochs: int = 2
    public_train_epochs: int = 1
    distill_mode: str = "squared_l2"


@dataclass(frozen=True)
class RunSection:
    rounds: int = 30
    participation_fraction: float = 0.5
    master_seed: int = 0
    aggregator: str = "gca"
    regularizer: str = "both"
    iot_boost_value: float = 100.0
    public_subset: int = 256
    include_diagonal: bool = False
    score_temperature: float = 0.0  # 0 = reuse clients.temperature
    workers: int = 1


@dataclass(frozen=True)
class OutputConfig:
    log_path: str = "runs/run.jsonl"
    summary_path: str = "runs/summary.csv"


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    clients: ClientConfig = field(default_factory=ClientConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    run: RunSection = field(default_factory=RunSection)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self):
        return asdict(self)

    @property
    def variant(self):
        return f"{self.run.aggregator}+{self.run.regularizer}"

    def with_updates(self, **sections):
        """``cfg.with_updates(run={"rounds": 3}, world={"seed": 1})``."""
        parts = {}
        for name, changes in sections.items():
            current = getattr(self, name)
            if name == "world":
                size_keys = {f.name for f in fields(SplitSizes)}
                size_changes = {k: v for k, v in changes.items() if k in size_keys}
                other = {k: v for k, v in changes.items() if k not in size_keys}
                parts[name] = replace(current, sizes=replace(current.sizes, **size_changes), **other)
            else:
                parts[name] = replace(current, **changes)
        return replace(self, **parts)


def _fail(section, key, constraint):
    raise ConfigurationError(f"[{section}] {key}: {constraint}")


def validate(cfg):
    c, s, r = cfg.clients, cfg.server, cfg.run
    for key in ("n_img", "n_txt", "n_mm"):
        if getattr(c, key) < 0:
            _fail("clients", key, "must be >= 0")
    if c.total < 1:
        _fail("clients", "n_img/n_txt/n_mm", "at least one client is required")
    if not c.dirichlet_alpha > 0:
        _fail("clients", "dirichlet_alpha", "must be > 0")
    if c.local_epochs < 0:
        _fail("clients", "local_epochs", "must be >= 0")
    if not c.client_lr > 0:
        _fail("clients", "client_lr", "must be > 0")
    if c.gamma < 0:
        _fail("clients", "gamma", "must be >= 0")
    if c.private_batch < 2:
        _fail("clients", "private_batch", "must be >= 2")
    if c.public_batch < 2:
        _fail("clients", "public_batch", "must be >= 2")
    if not c.temperature > 0:
        _fail("clients", "temperature", "must be > 0")
    if c.max_steps_per_epoch < 0:
        _fail("clients", "max_steps_per_epoch", "must be >= 0")
    if s.rep_dim < 1:
        _fail("server", "rep_dim", "must be >= 1")
    for key in ("server_hidden_dims", "client_hidden_dims"):
        if any(h < 1 for h in getattr(s, key)):
            _fail("server", key, "hidden widths must be >= 1")
    if s.activation not in ("tanh", "relu"):
        _fail("server", "activation", "must be tanh or relu")
    if not s.server_lr > 0:
        _fail("server", "server_lr", "must be > 0")
    if s.distill_epochs < 0 or s.public_train_epochs < 0:
        _fail("server", "distill_epochs/public_train_epochs", "must be >= 0")
    if s.distill_mode not in DISTILL_MODES:
        _fail("server", "distill_mode", f"must be one of {DISTILL_MODES}")
    if r.rounds < 0:
        _fail("run", "rounds", "must be >= 0")
    if not 0 < r.participation_fraction <= 1:
        _fail("run", "participation_fraction", "must lie in (0, 1]")
    if r.aggregator not in STRATEGIES:
        _fail("run", "aggregator", f"must be one of {STRATEGIES}")
    if r.regularizer not in REGULARIZERS:
        _fail("run", "regularizer", f"must be one of {REGULARIZERS}")
    if not r.iot_boost_value > 0:
        _fail("run", "iot_boost_value", "must be > 0")
    if r.public_subset < 2:
        _fail("run", "public_subset", "must be >= 2")
    if r.public_subset > cfg.world.sizes.n_public:
        _fail("run", "public_subset", f"cannot exceed world n_public = {cfg.world.sizes.n_public}")
    if r.score_temperature < 0:
        _fail("run", "score_temperature", "must be >= 0")
    if r.workers < 1:
        _fail("run", "workers", "must be >= 1")
    if cfg.world.sizes.n_test < 10:
        _fail("world", "n_test", "must be >= 10 (Recall@10 is reported)")


def _section_types(cls):
    return {f.name: f.type for f in fields(cls)}


_WORLD_KEYS = {
    **{k: v for k, v in _section_types(WorldSpec).items() if k != "sizes"},
    **_section_types(SplitSizes),
}
_SECTIONS = {
    "world": _WORLD_KEYS,
    "clients": _section_types(ClientConfig),
    "server": _section_types(ServerConfig),
    "run": _section_types(RunSection),
    "output": _section_types(OutputConfig),
}


def _coerce(section, key, raw, kind):
    text = raw.strip()
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (tuple, "tuple"):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        _fail(section, key, f"cannot parse {raw!r} as {getattr(kind, '__name__', kind)}")


def parse_config_text(text, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {source}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown section [{section}] in {source}")
        known = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}] of {source}")
            values.setdefault(section, {})[key] = _coerce(section, key, raw, known[key])
    return RunConfig().with_updates(**values) if values else RunConfig()


def parse_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def resolve_output(path):
    """Place relative output paths under ``$REPFED_OUTPUT_DIR`` when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_DIR_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path
