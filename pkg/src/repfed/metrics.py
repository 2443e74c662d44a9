"""Retrieval recall, inter-client drift, and the JSON-lines round log."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError

DEFAULT_KS = (1, 5, 10)


def recall_at_k(query_reps, gallery_reps, ground_truth, ks=DEFAULT_KS):
    """Fraction of queries whose true gallery row ranks in the top K by dot product.

    A gallery row outranks the true one if it scores higher, or scores the
    same and has a lower index.
    """
    ground_truth = np.asarray(ground_truth, dtype=np.int64)
    n_gallery = gallery_reps.shape[0]
    for k in ks:
        if k > n_gallery or k < 1:
            raise ConfigurationError(f"K={k} is outside [1, gallery size {n_gallery}]")
    sims = query_reps @ gallery_reps.T
    rows = np.arange(sims.shape[0])
    true = sims[rows, ground_truth][:, None]
    idx = np.arange(n_gallery)[None, :]
    ahead = (sims > true) | ((sims == true) & (idx < ground_truth[:, None]))
    rank = ahead.sum(axis=1)
    return {int(k): float(np.mean(rank < k)) for k in ks}


@dataclass
class RetrievalReport:
    i2t_r_at: dict
    t2i_r_at: dict

    @property
    def r1_sum(self):
        return 100.0 * (self.i2t_r_at[1] + self.t2i_r_at[1])


def evaluate_retrieval(img_reps, txt_reps, ks=DEFAULT_KS):
    """Both retrieval directions over aligned test pairs (row k <-> row k)."""
    gt = np.arange(img_reps.shape[0])
    return RetrievalReport(recall_at_k(img_reps, txt_reps, gt, ks), recall_at_k(txt_reps, img_reps, gt, ks))


def drift_metric(probe_reps):
    """Mean over probe items of the mean pairwise distance between clients.

    ``probe_reps`` maps client id -> (items, d) matrix over the same items.
    """
    if len(probe_reps) < 2:
        raise ConfigurationError("drift needs at least two clients")
    ordered = [probe_reps[c] for c in sorted(probe_reps)]
    if len({m.shape for m in ordered}) != 1:
        raise ConfigurationError("probe representations must be aligned")
    return kernels.mean_pairwise_distance(np.stack(ordered))


@dataclass
class RoundRecord:
    round: int
    selected: list
    comm_up: int
    comm_down: int
    i2t: dict
    t2i: dict
    drift: float = None
    losses: dict = field(default_factory=dict)

    @property
    def r1_sum(self):
        return 100.0 * (self.i2t[1] + self.t2i[1])

    def to_json_dict(self):
        out = {
            "round": self.round,
            "selected": list(self.selected),
            "comm_up": self.comm_up,
            "comm_down": self.comm_down,
            "i2t_r1": self.i2t[1],
            "t2i_r1": self.t2i[1],
            "r1_sum": self.r1_sum,
            "drift": self.drift,
        }
        for k in sorted(self.i2t):
            if k != 1:
                out[f"i2t_r{k}"] = self.i2t[k]
        for k in sorted(self.t2i):
            if k != 1:
                out[f"t2i_r{k}"] = self.t2i[k]
        for name in sorted(self.losses):
            out[f"loss.{name}"] = self.losses[name]
        return out

    @classmethod
    def from_json_dict(cls, d):
        i2t = {1: d["i2t_r1"]}
        t2i = {1: d["t2i_r1"]}
        losses = {}
        for key, value in d.items():
            if key.startswith("i2t_r") and key != "i2t_r1":
                i2t[int(key[5:])] = value
            elif key.startswith("t2i_r") and key != "t2i_r1":
                t2i[int(key[5:])] = value
            elif key.startswith("loss."):
                losses[key[5:]] = value
        return cls(d["round"], list(d["selected"]), d["comm_up"], d["comm_down"], i2t, t2i,
                   d["drift"], losses)


def _dumps(obj):
    # repr-based float formatting round-trips doubles exactly; NaN/inf are not valid JSON
    return json.dumps(obj, sort_keys=False, allow_nan=False, separators=(",", ":"))


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def emit_round_record(record, sink):
    """Append one record as a JSON line. ``sink`` is a path or writable text file."""
    line = _dumps({k: _clean(v) for k, v in record.to_json_dict().items()}) + "\n"
    if hasattr(sink, "write"):
        sink.write(line)
        return
    try:
        with open(sink, "a") as fh:
            fh.write(line)
    except OSError as exc:
        raise OSError(f"cannot append round record to {sink}: {exc}") from exc


def emit_header(header, sink):
    line = _dumps({"type": "header", **header}) + "\n"
    if hasattr(sink, "write"):
        sink.write(line)
    else:
        with open(sink, "a") as fh:
            fh.write(line)


def read_log(path):
    """Return ``(header or None, [RoundRecord, ...])`` from a JSON-lines log."""
    header = None
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("type") == "header":
                header = obj
            else:
                records.append(RoundRecord.from_json_dict(obj))
    return header, records
