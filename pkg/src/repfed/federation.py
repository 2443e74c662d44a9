"""The communication-round loop.

Per round the server encodes a seeded public subset with its start-of-round
parameters and broadcasts both modalities. Each selected client then trains
locally on its private shard, regularized against those global
representations, and uploads its own public representations. The server
trains on public pairs, aggregates the uploads per modality, and distills
the aggregate into its encoders.

The server-side entry point (:func:`server_round`) only ever receives
:class:`~repfed.aggregation.Contribution` values: representations plus
client metadata, never parameters or private data.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .aggregation import Contribution, aggregate_modality
from .data import dirichlet_partition, generate_world, make_splits
from .errors import ConfigurationError, NumericError
from .metrics import RoundRecord, drift_metric, evaluate_retrieval
from .nn import AdamState, Encoder, EncoderSpec, adam_step, encoder_backward, forward_with_cache

log = logging.getLogger(__name__)

IMAGE, TEXT, MULTIMODAL = "image", "text", "multimodal"
OWNED = {IMAGE: (IMAGE,), TEXT: (TEXT,), MULTIMODAL: (IMAGE, TEXT)}
OTHER = {IMAGE: TEXT, TEXT: IMAGE}

# stream tags for derived seeds
_TAG_SELECT, _TAG_CLIENT, _TAG_SERVER, _TAG_INIT, _TAG_SUBSET, _TAG_SHARD = range(10, 16)


def derive_seed(*parts):
    """Deterministic 64-bit seed from integer parts (master seed, ids, round, tag)."""
    seq = np.random.SeedSequence([int(p) & (2**63 - 1) for p in parts])
    return int(seq.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


def _rng(*parts):
    return np.random.default_rng(derive_seed(*parts))


@dataclass
class ClientState:
    client_id: int
    modality: str
    encoders: dict  # modality -> Encoder
    shard_ids: np.ndarray
    private: object  # ImagePool / TextPool / PairPool restricted to the shard
    head: np.ndarray = None
    head_adam: AdamState = None
    prev_public_ids: np.ndarray = None
    prev_public_reps: dict = None  # modality -> RepMatrix over prev_public_ids
    rng_seed: int = 0

    @property
    def num_private_samples(self):
        return len(self.private)

    @property
    def is_multimodal(self):
        return self.modality == MULTIMODAL


@dataclass
class ServerState:
    encoders: dict  # IMAGE / TEXT -> Encoder
    round: int = 0


@dataclass(frozen=True)
class PublicBatch:
    """The round's public subset: ids plus both raw views, rows in id order."""

    ids: np.ndarray
    img: np.ndarray
    txt: np.ndarray

    def view(self, modality):
        return self.img if modality == IMAGE else self.txt

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class RoundArtifacts:
    """Everything the server saw and produced in one round (for tests and diagnostics)."""

    round: int
    selected: list
    public_ids: np.ndarray
    global_reps: dict
    contributions: dict
    targets: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)


def select_clients(client_ids, fraction, round_idx, master_seed):
    """``max(ceil(fraction * C), 1)`` distinct ids, sorted, seeded by (seed, round)."""
    ids = sorted(client_ids)
    if not ids:
        raise ConfigurationError("cannot select from an empty client list")
    if not 0 < fraction <= 1:
        raise ConfigurationError("participation fraction must lie in (0, 1]")
    # tolerance keeps e.g. 10/35 * 35 from rounding up to 11
    n = max(math.ceil(fraction * len(ids) - 1e-9), 1)
    picks = _rng(master_seed, _TAG_SELECT, round_idx).choice(len(ids), size=n, replace=False)
    return sorted(ids[i] for i in picks)


def comm_cost(n_img_capable, n_txt_capable, n_public_batch, d, bytes_per_scalar=8, n_selected=None):
    """Bytes moved in one round.

    Upload: one (rows x d) matrix per modality a selected client owns.
    Download: every selected client receives both global matrices. A
    multimodal client counts in both capable sets; ``n_selected`` defaults
    to ``max(n_img_capable, n_txt_capable)``, which is exact when no
    uni-modal client of the smaller side is selected. Pass it explicitly.
    """
    if n_selected is None:
        n_selected = max(n_img_capable, n_txt_capable)
    row_bytes = n_public_batch * d * bytes_per_scalar
    return {
        "up_bytes": (n_img_capable + n_txt_capable) * row_bytes,
        "down_bytes": n_selected * 2 * row_bytes,
    }


def _batches(rng, n, size):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _public_rows(perm, step, size):
    """The step-th public mini-batch, cycling through ``perm``."""
    n = perm.shape[0]
    if size >= n:
        return np.sort(perm)
    start = (step * size) % n
    return np.sort(np.take(perm, np.arange(start, start + size), mode="wrap"))


def _prev_for(client, modality, ids):
    """Cached previous-round reps aligned to ``ids``; rows without a cache entry are NaN."""
    if client.prev_public_reps is None:
        return None
    cached_ids = client.prev_public_ids
    pos = np.searchsorted(cached_ids, ids)
    pos = np.clip(pos, 0, max(cached_ids.shape[0] - 1, 0))
    hit = cached_ids[pos] == ids
    if not hit.any():
        return None
    out = np.full((ids.shape[0], client.prev_public_reps[modality].shape[1]), np.nan)
    out[hit] = client.prev_public_reps[modality][pos[hit]]
    return out


def _regularizer_grads(client, modality, public, rows, global_reps, cfg, ccfg, stats):
    enc = client.encoders[modality]
    x = public.view(modality)[rows]
    local, cache = forward_with_cache(enc.spec, enc.params, x)
    reg = cfg.run.regularizer
    dlocal = np.zeros_like(local)
    if reg in ("inter", "both"):
        inter = losses.inter_modal_loss(local, global_reps[OTHER[modality]][rows], ccfg)
        dlocal += inter.grad
        stats["inter"].append(inter.value)
    if reg in ("intra", "both"):
        prev = _prev_for(client, modality, public.ids[rows])
        if prev is not None:
            have = ~np.isnan(prev[:, 0])
            intra = losses.intra_modal_loss(local[have], global_reps[modality][rows][have], prev[have], ccfg)
            dlocal[have] += intra.grad
            stats["intra"].append(intra.value)
        else:
            stats["intra"].append(0.0)
    return encoder_backward(enc.spec, enc.params, x, dlocal, cache)


def _task_step(client, rows, ccfg):
    """Gradients of the private task loss: classification or paired retrieval."""
    data = client.private.subset(rows)
    grads = {}
    head_grad = None
    if client.modality == MULTIMODAL:
        if len(rows) < 2:
            return 0.0, grads, None
        ei, et = client.encoders[IMAGE], client.encoders[TEXT]
        zi, ci = forward_with_cache(ei.spec, ei.params, data.img)
        zt, ct = forward_with_cache(et.spec, et.params, data.txt)
        res = losses.bidirectional_pair_loss(zi, zt, ccfg)
        grads[IMAGE] = encoder_backward(ei.spec, ei.params, data.img, res.grad, ci)
        grads[TEXT] = encoder_backward(et.spec, et.params, data.txt, res.grad_other, ct)
        return res.value, grads, None
    modality = client.modality
    enc = client.encoders[modality]
    x = data.img if modality == IMAGE else data.txt
    z, cache = forward_with_cache(enc.spec, enc.params, x)
    res = losses.classification_loss(z, client.head, data.labels)
    grads[modality] = encoder_backward(enc.spec, enc.params, x, res.grad, cache)
    head_grad = res.grad_head
    return res.value, grads, head_grad


def client_local_training(client, public, global_reps, cfg, round_idx):
    """Run ``local_epochs`` of regularized training, then encode the public subset.

    Mutates and returns ``client`` together with ``{modality: reps}`` over
    ``public`` (rows in ``public.ids`` order). The returned reps also become
    the client's previous-round cache.
    """
    cc = cfg.clients
    ccfg = losses.ContrastConfig(cc.temperature, max(cc.public_batch, 2))
    rng = _rng(cfg.run.master_seed, _TAG_CLIENT, client.client_id, round_idx)
    regularize = cfg.run.regularizer != "none" and cc.gamma > 0
    stats = {"task": [], "inter": [], "intra": []}
    n_priv = len(client.private)
    n_pub = len(public)
    for epoch in range(cc.local_epochs):
        priv_batches = _batches(rng, n_priv, cc.private_batch) if n_priv else [np.arange(0)]
        if cc.max_steps_per_epoch:
            priv_batches = priv_batches[:cc.max_steps_per_epoch]
        pub_perm = rng.permutation(n_pub)
        for step, rows in enumerate(priv_batches):
            grads = {m: np.zeros(client.encoders[m].spec.num_params) for m in client.encoders}
            task_value, task_grads, head_grad = (0.0, {}, None)
            if rows.shape[0]:
                task_value, task_grads, head_grad = _task_step(client, rows, ccfg)
            for m, g in task_grads.items():
                grads[m] += g
            total = task_value
            if regularize:
                pub_rows = _public_rows(pub_perm, step, cc.public_batch)
                reg_before = len(stats["inter"]) + len(stats["intra"])
                for m in client.encoders:
                    grads[m] += cc.gamma * _regularizer_grads(client, m, public, pub_rows, global_reps,
                                                              cfg, ccfg, stats)
                new_vals = (stats["inter"] + stats["intra"])[reg_before:]
                total += cc.gamma * sum(new_vals)
            if not np.isfinite(total):
                raise NumericError(
                    f"non-finite local loss for client {client.client_id} at round {round_idx}, "
                    f"epoch {epoch}, step {step}"
                )
            stats["task"].append(task_value)
            for m, g in grads.items():
                client.encoders[m].step(g, cc.client_lr)
            if head_grad is not None:
                flat, client.head_adam = adam_step(client.head.ravel(), head_grad.ravel(), client.head_adam,
                                                   cc.client_lr)
                client.head = flat.reshape(client.head.shape)
    reps = {m: client.encoders[m](public.view(m)) for m in OWNED[client.modality]}
    client.prev_public_ids = public.ids.copy()
    client.prev_public_reps = {m: r.copy() for m, r in reps.items()}
    summary = {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}
    return client, reps, summary


def _server_public_training(server, public, cfg, rng, stats):
    ccfg = losses.ContrastConfig(cfg.clients.temperature, max(cfg.clients.public_batch, 2))
    ei, et = server.encoders[IMAGE], server.encoders[TEXT]
    for _ in range(cfg.server.public_train_epochs):
        for rows in _batches(rng, len(public), cfg.clients.public_batch):
            if rows.shape[0] < 2:
                continue
            xi, xt = public.img[rows], public.txt[rows]
            zi, ci = forward_with_cache(ei.spec, ei.params, xi)
            zt, ct = forward_with_cache(et.spec, et.params, xt)
            res = losses.bidirectional_pair_loss(zi, zt, ccfg)
            gi = encoder_backward(ei.spec, ei.params, xi, res.grad, ci)
            gt = encoder_backward(et.spec, et.params, xt, res.grad_other, ct)
            ei.step(gi, cfg.server.server_lr)
            et.step(gt, cfg.server.server_lr)
            stats["server_pair"].append(res.value)


def _server_distill(server, public, targets, cfg, rng, stats):
    for _ in range(cfg.server.distill_epochs):
        for rows in _batches(rng, len(public), cfg.clients.public_batch):
            for m in (IMAGE, TEXT):
                if m not in targets:
                    continue
                enc = server.encoders[m]
                x = public.view(m)[rows]
                z, cache = forward_with_cache(enc.spec, enc.params, x)
                res = losses.distill_loss(z, targets[m][rows], cfg.server.distill_mode)
                enc.step(encoder_backward(enc.spec, enc.params, x, res.grad, cache), cfg.server.server_lr)
                stats[f"distill_{m}"].append(res.value)


def server_round(server, contributions, public, global_reps, cfg, artifacts=None):
    """Public training, per-modality aggregation, then distillation.

    ``contributions`` maps modality -> list of Contribution; ``global_reps``
    are the start-of-round broadcasts used as the cross-modal reference for
    aggregation scores. Returns ``(server, loss_summary)``.
    """
    stats = {"server_pair": [], f"distill_{IMAGE}": [], f"distill_{TEXT}": []}
    if not any(contributions.get(m) for m in (IMAGE, TEXT)):
        log.warning("round %d: no contributions in either modality; server round is a no-op", server.round)
        server.round += 1
        return server, {}
    rng = _rng(cfg.run.master_seed, _TAG_SERVER, server.round)
    _server_public_training(server, public, cfg, rng, stats)

    scfg = losses.ContrastConfig(cfg.clients.temperature, max(cfg.clients.public_batch, 2))
    score_tau = cfg.run.score_temperature or None
    targets = {}
    for m in (IMAGE, TEXT):
        contribs = contributions.get(m) or []
        if not contribs:
            continue
        target, weights, ordered = aggregate_modality(
            contribs, global_reps[OTHER[m]], cfg.run.aggregator, scfg,
            boost=cfg.run.iot_boost_value, include_diagonal=cfg.run.include_diagonal,
            temperature=score_tau,
        )
        targets[m] = target
        if artifacts is not None:
            artifacts.targets[m] = target
            artifacts.weights[m] = (weights, [c.client_id for c in ordered])
    _server_distill(server, public, targets, cfg, rng, stats)
    server.round += 1
    return server, {k: float(np.mean(v)) for k, v in stats.items() if v}


def _pool_for(splits, modality):
    return {IMAGE: splits.private_img, TEXT: splits.private_txt, MULTIMODAL: splits.private_mm}[modality]


class Federation:
    """World, splits, server and clients for one configured run."""

    def __init__(self, cfg, world=None):
        self.cfg = cfg
        self.world = generate_world(cfg.world) if world is None else world
        self.splits = make_splits(self.world, cfg.world)
        self.world_hash = self.world.content_hash()
        d = cfg.server.rep_dim
        seed = cfg.run.master_seed
        act = cfg.server.activation
        dims = {IMAGE: cfg.world.img_dim, TEXT: cfg.world.txt_dim}
        self.server = ServerState({
            m: Encoder.create(EncoderSpec(dims[m], cfg.server.server_hidden_dims, d, act),
                              derive_seed(seed, _TAG_INIT, -1, i))
            for i, m in enumerate((IMAGE, TEXT))
        })
        kinds = [IMAGE] * cfg.clients.n_img + [TEXT] * cfg.clients.n_txt + [MULTIMODAL] * cfg.clients.n_mm
        shards = {}
        for kind in (IMAGE, TEXT, MULTIMODAL):
            members = [cid for cid, k in enumerate(kinds) if k == kind]
            if not members:
                continue
            pool = _pool_for(self.splits, kind)
            parts = dirichlet_partition(pool.labels, len(members), cfg.clients.dirichlet_alpha,
                                        derive_seed(seed, _TAG_SHARD, len(shards)))
            for cid, part in zip(members, parts):
                shards[cid] = np.asarray(part.item_ids, dtype=np.int64)
        self.clients = {}
        for cid, kind in enumerate(kinds):
            encoders = {
                m: Encoder.create(EncoderSpec(dims[m], cfg.server.client_hidden_dims, d, act),
                                  derive_seed(seed, _TAG_INIT, cid, i))
                for i, m in enumerate(OWNED[kind])
            }
            rows = shards[cid]
            pool = _pool_for(self.splits, kind)
            client = ClientState(cid, kind, encoders, pool.ids[rows], pool.subset(rows),
                                 rng_seed=derive_seed(seed, _TAG_CLIENT, cid))
            if kind != MULTIMODAL:
                n_classes = cfg.world.num_classes
                a = np.sqrt(6.0 / (n_classes + d))
                client.head = _rng(seed, _TAG_INIT, cid, 99).uniform(-a, a, size=(n_classes, d))
                client.head_adam = AdamState.zeros(n_classes * d)
            self.clients[cid] = client

    def public_subset(self, round_idx):
        pub = self.splits.public
        n = self.cfg.run.public_subset
        if n >= len(pub):
            rows = np.arange(len(pub))
        else:
            rows = _rng(self.cfg.run.master_seed, _TAG_SUBSET, round_idx).choice(len(pub), n, replace=False)
        rows = rows[np.argsort(pub.ids[rows])]
        return PublicBatch(pub.ids[rows], pub.img[rows], pub.txt[rows])

    def evaluate(self):
        test = self.splits.test
        img = self.server.encoders[IMAGE](test.img)
        txt = self.server.encoders[TEXT](test.txt)
        return evaluate_retrieval(img, txt)

    def run_round(self, round_idx, workers=None, observer=None):
        cfg = self.cfg
        workers = cfg.run.workers if workers is None else workers
        public = self.public_subset(round_idx)
        global_reps = {m: self.server.encoders[m](public.view(m)) for m in (IMAGE, TEXT)}
        selected = select_clients(list(self.clients), cfg.run.participation_fraction, round_idx,
                                  cfg.run.master_seed)

        def train(cid):
            return client_local_training(self.clients[cid], public, global_reps, cfg, round_idx)

        if workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(train, selected))
        else:
            results = [train(cid) for cid in selected]

        contributions = {IMAGE: [], TEXT: []}
        client_stats = []
        for client, reps, summary in results:  # selected is sorted: client_id order
            client_stats.append(summary)
            for m, r in reps.items():
                contributions[m].append(Contribution(client.client_id, m, r, client.num_private_samples,
                                                     client.is_multimodal))
        cost = comm_cost(len(contributions[IMAGE]), len(contributions[TEXT]), len(public),
                         cfg.server.rep_dim, n_selected=len(selected))

        drifts = [drift_metric({c.client_id: c.reps for c in contributions[m]})
                  for m in (IMAGE, TEXT) if len(contributions[m]) >= 2]
        drift = float(np.mean(drifts)) if drifts else None

        artifacts = RoundArtifacts(round_idx, selected, public.ids, global_reps, contributions)
        _, server_stats = server_round(self.server, contributions, public, global_reps, cfg, artifacts)
        report = self.evaluate()
        loss_summary = {f"client_{k}": float(np.mean([s[k] for s in client_stats])) for k in ("task", "inter", "intra")}
        loss_summary.update(server_stats)
        if observer is not None:
            observer(artifacts)
        return RoundRecord(round_idx, selected, cost["up_bytes"], cost["down_bytes"],
                           report.i2t_r_at, report.t2i_r_at, drift, loss_summary)

    def run(self, rounds=None, workers=None, observer=None, sink=None):
        rounds = self.cfg.run.rounds if rounds is None else rounds
        records = []
        for t in range(rounds):
            try:
                rec = self.run_round(t, workers=workers, observer=observer)
            except NumericError as exc:
                raise NumericError(f"round {t}: {exc}") from exc
            records.append(rec)
            if sink is not None:
                sink(rec)
        return records


def run_training(cfg, workers=None, observer=None, sink=None):
    """Build a federation from ``cfg`` and run all its rounds. Returns the RoundRecords."""
    return Federation(cfg).run(workers=workers, observer=observer, sink=sink)
