"""Single runs, ablation matrices and communication sweeps, with their artifacts."""

import csv
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import kernels
from .config import resolve_output
from .errors import ConfigurationError
from .federation import IMAGE, OWNED, TEXT, Federation, comm_cost
from .metrics import drift_metric, emit_header, emit_round_record

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ["variant", "seed", "rounds", "final_r1_sum", "final_drift", "total_comm_bytes"]
SWEEP_FIELDS = ["axis", "value", "seed", "total_comm_bytes", "final_r1_sum"]

# component ablation: the four aggregators without regularization, then the regularizers on top of gca
COMPONENT_ABLATION = ["mean+none", "sample_count+none", "iot_boost+none", "gca+none",
                      "gca+inter", "gca+intra", "gca+both"]


def parse_variant(text):
    """``"gca+both"`` -> ``("gca", "both")``; a bare aggregator means no regularizer."""
    text = text.strip()
    if "+" in text:
        agg, reg = text.split("+", 1)
        return agg.strip(), reg.strip()
    return text, "none"


def seeded(cfg, seed):
    """Same config with both the master seed and the world seed set to ``seed``."""
    return cfg.with_updates(run={"master_seed": int(seed)}, world={"seed": int(seed)})


def _initial_drift(fed):
    public = fed.public_subset(0)
    drifts = []
    for m in (IMAGE, TEXT):
        reps = {cid: c.encoders[m](public.view(m)) for cid, c in fed.clients.items() if m in OWNED[c.modality]}
        if len(reps) >= 2:
            drifts.append(drift_metric(reps))
    return float(np.mean(drifts)) if drifts else None


def _fmt(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def execute(cfg, log_path=None, workers=None):
    """Run one configuration; stream its JSON-lines log; return the summary row."""
    fed = Federation(cfg)
    header = {
        "config": cfg.to_dict(),
        "variant": cfg.variant,
        "world_hash": fed.world_hash,
        "kernel_backend": kernels.BACKEND,
    }
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
        emit_header(header, fh)
    try:
        initial = fed.evaluate()
        drift0 = _initial_drift(fed)
        records = fed.run(workers=workers, sink=(lambda r: emit_round_record(r, fh)) if fh else None)
    finally:
        if fh is not None:
            fh.close()
    drifts = [r.drift for r in records if r.drift is not None]
    return {
        "variant": cfg.variant,
        "seed": cfg.run.master_seed,
        "rounds": len(records),
        "final_r1_sum": records[-1].r1_sum if records else initial.r1_sum,
        "final_drift": drifts[-1] if drifts else drift0,
        "total_comm_bytes": sum(r.comm_up + r.comm_down for r in records),
        "world_hash": fed.world_hash,
        "final_i2t_r1": records[-1].i2t[1] if records else initial.i2t_r_at[1],
        "records": records,
    }


def write_csv(path, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def run_experiment(cfg, workers=None, echo=print):
    """One run: JSON-lines log, one-row summary CSV, final metrics on stdout."""
    log_path = resolve_output(cfg.output.log_path)
    summary_path = resolve_output(cfg.output.summary_path)
    row = execute(cfg, log_path, workers)
    write_csv(summary_path, SUMMARY_FIELDS, [row])
    if echo is not None:
        drift = row["final_drift"]
        echo(f"final_r1_sum={row['final_r1_sum']:.4f} final_drift={'nan' if drift is None else f'{drift:.6f}'}")
    return row


def _run_path(base, tag):
    base = Path(base)
    return base.with_name(f"{base.stem}_{tag}{base.suffix or '.jsonl'}")


def _job(args):
    cfg, log_path, workers = args
    try:
        row = execute(cfg, log_path, workers)
        row.pop("records")
        row["error"] = ""
    except Exception as exc:  # per-run failures are recorded, the matrix continues
        log.exception("run %s seed %s failed", cfg.variant, cfg.run.master_seed)
        row = {"variant": cfg.variant, "seed": cfg.run.master_seed, "error": f"{type(exc).__name__}: {exc}"}
    return row


def _map(jobs, parallel):
    # jobs given as dicts already failed during setup and pass through as rows
    runnable = [j for j in jobs if not isinstance(j, dict)]
    if parallel and len(runnable) > 1:
        with ProcessPoolExecutor() as pool:
            done = iter(list(pool.map(_job, runnable)))
    else:
        done = (_job(j) for j in runnable)
    return [j if isinstance(j, dict) else next(done) for j in jobs]


def _setup_failure(variant, seed, exc):
    log.error("run %s seed %s rejected: %s", variant, seed, exc)
    return {"variant": variant, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def run_ablation(base_cfg, variants, seeds, summary_path=None, pivot_path=None, parallel=False, workers=None):
    """Every (variant, seed) pair on a shared world per seed.

    Writes one summary row per run and a pivot of mean ``final_r1_sum`` per
    variant. Returns ``(rows, pivot)``.
    """
    if not variants or not seeds:
        raise ValueError("ablation needs at least one variant and one seed")
    log_base = resolve_output(base_cfg.output.log_path)
    summary_path = resolve_output(summary_path or base_cfg.output.summary_path)
    pivot_path = resolve_output(pivot_path) if pivot_path else summary_path.with_name(summary_path.stem + "_pivot.csv")
    jobs = []
    for variant in variants:
        agg, reg = parse_variant(variant) if isinstance(variant, str) else variant
        for seed in seeds:
            try:
                cfg = seeded(base_cfg, seed).with_updates(run={"aggregator": agg, "regularizer": reg})
            except ConfigurationError as exc:
                jobs.append(_setup_failure(f"{agg}+{reg}", seed, exc))
                continue
            jobs.append((cfg, _run_path(log_base, f"{agg}+{reg}_s{seed}"), workers))
    rows = _map(jobs, parallel)
    write_csv(summary_path, SUMMARY_FIELDS + ["world_hash", "error"], rows)
    pivot = pivot_rows(rows)
    write_csv(pivot_path, ["variant", "n_seeds", "mean_final_r1_sum", "se_final_r1_sum", "mean_final_drift"], pivot)
    return rows, pivot


def _se(values):
    return statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0


def pivot_rows(rows):
    out = []
    for variant in dict.fromkeys(r["variant"] for r in rows):
        ok = [r for r in rows if r["variant"] == variant and not r.get("error")]
        r1 = [r["final_r1_sum"] for r in ok]
        drift = [r["final_drift"] for r in ok if r.get("final_drift") is not None]
        out.append({
            "variant": variant,
            "n_seeds": len(ok),
            "mean_final_r1_sum": statistics.fmean(r1) if r1 else None,
            "se_final_r1_sum": _se(r1) if r1 else None,
            "mean_final_drift": statistics.fmean(drift) if drift else None,
        })
    return out


def run_comm_sweep(base_cfg, public_batch_values, d_values, seeds, sweep_path=None, parallel=False, workers=None):
    """Vary the transmitted public rows at fixed d, then d at fixed rows.

    ``public_batch_values`` set ``run.public_subset`` (rows broadcast and
    uploaded per round); ``d_values`` set ``server.rep_dim``.
    """
    if not public_batch_values or not d_values or not seeds:
        raise ValueError("sweep needs non-empty batch, dim and seed lists")
    log_base = resolve_output(base_cfg.output.log_path)
    sweep_path = resolve_output(sweep_path) if sweep_path else resolve_output(base_cfg.output.summary_path).with_name("sweep.csv")
    jobs, meta = [], []
    for axis, values in (("num", public_batch_values), ("dim", d_values)):
        for value in values:
            for seed in seeds:
                meta.append((axis, int(value), seed))
                try:
                    if axis == "num":
                        cfg = seeded(base_cfg, seed).with_updates(run={"public_subset": int(value)})
                    else:
                        cfg = seeded(base_cfg, seed).with_updates(server={"rep_dim": int(value)})
                except ConfigurationError as exc:
                    jobs.append(_setup_failure(base_cfg.variant, seed, exc))
                    continue
                jobs.append((cfg, _run_path(log_base, f"sweep_{axis}{value}_s{seed}"), workers))
    results = _map(jobs, parallel)
    rows = []
    for (axis, value, seed), res in zip(meta, results):
        rows.append({"axis": axis, "value": value, "seed": seed,
                     "total_comm_bytes": res.get("total_comm_bytes"),
                     "final_r1_sum": res.get("final_r1_sum"), "error": res.get("error", "")})
    write_csv(sweep_path, SWEEP_FIELDS + ["error"], rows)
    return rows


def expected_comm_bytes(cfg, records, clients):
    """Closed-form total bytes for ``records`` given ``{client_id: modality}``."""
    total = 0
    for rec in records:
        n_img = sum(1 for c in rec.selected if IMAGE in OWNED[clients[c]])
        n_txt = sum(1 for c in rec.selected if TEXT in OWNED[clients[c]])
        cost = comm_cost(n_img, n_txt, cfg.run.public_subset, cfg.server.rep_dim, n_selected=len(rec.selected))
        total += cost["up_bytes"] + cost["down_bytes"]
    return total


def client_modalities(cfg):
    c = cfg.clients
    kinds = ["image"] * c.n_img + ["text"] * c.n_txt + ["multimodal"] * c.n_mm
    return dict(enumerate(kinds))

