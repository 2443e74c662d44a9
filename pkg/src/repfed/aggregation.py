"""Fusing per-client public representations into per-modality targets.

Global-local contrastive aggregation (``gca``) scores every contributor's
row k by how well it picks out the global row k of the *other* modality
among the rest of the batch, then softmaxes those scores across
contributors item by item. Three fixed-weight baselines share the same
``aggregate`` step.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError

STRATEGIES = ("gca", "mean", "sample_count", "iot_boost")
BASELINES = ("mean", "sample_count", "iot_boost")


@dataclass(frozen=True)
class Contribution:
    client_id: int
    modality: str  # "image" or "text"
    reps: np.ndarray
    num_private_samples: int
    is_multimodal: bool


def sort_contributions(contribs):
    return sorted(contribs, key=lambda c: c.client_id)


def _stack(contribs):
    if not contribs:
        raise ConfigurationError("aggregation needs at least one contributor")
    shapes = {c.reps.shape for c in contribs}
    if len(shapes) != 1:
        raise ConfigurationError(f"contributor representation shapes differ: {sorted(shapes)}")
    return np.stack([c.reps for c in contribs])


def contrastive_scores(contribs, global_cross, cfg, include_diagonal=False, temperature=None):
    """(batch, contributors) score matrix, columns in the given contributor order."""
    stack = _stack(contribs)
    if global_cross.shape != stack.shape[1:]:
        raise ConfigurationError(
            f"global cross-modal reps {global_cross.shape} do not match contributions {stack.shape[1:]}"
        )
    if stack.shape[1] < 2 and not include_diagonal:
        raise ConfigurationError("GCA requires public batch >= 2")
    tau = cfg.temperature if temperature is None else temperature
    return kernels.contrastive_scores(stack, global_cross, 1.0 / tau, include_diagonal)


def gca_weights(scores):
    return kernels.row_softmax(np.asarray(scores, dtype=np.float64))


def baseline_weights(contribs, strategy, boost=100.0, batch=None):
    if not contribs:
        raise ConfigurationError("aggregation needs at least one contributor")
    if strategy == "mean":
        w = np.ones(len(contribs))
    elif strategy == "sample_count":
        w = np.array([c.num_private_samples for c in contribs], dtype=np.float64)
        if w.sum() <= 0:
            w = np.ones(len(contribs))
    elif strategy == "iot_boost":
        w = np.array([boost if c.is_multimodal else 1.0 for c in contribs])
    else:
        raise ConfigurationError(f"unknown baseline strategy {strategy!r}; expected one of {BASELINES}")
    w = w / w.sum()
    rows = contribs[0].reps.shape[0] if batch is None else batch
    return np.tile(w, (rows, 1))


def aggregate(weights, contribs):
    """Row k = sum_c weights[k, c] * reps_c[k]; not re-normalized."""
    stack = _stack(contribs)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (stack.shape[1], stack.shape[0]):
        raise ConfigurationError(
            f"weights {weights.shape} do not match (batch, contributors) = {(stack.shape[1], stack.shape[0])}"
        )
    return np.einsum("kc,ckd->kd", weights, stack)


def aggregate_modality(contribs, global_cross, strategy, cfg, boost=100.0, include_diagonal=False,
                       temperature=None):
    """Sort contributors, weight them by ``strategy`` and aggregate.

    Returns ``(target, weights, ordered_contribs)``.
    """
    ordered = sort_contributions(contribs)
    if strategy == "gca":
        weights = gca_weights(contrastive_scores(ordered, global_cross, cfg, include_diagonal, temperature))
    else:
        weights = baseline_weights(ordered, strategy, boost)
    return aggregate(weights, ordered), weights, ordered


def planted_outlier_instance(seed, batch=16, n_contributors=4, dim=8, modality="image"):
    """Contributors that copy the cross-modal global rows, plus one pure-noise contributor.

    Returns ``(contributions, global_cross, noise_client_id)``; the noise
    contributor's position in the sorted order is random.
    """
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((batch, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    noise_id = int(rng.integers(n_contributors))
    contribs = []
    for cid in range(n_contributors):
        if cid == noise_id:
            reps = rng.standard_normal((batch, dim))
            reps /= np.linalg.norm(reps, axis=1, keepdims=True)
        else:
            reps = g.copy()
        contribs.append(Contribution(cid, modality, reps, 100, False))
    return contribs, g, noise_id
