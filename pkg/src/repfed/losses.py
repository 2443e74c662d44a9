"""Scalar objectives over representation matrices, with exact gradients.

Every loss returns a :class:`LossResult` whose ``grad`` is taken w.r.t. the
*local* (trainable) rows only. Matrices received from elsewhere (global
representations, cached previous-round representations, distillation
targets) are constants: no gradient is produced for them.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 1.0
    batch_size: int = 128

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("contrastive batch_size must be at least 2")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    grad_other: np.ndarray = None
    grad_head: np.ndarray = None


def _aligned(a, b, what):
    if a.shape != b.shape:
        raise ConfigurationError(f"{what}: row/column mismatch {a.shape} vs {b.shape}")


def inter_modal_loss(local, global_other, cfg):
    """InfoNCE of each local row against the paired global row of the other modality.

    The softmax denominator runs over the whole batch, the positive included.
    """
    _aligned(local, global_other, "inter_modal_loss")
    n = local.shape[0]
    if n < 2:
        raise ConfigurationError("inter_modal_loss needs at least 2 rows")
    inv_tau = 1.0 / cfg.temperature
    logits = (local @ global_other.T) * inv_tau
    losses, probs = kernels.softmax_xent_rows(logits, np.arange(n))
    probs[np.diag_indices(n)] -= 1.0
    grad = (probs @ global_other) * (inv_tau / n)
    return LossResult(float(losses.mean()), grad)


def intra_modal_loss(local, global_same, prev_local, cfg):
    """Two-way contrast: pull towards the global row, push from last round's own row.

    With no previous-round cache (a client's first participation) the term
    is zero.
    """
    _aligned(local, global_same, "intra_modal_loss")
    if prev_local is None:
        return LossResult(0.0, np.zeros_like(local))
    _aligned(local, prev_local, "intra_modal_loss")
    n = local.shape[0]
    inv_tau = 1.0 / cfg.temperature
    pos = np.einsum("ij,ij->i", local, global_same) * inv_tau
    neg = np.einsum("ij,ij->i", local, prev_local) * inv_tau
    gap = neg - pos
    # -log(e^pos / (e^pos + e^neg)) = softplus(neg - pos)
    losses = np.logaddexp(0.0, gap)
    sig = np.exp(gap - losses)
    grad = sig[:, None] * (prev_local - global_same) * (inv_tau / n)
    return LossResult(float(losses.mean()), grad)


def classification_loss(reps, head, labels):
    """Mean softmax cross-entropy of ``reps @ head.T``; gradients to reps and head."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = head.shape[0]
    if head.shape[1] != reps.shape[1]:
        raise ConfigurationError("classification head width differs from representation dim")
    if labels.shape != (reps.shape[0],):
        raise ConfigurationError("one label per representation row is required")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigurationError(f"labels must lie in [0, {n_classes})")
    n = reps.shape[0]
    logits = reps @ head.T
    losses, probs = kernels.softmax_xent_rows(logits, labels)
    probs[np.arange(n), labels] -= 1.0
    probs /= n
    return LossResult(float(losses.mean()), probs @ head, grad_head=probs.T @ reps)


def bidirectional_pair_loss(img, txt, cfg):
    """Symmetric image<->text InfoNCE; ``grad`` is for img, ``grad_other`` for txt."""
    _aligned(img, txt, "bidirectional_pair_loss")
    n = img.shape[0]
    if n < 2:
        raise ConfigurationError("bidirectional_pair_loss needs at least 2 rows")
    inv_tau = 1.0 / cfg.temperature
    logits = (img @ txt.T) * inv_tau
    targets = np.arange(n)
    l_i2t, p_i2t = kernels.softmax_xent_rows(logits, targets)
    l_t2i, p_t2i = kernels.softmax_xent_rows(logits.T, targets)
    p_i2t[targets, targets] -= 1.0
    p_t2i[targets, targets] -= 1.0
    d_logits = (p_i2t + p_t2i.T) * (0.5 * inv_tau / n)
    value = 0.5 * (l_i2t.mean() + l_t2i.mean())
    return LossResult(float(value), d_logits @ txt, grad_other=d_logits.T @ img)


def local_objective(task, inter, intra, gamma):
    """Task loss plus ``gamma`` times the two regularizers.

    Only the scalar is combined here. The three gradients live on different
    row sets (private batch vs public batch), so callers backprop each one
    through the encoder and add the parameter gradients with the same
    ``gamma`` weighting.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be non-negative")
    return LossResult(task.value + gamma * (inter.value + intra.value), task.grad)


DISTILL_MODES = ("squared_l2", "l2")


def distill_loss(server_reps, targets, mode="squared_l2"):
    """Mean (squared) L2 distance from server rows to fixed targets."""
    _aligned(server_reps, targets, "distill_loss")
    n = server_reps.shape[0]
    diff = server_reps - targets
    if mode == "squared_l2":
        value = 0.5 * np.einsum("ij,ij->i", diff, diff).mean()
        return LossResult(float(value), diff / n)
    if mode == "l2":
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        grad = diff / np.maximum(dist, 1e-12)[:, None] / n
        return LossResult(float(dist.mean()), grad)
    raise ConfigurationError(f"distill mode must be one of {DISTILL_MODES}, got {mode!r}")
