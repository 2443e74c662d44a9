"""Pure numpy implementations of the hot row kernels.

Used whenever the compiled ``_kernels`` extension is unavailable, or when
``REPFED_PURE_PYTHON=1`` is set. Signatures and results must match the
Cython module (tests compare the two to 1e-12).
"""

import numpy as np

NORM_FLOOR = 1e-12


def l2_normalize_rows(z):
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    norms = np.maximum(norms, NORM_FLOOR)
    return z / norms[:, None], norms


def l2_normalize_backward(y, norms, dy):
    # d(z/|z|) = (dy - y <y, dy>) / |z|; below the floor the map is linear
    proj = np.einsum("ij,ij->i", y, dy)
    live = norms > NORM_FLOOR
    dz = dy - np.where(live[:, None], y * proj[:, None], 0.0)
    return dz / norms[:, None]


def softmax_xent_rows(logits, targets):
    """Per-row cross-entropy against integer targets.

    Returns ``(losses, probs)`` where ``probs`` is the row softmax; the
    gradient of the summed loss w.r.t. logits is ``probs - onehot``.
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    lse = m[:, 0] + np.log(s[:, 0])
    rows = np.arange(logits.shape[0])
    losses = lse - logits[rows, targets]
    return losses, probs


def contrastive_scores(local_stack, global_cross, inv_tau, include_diagonal):
    """Score of each contributor's row k against the cross-modal global rows.

    ``local_stack`` is (C, B, d). Returns a (B, C) matrix with
    ``s[k, c] = <l_k^c, g_k>/tau - logsumexp_{j (!= k)} <l_k^c, g_j>/tau``.
    """
    n_contrib, batch, _ = local_stack.shape
    scores = np.empty((batch, n_contrib))
    mask = None if include_diagonal else ~np.eye(batch, dtype=bool)
    for c in range(n_contrib):
        sim = (local_stack[c] @ global_cross.T) * inv_tau
        pos = np.diagonal(sim).copy()
        if mask is not None:
            sim = np.where(mask, sim, -np.inf)
        m = sim.max(axis=1)
        lse = m + np.log(np.exp(sim - m[:, None]).sum(axis=1))
        scores[:, c] = pos - lse
    return scores


def row_softmax(scores):
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=1, keepdims=True)


def mean_pairwise_distance(stack):
    """Mean over items of the mean distance between distinct contributors.

    ``stack`` is (C, B, d) with C >= 2.
    """
    n_contrib, batch, _ = stack.shape
    total = np.zeros(batch)
    pairs = 0
    for a in range(n_contrib):
        for b in range(a + 1, n_contrib):
            diff = stack[a] - stack[b]
            total += np.sqrt(np.einsum("ij,ij->i", diff, diff))
            pairs += 1
    return float(np.mean(total / pairs))
