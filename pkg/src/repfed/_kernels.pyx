# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels. Mirrors ``_kernels_py`` call for call."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()

cdef double NORM_FLOOR = 1e-12


def l2_normalize_rows(double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], i, j
    cdef double acc, nrm
    out = np.empty((n, d))
    norms = np.empty(n)
    cdef double[:, ::1] y = out
    cdef double[::1] nv = norms
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc = acc + z[i, j] * z[i, j]
            nrm = sqrt(acc)
            if nrm < NORM_FLOOR:
                nrm = NORM_FLOOR
            nv[i] = nrm
            for j in range(d):
                y[i, j] = z[i, j] / nrm
    return out, norms


def l2_normalize_backward(double[:, ::1] y, double[::1] norms, double[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef double proj
    out = np.empty((n, d))
    cdef double[:, ::1] dz = out
    with nogil:
        for i in range(n):
            proj = 0.0
            if norms[i] > NORM_FLOOR:
                for j in range(d):
                    proj = proj + y[i, j] * dy[i, j]
            for j in range(d):
                dz[i, j] = (dy[i, j] - y[i, j] * proj) / norms[i]
    return out


def softmax_xent_rows(double[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1], i, j
    cdef double mx, s
    losses = np.empty(n)
    probs = np.empty((n, m))
    cdef double[::1] lv = losses
    cdef double[:, ::1] p = probs
    with nogil:
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, m):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(m):
                p[i, j] = exp(logits[i, j] - mx)
                s = s + p[i, j]
            for j in range(m):
                p[i, j] = p[i, j] / s
            lv[i] = mx + log(s) - logits[i, targets[i]]
    return losses, probs


def contrastive_scores(double[:, :, ::1] local_stack, double[:, ::1] global_cross,
                       double inv_tau, bint include_diagonal):
    cdef Py_ssize_t n_contrib = local_stack.shape[0]
    cdef Py_ssize_t batch = local_stack.shape[1], d = local_stack.shape[2]
    cdef Py_ssize_t c, k, j, t
    cdef double dot, pos, mx, s
    scores = np.empty((batch, n_contrib))
    sims = np.empty(batch)
    cdef double[:, ::1] sv = scores
    cdef double[::1] sim = sims
    with nogil:
        for c in range(n_contrib):
            for k in range(batch):
                mx = -INFINITY
                for j in range(batch):
                    dot = 0.0
                    for t in range(d):
                        dot = dot + local_stack[c, k, t] * global_cross[j, t]
                    sim[j] = dot * inv_tau
                    if j == k:
                        pos = sim[j]
                        if not include_diagonal:
                            continue
                    if sim[j] > mx:
                        mx = sim[j]
                s = 0.0
                for j in range(batch):
                    if j == k and not include_diagonal:
                        continue
                    s = s + exp(sim[j] - mx)
                sv[k, c] = pos - (mx + log(s))
    return scores


def row_softmax(double[:, ::1] scores):
    cdef Py_ssize_t n = scores.shape[0], m = scores.shape[1], i, j
    cdef double mx, s
    out = np.empty((n, m))
    cdef double[:, ::1] p = out
    with nogil:
        for i in range(n):
            mx = scores[i, 0]
            for j in range(1, m):
                if scores[i, j] > mx:
                    mx = scores[i, j]
            s = 0.0
            for j in range(m):
                p[i, j] = exp(scores[i, j] - mx)
                s = s + p[i, j]
            for j in range(m):
                p[i, j] = p[i, j] / s
    return out


def mean_pairwise_distance(double[:, :, ::1] stack):
    cdef Py_ssize_t n_contrib = stack.shape[0], batch = stack.shape[1], d = stack.shape[2]
    cdef Py_ssize_t a, b, k, t
    cdef double acc, diff, item_total, grand = 0.0
    cdef long pairs = n_contrib * (n_contrib - 1) // 2
    with nogil:
        for k in range(batch):
            item_total = 0.0
            for a in range(n_contrib):
                for b in range(a + 1, n_contrib):
                    acc = 0.0
                    for t in range(d):
                        diff = stack[a, k, t] - stack[b, k, t]
                        acc = acc + diff * diff
                    item_total = item_total + sqrt(acc)
            grand = grand + item_total / pairs
    return grand / batch
