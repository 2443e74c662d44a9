"""Independent loop-based references shared by several test modules."""

import math

import numpy as np


def brute_force_chain(stacks, g, tau, include_diagonal=False):
    """Scores, softmax weights and aggregate by explicit loops."""
    n_c, batch = len(stacks), g.shape[0]
    scores = [[0.0] * n_c for _ in range(batch)]
    for c in range(n_c):
        for k in range(batch):
            num = math.exp(float(np.dot(stacks[c][k], g[k])) / tau)
            den = 0.0
            for j in range(batch):
                if j != k or include_diagonal:
                    den += math.exp(float(np.dot(stacks[c][k], g[j])) / tau)
            scores[k][c] = math.log(num / den)
    weights = []
    for k in range(batch):
        e = [math.exp(s) for s in scores[k]]
        weights.append([x / sum(e) for x in e])
    out = np.zeros_like(g)
    for k in range(batch):
        for c in range(n_c):
            out[k] += weights[k][c] * stacks[c][k]
    return np.array(scores), np.array(weights), out
