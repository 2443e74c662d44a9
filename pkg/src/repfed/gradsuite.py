"""Finite-difference checks of every loss composed with a one-hidden-layer encoder."""

import numpy as np

from . import losses
from .nn import EncoderSpec, encoder_backward, forward_with_cache, grad_check, init_params


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_problems(seed, batch=8, in_dim=6, hidden=5, d=4, n_classes=3, temperature=0.5):
    """``{name: (loss_and_grad, params0)}`` for each loss on a seeded tiny instance."""
    rng = np.random.default_rng(seed)
    spec = EncoderSpec(in_dim, (hidden,), d, "tanh")
    x = rng.standard_normal((batch, in_dim))
    cfg = losses.ContrastConfig(temperature, batch)
    g_other = _unit_rows(rng, batch, d)
    g_same = _unit_rows(rng, batch, d)
    prev = _unit_rows(rng, batch, d)
    labels = rng.integers(0, n_classes, size=batch)
    p0 = init_params(spec, seed)
    n_enc = spec.num_params

    def through_encoder(loss_fn):
        def f(p):
            z, cache = forward_with_cache(spec, p, x)
            res = loss_fn(z)
            return res.value, encoder_backward(spec, p, x, res.grad, cache)
        return f

    def classification(p):
        enc_p, head = p[:n_enc], p[n_enc:].reshape(n_classes, d)
        z, cache = forward_with_cache(spec, enc_p, x)
        res = losses.classification_loss(z, head, labels)
        return res.value, np.concatenate([encoder_backward(spec, enc_p, x, res.grad, cache), res.grad_head.ravel()])

    spec_t = EncoderSpec(in_dim + 1, (hidden,), d, "tanh")
    xt = rng.standard_normal((batch, in_dim + 1))

    def bidirectional(p):
        pi, pt = p[:n_enc], p[n_enc:]
        zi, ci = forward_with_cache(spec, pi, x)
        zt, ct = forward_with_cache(spec_t, pt, xt)
        res = losses.bidirectional_pair_loss(zi, zt, cfg)
        gi = encoder_backward(spec, pi, x, res.grad, ci)
        gt = encoder_backward(spec_t, pt, xt, res.grad_other, ct)
        return res.value, np.concatenate([gi, gt])

    head0 = rng.standard_normal(n_classes * d)
    return {
        "inter": (through_encoder(lambda z: losses.inter_modal_loss(z, g_other, cfg)), p0),
        "intra": (through_encoder(lambda z: losses.intra_modal_loss(z, g_same, prev, cfg)), p0),
        "classification": (classification, np.concatenate([p0, head0])),
        "bidirectional": (bidirectional, np.concatenate([p0, init_params(spec_t, seed + 1)])),
        "distill_squared": (through_encoder(lambda z: losses.distill_loss(z, g_same, "squared_l2")), p0),
    }


def run_gradient_suite(seeds=(0, 1, 2), probes=32, step=1e-5):
    """Worst relative error per loss across ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, (fn, p0) in make_problems(seed).items():
            err = grad_check(fn, p0, step=step, probes=probes, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
