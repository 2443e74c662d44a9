"""Backend selection for the row kernels.

The compiled extension is preferred; the numpy fallback is used when it
was not built or when ``REPFED_PURE_PYTHON`` is set to a truthy value.
``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import _kernels_py

_FORCE_PURE = os.environ.get("REPFED_PURE_PYTHON", "").lower() in {"1", "true", "yes"}

_compiled = None
if not _FORCE_PURE:
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def compiled_available():
    return _compiled is not None


def get_backend(name):
    """Return the kernel module for ``name`` in {"cython", "python"}."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def l2_normalize_rows(z):
    return _impl.l2_normalize_rows(_c(z))


def l2_normalize_backward(y, norms, dy):
    return _impl.l2_normalize_backward(_c(y), _c(norms), _c(dy))


def softmax_xent_rows(logits, targets):
    return _impl.softmax_xent_rows(_c(logits), np.ascontiguousarray(targets, dtype=np.int64))


def contrastive_scores(local_stack, global_cross, inv_tau, include_diagonal=False):
    return _impl.contrastive_scores(_c(local_stack), _c(global_cross), float(inv_tau), bool(include_diagonal))


def row_softmax(scores):
    return _impl.row_softmax(_c(scores))


def mean_pairwise_distance(stack):
    return _impl.mean_pairwise_distance(_c(stack))
