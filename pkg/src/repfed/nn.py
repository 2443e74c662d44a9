"""Small dense encoders with hand-written backprop, gradient checking and Adam.

An encoder is ``affine -> act -> ... -> affine -> L2 normalize``. Parameters
live in one flat float64 vector laid out layer by layer, each layer as its
row-major ``(out, in)`` weight followed by its bias.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericError

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(x) <= 0 for x in dims):
            raise ConfigurationError(f"encoder dimensions must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self):
        """(fan_in, fan_out) per affine layer."""
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self):
        return sum(i * o + o for i, o in self.layer_dims)


def unpack(spec, params):
    """Split the flat vector into ``[(W, b), ...]`` views (no copies)."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, spec needs ({spec.num_params},)"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = params[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_params(spec, seed):
    """Glorot-uniform weights, zero biases, one seeded stream per layer."""
    params = np.zeros(spec.num_params)
    seq = np.random.SeedSequence(seed)
    for (w, _), child in zip(unpack(spec, params), seq.spawn(len(spec.layer_dims))):
        fan_out, fan_in = w.shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = np.random.default_rng(child).uniform(-a, a, size=w.shape)
    return params


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(name, z, a, da):
    if name == "tanh":
        return da * (1.0 - a * a)
    return da * (z > 0.0)


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in encoder layer {layer}")


def forward_with_cache(spec, params, inputs):
    """Forward pass keeping the intermediates ``encoder_backward`` needs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigurationError(f"inputs have shape {x.shape}, expected (rows, {spec.input_dim})")
    layers = unpack(spec, params)
    acts = [x]
    pre = []
    h = x
    last = len(layers) - 1
    for idx, (w, b) in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericError
            z = h @ w.T + b
        _check_finite(z, idx)
        pre.append(z)
        h = z if idx == last else _activate(spec.activation, z)
        if idx != last:
            acts.append(h)
    y, norms = kernels.l2_normalize_rows(h)
    return y, (acts, pre, y, norms)


def encoder_forward(spec, params, inputs):
    return forward_with_cache(spec, params, inputs)[0]


def encoder_backward(spec, params, inputs, output_grad, cache=None):
    """Gradient w.r.t. the flat parameters of ``sum(output_grad * outputs)``.

    ``output_grad`` is dLoss/dOutputs for the normalized outputs. Pass the
    cache from ``forward_with_cache`` to skip recomputing the forward pass.
    """
    if cache is None:
        _, cache = forward_with_cache(spec, params, inputs)
    acts, pre, y, norms = cache
    dy = np.asarray(output_grad, dtype=np.float64)
    if dy.shape != y.shape:
        raise ConfigurationError(f"output_grad has shape {dy.shape}, outputs are {y.shape}")
    grad = np.zeros(spec.num_params)
    grads = unpack(spec, grad)
    layers = unpack(spec, params)
    dz = kernels.l2_normalize_backward(y, norms, dy)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        gw, gb = grads[idx]
        gw[...] = dz.T @ acts[idx]
        gb[...] = dz.sum(axis=0)
        if idx > 0:
            da = dz @ w
            dz = _activate_grad(spec.activation, pre[idx - 1], acts[idx], da)
    return grad


def grad_check(loss_and_grad, params, step=1e-5, probes=32, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Probes ``probes`` seeded coordinates (without replacement when there are
    enough parameters). Relative error is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ConfigurationError("grad_check step must be positive")
    if probes < 1:
        raise ConfigurationError("grad_check needs at least one probe")
    params = np.array(params, dtype=np.float64)
    value, analytic = loss_and_grad(params)
    if not np.isfinite(value):
        raise NumericError("loss is not finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = params.shape[0]
    coords = rng.choice(n, size=probes, replace=probes > n)
    worst = 0.0
    for i in coords:
        orig = params[i]
        params[i] = orig + step
        f_plus = loss_and_grad(params)[0]
        params[i] = orig - step
        f_minus = loss_and_grad(params)[0]
        params[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"loss is not finite when probing coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(params, grad, state, lr):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(params) or grad.shape != state.first_moment.shape:
        raise ConfigurationError("adam_step: parameter, gradient and moment lengths differ")
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.epsilon)
    return new_params, new_state


@dataclass
class Encoder:
    """An encoder spec bundled with its parameters and optimizer state."""

    spec: EncoderSpec
    params: np.ndarray
    adam: AdamState = field(default=None)

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.zeros(self.spec.num_params)

    @classmethod
    def create(cls, spec, seed):
        return cls(spec, init_params(spec, seed))

    def __call__(self, inputs):
        return encoder_forward(self.spec, self.params, inputs)

    def step(self, grad, lr):
        self.params, self.adam = adam_step(self.params, grad, self.adam, lr)
