"""Activation families, their derivatives, and per-neuron bound calibration.

Four hidden-layer activations are supported:

* ``relu``           -- ``max(0, x)``
* ``gbrelu``         -- one bound shared by a whole layer; values above it are
  either zeroed (``squash_to_zero``) or truncated to it (``clamp_to_bound``)
* ``fitrelu_naive``  -- hard per-neuron bound, values above it are zeroed
* ``fitrelu``        -- smooth per-neuron bound with a logistic gate of slope k

``identity`` is used after the output layer.

The smooth form is ``max(0, x / (1 + exp(k (x - lam))))``: the gate is ~1 well
below the bound and ~0 well above it, so it converges pointwise to
``fitrelu_naive`` as k grows and to ``relu`` as the bound grows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

KINDS = ("identity", "relu", "gbrelu", "fitrelu_naive", "fitrelu")
GBRELU_MODES = ("squash_to_zero", "clamp_to_bound")
GRANULARITIES = ("element", "channel")
BOUND_FLOOR = 1e-3
DEFAULT_SLOPE = 10.0


class ActivationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationConfig:
    """Which activation a layer applies.

    ``global_bound`` is the layer-wide bound for ``gbrelu``; once attached to a
    network it is stored (and faulted) as a one-word bound buffer. ``slope`` is
    k for ``fitrelu``. ``granularity`` selects one bound per output element or
    one per channel for the per-neuron kinds.
    """

    kind: str = "relu"
    mode: str = "squash_to_zero"
    global_bound: float | None = None
    slope: float = DEFAULT_SLOPE
    granularity: str = "element"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ActivationConfigError(f"unknown activation kind {self.kind!r}")
        if self.mode not in GBRELU_MODES:
            raise ActivationConfigError(f"unknown gbrelu mode {self.mode!r}")
        if self.granularity not in GRANULARITIES:
            raise ActivationConfigError(f"unknown granularity {self.granularity!r}")
        if not self.slope > 0:
            raise ActivationConfigError(f"slope k must be > 0, got {self.slope}")
        if self.global_bound is not None and not self.global_bound > 0:
            raise ActivationConfigError(f"global bound must be > 0, got {self.global_bound}")
        if self.kind == "gbrelu" and self.global_bound is None:
            raise ActivationConfigError("gbrelu needs a global_bound")

    @property
    def bounded(self) -> bool:
        return self.kind in ("gbrelu", "fitrelu_naive", "fitrelu")

    @property
    def per_neuron(self) -> bool:
        return self.kind in ("fitrelu_naive", "fitrelu")


IDENTITY = ActivationConfig("identity")
RELU = ActivationConfig("relu")


def _check_bound(lam):
    if np.any(np.asarray(lam) <= 0):
        raise ActivationConfigError("bound values must be > 0")


# ---------------------------------------------------------------------------
# pointwise functions (scalars or arrays)

def relu(x):
    return np.maximum(x, 0.0)


def gbrelu(x, lam, mode="squash_to_zero"):
    _check_bound(lam)
    if mode == "squash_to_zero":
        return np.where(x > lam, 0.0, np.maximum(x, 0.0))
    if mode == "clamp_to_bound":
        return np.minimum(np.maximum(x, 0.0), lam)
    raise ActivationConfigError(f"unknown gbrelu mode {mode!r}")


def fitrelu_naive(x, lam):
    _check_bound(lam)
    return np.where(x > lam, 0.0, np.maximum(x, 0.0))


def _gate(x, lam, k):
    # 1 / (1 + exp(k (x - lam))) without overflow
    return expit(k * (lam - x))


def _gate_slope(x, lam, k):
    # g (1 - g) as expit(z) * expit(-z): no cancellation when g is near 1
    z = k * (lam - x)
    return expit(z) * expit(-z)


def fitrelu(x, lam, k=DEFAULT_SLOPE):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) * _gate(x, lam, k)


def fitrelu_grad_x(x, lam, k=DEFAULT_SLOPE):
    x = np.asarray(x, dtype=np.float64)
    g = _gate(x, lam, k)
    return np.where(x > 0, g - x * k * _gate_slope(x, lam, k), 0.0)


def fitrelu_grad_lambda(x, lam, k=DEFAULT_SLOPE):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x * k * _gate_slope(x, lam, k), 0.0)


# ---------------------------------------------------------------------------
# layer-level application

def expand_bounds(bounds: np.ndarray, config: ActivationConfig, neuron_shape) -> np.ndarray:
    """Reshape a bound buffer so it broadcasts against a (B, *neuron_shape) batch."""
    if config.kind == "gbrelu":
        return bounds.reshape(())
    if config.granularity == "channel" and len(neuron_shape) == 3:
        return bounds.reshape(-1, 1, 1)
    return bounds.reshape(neuron_shape)


def bound_shape(config: ActivationConfig, neuron_shape) -> tuple[int, ...]:
    if config.kind == "gbrelu":
        return (1,)
    if config.granularity == "channel" and len(neuron_shape) == 3:
        return (neuron_shape[0],)
    return tuple(neuron_shape)


def apply(config: ActivationConfig, x: np.ndarray, lam=None, overwrite: bool = False) -> np.ndarray:
    """Apply a layer activation. ``lam`` is already broadcastable (see expand_bounds).

    Bounds are read from faultable memory and are not re-validated here: a
    corrupted bound simply changes the function. With ``overwrite`` the result
    may reuse ``x``'s memory.
    """
    kind = config.kind
    if kind == "identity":
        return x
    out = x if overwrite else None
    if kind == "relu":
        return np.maximum(x, 0.0, out=out)
    if kind == "fitrelu":
        # relu(x) / (1 + exp(k (x - lam))); exp overflow to inf gives an exact 0
        k = config.slope
        den = np.multiply(x, k)
        den -= k * np.asarray(lam, dtype=np.float64)
        with np.errstate(over="ignore"):
            np.exp(den, out=den)
        den += 1.0
        out = np.maximum(x, 0.0, out=out)
        out /= den
        return out
    if kind == "gbrelu" and config.mode == "clamp_to_bound":
        out = np.maximum(x, 0.0, out=out)
        return np.minimum(out, lam, out=out)
    # gbrelu squash and fitrelu_naive share a definition
    over = x > np.broadcast_to(lam, x.shape)
    out = np.maximum(x, 0.0, out=out)
    out[over] = 0.0
    return out


def apply_vjp(config: ActivationConfig, x: np.ndarray, grad_out: np.ndarray, lam=None):
    """Return ``(grad_x, grad_lam)``; ``grad_lam`` is reduced to ``lam``'s shape
    for ``fitrelu`` and is ``None`` for every other kind."""
    kind = config.kind
    if kind == "identity":
        return grad_out, None
    if kind == "fitrelu":
        k = config.slope
        g = _gate(x, lam, k)
        active = x > 0
        s = k * _gate_slope(x, lam, k)
        gx = np.where(active, grad_out * (g - x * s), 0.0)
        gl = np.where(active, grad_out * x * s, 0.0)
        return gx, _reduce_to(gl, np.shape(lam))
    if kind == "relu":
        return grad_out * (x > 0), None
    if kind == "gbrelu" and config.mode == "clamp_to_bound":
        return grad_out * ((x > 0) & (x < lam)), None
    return grad_out * ((x > 0) & (x <= lam)), None


def _reduce_to(g, shape):
    # sum a (B, ...) gradient down to a broadcast parameter shape
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# calibration

@dataclass
class BoundStore:
    """Per-layer real-valued bounds, keyed by layer index in the network."""

    bounds: dict[int, np.ndarray] = field(default_factory=dict)
    granularity: str = "element"

    @property
    def count(self) -> int:
        return int(sum(b.size for b in self.bounds.values()))

    def sum_squares(self) -> float:
        return float(sum(np.sum(b * b) for b in self.bounds.values()))

    def flat(self) -> np.ndarray:
        if not self.bounds:
            return np.zeros(0)
        return np.concatenate([self.bounds[i].ravel() for i in sorted(self.bounds)])


def neuron_maxima(net, x: np.ndarray, batch_size: int = 256) -> dict[int, np.ndarray]:
    """Per-element maximum of ``relu(pre-activation)`` for every hidden layer.

    Hidden layers are evaluated with plain ReLU regardless of their configured
    activation so the maxima are not censored by existing bounds.
    """
    from .network import relu_variant, hidden_layer_indices, forward_trace

    if len(x) == 0:
        raise ValueError("calibration dataset is empty")
    plain = relu_variant(net)
    hidden = hidden_layer_indices(plain)
    maxima = {i: None for i in hidden}
    for start in range(0, len(x), batch_size):
        trace = forward_trace(plain, x[start:start + batch_size])
        for i in hidden:
            m = np.maximum(trace.pre[i], 0.0).max(axis=0)
            maxima[i] = m if maxima[i] is None else np.maximum(maxima[i], m)
    return maxima


def calibrate_bounds(net, x: np.ndarray, granularity: str = "element",
                     batch_size: int = 256) -> BoundStore:
    """Set each neuron's bound to its largest fault-free activation over ``x``.

    Neurons that never fire get ``BOUND_FLOOR``. Under ``channel`` granularity
    a conv channel's bound is the max over its spatial positions.
    """
    if granularity not in GRANULARITIES:
        raise ActivationConfigError(f"unknown granularity {granularity!r}")
    store = BoundStore(granularity=granularity)
    for i, m in neuron_maxima(net, np.asarray(x), batch_size).items():
        if granularity == "channel" and m.ndim == 3:
            m = m.max(axis=(1, 2))
        store.bounds[i] = np.maximum(m, BOUND_FLOOR)
    return store


def layer_global_bounds(net, x: np.ndarray) -> dict[int, float]:
    """Layer-wide bound: the largest activation any neuron of the layer produced."""
    return {i: float(max(m.max(), BOUND_FLOOR)) for i, m in neuron_maxima(net, np.asarray(x)).items()}
