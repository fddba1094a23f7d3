"""Feed-forward layer stack with Q15.16 parameter storage.

Every forward pass decodes weights, biases and activation bounds from their
32-bit words, so a flipped bit in any of them shows up in the output.

Layer kinds are ``dense``, ``conv2d``, ``maxpool2d`` and ``flatten``. Parametric
layers carry their own activation; pooling therefore follows activation.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import activations as act
from .activations import ActivationConfig, BoundStore, IDENTITY, RELU
from .numerics import (
    ShapeError, WORD_BITS, conv2d, conv2d_backward, conv_output_extent,
    decode_array, encode_array, maxpool2d, maxpool2d_backward,
)

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "flatten")
BUFFER_FIELDS = ("weight", "bias", "bound")


@dataclass
class Layer:
    kind: str
    weight: np.ndarray | None = None  # int32 words
    bias: np.ndarray | None = None  # int32 words
    activation: ActivationConfig = IDENTITY
    bounds: np.ndarray | None = None  # int32 words, bounded activations only
    stride: int = 1
    padding: int = 0
    window: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for name in BUFFER_FIELDS:
            buf = getattr(self, name if name != "bound" else "bounds")
            if buf is not None and buf.dtype != np.int32:
                raise TypeError(f"{name} must be int32 fixed-point words, got {buf.dtype}")
        if self.kind == "dense":
            if self.weight is None or self.weight.ndim != 2 or self.bias is None \
                    or self.bias.shape != (self.weight.shape[0],):
                raise ShapeError("dense needs weight (out, in) and bias (out,)",
                                 _shape(self.weight), _shape(self.bias))
        elif self.kind == "conv2d":
            if self.weight is None or self.weight.ndim != 4 or self.bias is None \
                    or self.bias.shape != (self.weight.shape[0],):
                raise ShapeError("conv2d needs weight (out, in, kh, kw) and bias (out,)",
                                 _shape(self.weight), _shape(self.bias))
        else:
            if self.weight is not None or self.bias is not None or self.activation.kind != "identity":
                raise ValueError(f"{self.kind} layers carry no parameters or activation")
        if self.activation.bounded and self.bounds is None:
            raise ValueError(f"{self.activation.kind} activation needs a bound buffer")

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        if self.kind == "dense":
            if in_shape != (self.weight.shape[1],):
                raise ShapeError("dense input mismatch", in_shape, self.weight.shape)
            return (self.weight.shape[0],)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W) input", in_shape)
        c, h, w = in_shape
        if self.kind == "conv2d":
            o, ci, kh, kw = self.weight.shape
            if ci != c:
                raise ShapeError("conv2d channel mismatch", in_shape, self.weight.shape)
            return (o, conv_output_extent(h, kh, self.stride, self.padding),
                    conv_output_extent(w, kw, self.stride, self.padding))
        return (c, conv_output_extent(h, self.window, self.stride, 0),
                conv_output_extent(w, self.window, self.stride, 0))

    def buffers(self):
        for name, buf in (("weight", self.weight), ("bias", self.bias), ("bound", self.bounds)):
            if buf is not None:
                yield name, buf


def _shape(a):
    return () if a is None else a.shape


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = self.shapes  # validates composition
        for i, layer in enumerate(self.layers):
            if layer.bounds is not None:
                want = act.bound_shape(layer.activation, shapes[i + 1])
                if layer.bounds.shape != want:
                    raise ShapeError(f"layer {i} bound buffer mismatch", layer.bounds.shape, want)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape followed by the output shape of each layer."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def neuron_count(self) -> int:
        shapes = self.shapes
        return int(sum(np.prod(shapes[i + 1]) for i in hidden_layer_indices(self)))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def buffer(self, buffer_id: str) -> np.ndarray:
        idx, name = parse_buffer_id(buffer_id)
        try:
            buf = dict(self.layers[idx].buffers())[name]
        except (IndexError, KeyError):
            raise KeyError(f"network has no buffer {buffer_id!r}") from None
        return buf

    def buffers(self):
        for i, layer in enumerate(self.layers):
            for name, buf in layer.buffers():
                yield buffer_id(i, name), buf

    def bound_store(self) -> BoundStore:
        store = BoundStore()
        for i, layer in enumerate(self.layers):
            if layer.activation.per_neuron:
                store.bounds[i] = decode_array(layer.bounds)
                store.granularity = layer.activation.granularity
        return store

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return self.input_shape == other.input_shape and len(self.layers) == len(other.layers) \
            and all(_layers_equal(a, b) for a, b in zip(self.layers, other.layers))


def _layers_equal(a: Layer, b: Layer) -> bool:
    if (a.kind, a.activation, a.stride, a.padding, a.window) != (b.kind, b.activation, b.stride, b.padding, b.window):
        return False
    for x, y in ((a.weight, b.weight), (a.bias, b.bias), (a.bounds, b.bounds)):
        if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
            return False
    return True


def buffer_id(layer_index: int, name: str) -> str:
    return f"{layer_index}.{name}"


def parse_buffer_id(bid: str) -> tuple[int, str]:
    idx, _, name = bid.partition(".")
    if name not in BUFFER_FIELDS or not idx.isdigit():
        raise KeyError(f"malformed buffer id {bid!r}")
    return int(idx), name


def hidden_layer_indices(net: Network) -> list[int]:
    return [i for i, layer in enumerate(net.layers) if layer.activation.kind != "identity"]


# ---------------------------------------------------------------------------
# construction helpers

def dense(weight, bias, activation: ActivationConfig = RELU) -> Layer:
    return Layer("dense", encode_array(weight), encode_array(bias), activation)


def conv(weight, bias, stride=1, padding=0, activation: ActivationConfig = RELU) -> Layer:
    return Layer("conv2d", encode_array(weight), encode_array(bias), activation,
                 stride=stride, padding=padding)


def maxpool(window=2, stride=None) -> Layer:
    return Layer("maxpool2d", window=window, stride=window if stride is None else stride)


def flatten() -> Layer:
    return Layer("flatten")


def _clone(layer: Layer, **changes) -> Layer:
    arrays = {name: None if getattr(layer, name) is None else getattr(layer, name).copy()
              for name in ("weight", "bias", "bounds")}
    arrays.update(changes)
    return replace(layer, **arrays)


def relu_variant(net: Network) -> Network:
    """Same parameters, every hidden activation replaced by plain ReLU."""
    layers = [_clone(layer, activation=RELU, bounds=None) if layer.activation.kind != "identity"
              else _clone(layer) for layer in net.layers]
    return Network(layers, net.input_shape)


def with_bounds(net: Network, store: BoundStore, slope: float = act.DEFAULT_SLOPE,
                kind: str = "fitrelu") -> Network:
    """Swap every hidden activation for a per-neuron bounded one using ``store``."""
    layers = []
    shapes = net.shapes
    for i, layer in enumerate(net.layers):
        if layer.activation.kind == "identity":
            layers.append(_clone(layer))
            continue
        cfg = ActivationConfig(kind, slope=slope, granularity=store.granularity)
        lam = np.asarray(store.bounds[i], dtype=np.float64)
        want = act.bound_shape(cfg, shapes[i + 1])
        if lam.shape != want:
            raise ShapeError(f"bounds for layer {i} have the wrong shape", lam.shape, want)
        layers.append(_clone(layer, activation=cfg, bounds=encode_array(lam)))
    return Network(layers, net.input_shape)


def with_global_bounds(net: Network, bounds: dict[int, float], mode: str = "squash_to_zero",
                       layers_only=None) -> Network:
    """Replace hidden activations (all, or those in ``layers_only``) with GBReLU."""
    layers = []
    for i, layer in enumerate(net.layers):
        if layer.activation.kind == "identity" or (layers_only is not None and i not in layers_only):
            layers.append(_clone(layer))
            continue
        words = encode_array([bounds[i]])
        if bounds[i] > 0 and words[0] <= 0:
            words[0] = 1  # below one word step: keep the smallest positive bound
        cfg = ActivationConfig("gbrelu", mode=mode, global_bound=float(decode_array(words)[0]))
        layers.append(_clone(layer, activation=cfg, bounds=words))
    return Network(layers, net.input_shape)


def set_bounds(net: Network, store: BoundStore) -> None:
    """Overwrite the bound words of a per-neuron network in place (re-quantizing)."""
    for i, lam in store.bounds.items():
        layer = net.layers[i]
        if not layer.activation.per_neuron or layer.bounds.shape != lam.shape:
            raise ValueError(f"layer {i} has no per-neuron bounds of shape {lam.shape}")
        layer.bounds[...] = encode_array(lam)


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class Trace:
    """Intermediate values of one batched forward pass."""

    inputs: list[np.ndarray]  # input to each layer
    pre: dict[int, np.ndarray]  # pre-activation of each parametric layer
    params: dict[int, tuple]  # decoded (weight, bias, broadcast bounds)
    output: np.ndarray


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.ndim == len(net.input_shape) + 1 and x.shape[1:] == net.input_shape:
        return x, False
    raise ShapeError("input does not match network input shape", x.shape, net.input_shape)


def _decode_layer(layer: Layer, out_shape):
    w = decode_array(layer.weight) if layer.weight is not None else None
    b = decode_array(layer.bias) if layer.bias is not None else None
    lam = None
    if layer.bounds is not None:
        lam = act.expand_bounds(decode_array(layer.bounds), layer.activation, out_shape)
    return w, b, lam


def _affine(layer: Layer, x, w, b):
    if layer.kind == "dense":
        return x @ w.T + b
    return conv2d(x, w, layer.stride, layer.padding) + b[:, None, None]


def apply_layer(layer: Layer, x: np.ndarray, out_shape=None) -> np.ndarray:
    """Apply one layer to a batch."""
    if layer.kind == "flatten":
        return x.reshape(len(x), -1)
    if layer.kind == "maxpool2d":
        return maxpool2d(x, layer.window, layer.stride)
    out_shape = out_shape if out_shape is not None else layer.output_shape(x.shape[1:])
    w, b, lam = _decode_layer(layer, out_shape)
    return act.apply(layer.activation, _affine(layer, x, w, b), lam, overwrite=True)


def forward(net: Network, x) -> np.ndarray:
    """Logits for one sample (shape ``input_shape``) or a batch."""
    batch, single = _as_batch(net, x)
    shapes = net.shapes
    h = batch
    for i, layer in enumerate(net.layers):
        h = apply_layer(layer, h, shapes[i + 1])
    return h[0] if single else h


def predict(net: Network, x) -> np.ndarray | int:
    logits = forward(net, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)  # first max wins ties


def forward_trace(net: Network, x, bounds: dict[int, np.ndarray] | None = None) -> Trace:
    """Batched forward pass that keeps what :func:`backward` needs.

    ``bounds`` optionally supplies real-valued bounds for some layers in place
    of their stored words (used for gradient checks finer than one word step).
    """
    batch, _ = _as_batch(net, x)
    shapes = net.shapes
    inputs, pre, params = [], {}, {}
    h = batch
    for i, layer in enumerate(net.layers):
        inputs.append(h)
        if layer.parametric:
            w, b, lam = _decode_layer(layer, shapes[i + 1])
            if bounds is not None and i in bounds:
                lam = act.expand_bounds(np.asarray(bounds[i], dtype=np.float64),
                                        layer.activation, shapes[i + 1])
            params[i] = (w, b, lam)
            z = _affine(layer, h, w, b)
            pre[i] = z
            h = act.apply(layer.activation, z, lam)
        else:
            h = apply_layer(layer, h)
    return Trace(inputs, pre, params, h)


def backward(net: Network, trace: Trace, grad_logits: np.ndarray,
             want=("weight", "bias", "bound")) -> dict[str, np.ndarray]:
    """Reverse-mode pass; returns real-valued gradients keyed by buffer id.

    Only buffers whose field name is in ``want`` are reported, and the pass
    stops early once no remaining layer can contribute to them.
    """
    want = set(want)
    grads = {}
    needed = [i for i, layer in enumerate(net.layers)
              if any(name in want for name, _ in layer.buffers())]
    if not needed:
        return grads
    first = min(needed)
    g = grad_logits
    for i in range(len(net.layers) - 1, first - 1, -1):
        layer = net.layers[i]
        x = trace.inputs[i]
        if layer.kind == "flatten":
            g = g.reshape(x.shape)
            continue
        if layer.kind == "maxpool2d":
            g = maxpool2d_backward(x, g, layer.window, layer.stride)
            continue
        w, _, lam = trace.params[i]
        g, g_lam = act.apply_vjp(layer.activation, trace.pre[i], g, lam)
        if "bound" in want and g_lam is not None:
            grads[buffer_id(i, "bound")] = g_lam.reshape(layer.bounds.shape)
        if layer.kind == "dense":
            if "weight" in want:
                grads[buffer_id(i, "weight")] = g.T @ x
            if "bias" in want:
                grads[buffer_id(i, "bias")] = g.sum(axis=0)
            if i > first:
                g = g @ w
        else:
            if "bias" in want:
                grads[buffer_id(i, "bias")] = g.sum(axis=(0, 2, 3))
            if i > first or "weight" in want:
                gx, gw = conv2d_backward(x, w, g, layer.stride, layer.padding)
                if "weight" in want:
                    grads[buffer_id(i, "weight")] = gw
                g = gx
    return grads


# ---------------------------------------------------------------------------
# fault space

def parameter_census(net: Network) -> list[tuple[str, int, int]]:
    """Every fault-injectable buffer as ``(buffer_id, element_count, bits_total)``."""
    return [(bid, int(buf.size), int(buf.size) * WORD_BITS) for bid, buf in net.buffers()]


def parameter_digest(net: Network, fields=("weight", "bias")) -> str:
    """SHA-256 over the raw words of the selected buffer kinds."""
    h = hashlib.sha256()
    for bid, buf in net.buffers():
        if parse_buffer_id(bid)[1] in fields:
            h.update(bid.encode())
            h.update(np.ascontiguousarray(buf).astype("<i4").tobytes())
    return h.hexdigest()
