"""Binary model file: bit-exact storage of every parameter word.

Layout (all integers little-endian)::

    magic        4s   b"FTAC"
    version      u16  FORMAT_VERSION
    reserved     u16  0
    ndim         u32
    input dims   ndim x u32
    n_layers     u32
    layer table  n_layers x LAYER_RECORD (80 bytes each)
    blocks       per layer, in order: weight words, bias words, bound words,
                 each a run of int32 words in C order

A layer record is::

    kind, activation kind, gbrelu mode, granularity, presence flags   5 x u8 (+3 pad)
    stride, padding, window                                          3 x u32
    slope k, global bound (NaN when unset)                           2 x f64
    weight ndim (+3 pad), weight dims                                u8, 4 x u32
    bias length                                                      u32
    bound ndim (+3 pad), bound dims                                  u8, 4 x u32

Word offsets of a buffer inside the file are therefore fixed by the layer
table, so a logged (buffer, element) pair maps to one file offset.
"""
from __future__ import annotations

import io
import math
import os
import struct

import numpy as np

from .activations import GBRELU_MODES, GRANULARITIES, KINDS, ActivationConfig
from .network import LAYER_KINDS, Layer, Network

MAGIC = b"FTAC"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHI")
U32 = struct.Struct("<I")
LAYER_RECORD = struct.Struct("<5B3x3I2dB3x4IIB3x4I")

_HAS_WEIGHT, _HAS_BIAS, _HAS_BOUNDS = 1, 2, 4


class ModelFileError(Exception):
    """Base class for malformed model files."""


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedBlockError(ModelFileError):
    def __init__(self, where: str, layer: int | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(f"truncated block: {prefix}{where}")


def _dims(shape):
    if len(shape) > 4:
        raise ValueError(f"buffers of rank {len(shape)} are not storable")
    return (len(shape), *shape, *([0] * (4 - len(shape))))


def _pack_layer(layer: Layer) -> bytes:
    a = layer.activation
    flags = ((_HAS_WEIGHT if layer.weight is not None else 0)
             | (_HAS_BIAS if layer.bias is not None else 0)
             | (_HAS_BOUNDS if layer.bounds is not None else 0))
    gb = math.nan if a.global_bound is None else a.global_bound
    return LAYER_RECORD.pack(
        LAYER_KINDS.index(layer.kind), KINDS.index(a.kind), GBRELU_MODES.index(a.mode),
        GRANULARITIES.index(a.granularity), flags,
        layer.stride, layer.padding, layer.window, a.slope, gb,
        *_dims(layer.weight.shape if layer.weight is not None else ()),
        layer.bias.size if layer.bias is not None else 0,
        *_dims(layer.bounds.shape if layer.bounds is not None else ()),
    )


def to_bytes(net: Network) -> bytes:
    out = io.BytesIO()
    out.write(HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(net.input_shape)))
    out.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    out.write(U32.pack(len(net.layers)))
    for layer in net.layers:
        out.write(_pack_layer(layer))
    for layer in net.layers:
        for _, buf in layer.buffers():
            out.write(np.ascontiguousarray(buf).astype("<i4").tobytes())
    return out.getvalue()


def save(net: Network, path) -> int:
    """Write ``net`` to ``path``; returns the number of bytes written."""
    data = to_bytes(net)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, where: str, layer=None) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedBlockError(where, layer)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    magic, version, _, ndim = HEADER.unpack(r.take(HEADER.size, "header"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {FORMAT_VERSION}")
    input_shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "input shape"))
    (n_layers,) = U32.unpack(r.take(U32.size, "layer count"))
    records = [LAYER_RECORD.unpack(r.take(LAYER_RECORD.size, "layer table", i)) for i in range(n_layers)]

    layers = []
    for i, rec in enumerate(records):
        kind, akind, mode, gran, flags, stride, padding, window, slope, gb = rec[:10]
        w_shape = tuple(rec[11:11 + rec[10]])
        bias_len = rec[15]
        l_shape = tuple(rec[17:17 + rec[16]])
        try:
            cfg = ActivationConfig(KINDS[akind], GBRELU_MODES[mode],
                                   None if math.isnan(gb) else gb, slope, GRANULARITIES[gran])
            kind = LAYER_KINDS[kind]
        except (IndexError, ValueError) as e:
            raise ModelFileError(f"layer {i}: invalid layer record ({e})") from None

        def block(shape, name):
            n = int(np.prod(shape))
            raw = r.take(4 * n, f"{name} block", i)
            return np.frombuffer(raw, dtype="<i4").astype(np.int32).reshape(shape)

        weight = block(w_shape, "weight") if flags & _HAS_WEIGHT else None
        bias = block((bias_len,), "bias") if flags & _HAS_BIAS else None
        bounds = block(l_shape, "bound") if flags & _HAS_BOUNDS else None
        try:
            layers.append(Layer(kind, weight, bias, cfg, bounds, stride, padding, window))
        except (ValueError, TypeError) as e:
            raise ModelFileError(f"layer {i}: {e}") from None
    if r.pos != len(data):
        raise ModelFileError(f"{len(data) - r.pos} trailing bytes after last block")
    try:
        return Network(layers, input_shape)
    except ValueError as e:
        raise ModelFileError(f"inconsistent layer table: {e}") from None


def load(path) -> Network:
    with open(os.fspath(path), "rb") as f:
        return from_bytes(f.read())


def block_offsets(net: Network) -> dict[str, int]:
    """Byte offset of every parameter buffer within the saved file."""
    pos = HEADER.size + 4 * len(net.input_shape) + U32.size + LAYER_RECORD.size * len(net.layers)
    offsets = {}
    for bid, buf in net.buffers():
        offsets[bid] = pos
        pos += 4 * buf.size
    return offsets
