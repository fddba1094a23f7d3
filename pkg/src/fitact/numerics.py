"""Q15.16 fixed-point storage, bit-level fault primitives and tensor kernels.

Parameters live in memory as 32-bit two's-complement words with 16 fractional
bits. Layer math runs in float64 on decoded values; the words are what faults
act on.

Tensors are plain row-major (C-order) ``numpy.ndarray`` objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FRAC_BITS = 16
WORD_BITS = 32
SCALE = float(1 << FRAC_BITS)
RAW_MIN = -(1 << 31)
RAW_MAX = (1 << 31) - 1
VALUE_MIN = RAW_MIN / SCALE
VALUE_MAX = RAW_MAX / SCALE
RESOLUTION = 1.0 / SCALE


class InvalidNumericError(ValueError):
    """A NaN or infinity reached the fixed-point encoder."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{message}: {detail}" if detail else message)


@dataclass(frozen=True)
class FixedPoint32:
    """A single Q15.16 word; ``raw_bits`` is the unsigned 32-bit pattern."""

    raw_bits: int

    def __post_init__(self):
        if not 0 <= self.raw_bits <= 0xFFFFFFFF:
            raise ValueError(f"raw_bits {self.raw_bits:#x} is not a 32-bit pattern")

    @property
    def signed(self) -> int:
        r = self.raw_bits
        return r - (1 << 32) if r & 0x80000000 else r

    @property
    def value(self) -> float:
        return self.signed / SCALE

    def __repr__(self):
        return f"FixedPoint32(0x{self.raw_bits:08X} = {self.value!r})"


@dataclass(frozen=True)
class BitFlipEvent:
    """One flipped bit: buffer id, flat element index, bit position (0 = LSB)."""

    target_id: str
    element_index: int
    bit_position: int

    def __post_init__(self):
        if not 0 <= self.bit_position < WORD_BITS:
            raise ValueError(f"bit_position {self.bit_position} outside 0..31")
        if self.element_index < 0:
            raise ValueError(f"negative element_index {self.element_index}")


# ---------------------------------------------------------------------------
# scalar codec

def encode_fixed(v: float) -> FixedPoint32:
    v = float(v)
    if not np.isfinite(v):
        raise InvalidNumericError(f"cannot encode non-finite value {v!r}")
    raw = int(encode_array(np.array([v]))[0])
    return FixedPoint32(raw & 0xFFFFFFFF)


def decode_fixed(f: FixedPoint32) -> float:
    return f.value


def flip_bit(f: FixedPoint32, bit_position: int) -> FixedPoint32:
    if not 0 <= bit_position < WORD_BITS:
        raise ValueError(f"bit_position {bit_position} outside 0..31")
    return FixedPoint32(f.raw_bits ^ (1 << bit_position))


# ---------------------------------------------------------------------------
# array codec

def encode_array(values) -> np.ndarray:
    """Round to nearest Q15.16 word (ties to even), saturating at the range ends.

    Returns an ``int32`` array with the same shape as ``values``.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidNumericError("cannot encode non-finite values")
    scaled = np.rint(v * SCALE)
    np.clip(scaled, RAW_MIN, RAW_MAX, out=scaled)
    return scaled.astype(np.int32)


def decode_array(words: np.ndarray) -> np.ndarray:
    return np.asarray(words, dtype=np.int32).astype(np.float64) / SCALE


def quantize(values) -> np.ndarray:
    """Snap real values onto the Q15.16 grid (encode then decode)."""
    return decode_array(encode_array(values))


def flip_bits_inplace(words: np.ndarray, element_index, bit_position) -> None:
    """XOR-flip bits of an ``int32`` word buffer in place.

    ``element_index`` and ``bit_position`` may be scalars or equal-length arrays;
    repeated (element, bit) pairs flip repeatedly.
    """
    if words.dtype != np.int32:
        raise TypeError(f"word buffers are int32, got {words.dtype}")
    flat = words.reshape(-1).view(np.uint32)
    idx = np.atleast_1d(np.asarray(element_index, dtype=np.int64))
    bits = np.atleast_1d(np.asarray(bit_position, dtype=np.uint32))
    if np.any(bits >= WORD_BITS):
        raise ValueError("bit_position outside 0..31")
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise IndexError(f"element index outside buffer of {flat.size} words")
    np.bitwise_xor.at(flat, idx, np.left_shift(np.uint32(1), bits))


# ---------------------------------------------------------------------------
# tensor kernels

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul shape mismatch", a.shape, b.shape)
    return a @ b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add shape mismatch", a.shape, b.shape) from None
    return a + b


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with OIHW kernels (no bias)."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError("conv2d expects NCHW input and OIHW kernels", x.shape, kernels.shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    _, _, h, w = x.shape
    kh, kw = kernels.shape[2:]
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d kernel larger than padded input", x.shape, kernels.shape)
    win = _conv_windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x, kernels, grad_out, stride=1, padding=0):
    """Vector-Jacobian products of :func:`conv2d` w.r.t. input and kernels."""
    x = np.asarray(x, dtype=np.float64)
    kh, kw = kernels.shape[2:]
    win = _conv_windows(x, kh, kw, stride, padding)
    grad_k = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    cols = np.tensordot(grad_out, kernels, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    b, c, h, w = x.shape
    ho, wo = grad_out.shape[2:]
    gpad = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[..., i, j].transpose(0, 3, 1, 2))
    if padding:
        gpad = gpad[:, :, padding:-padding, padding:-padding]
    return gpad, grad_k


def maxpool2d(x: np.ndarray, window: int, stride: int | None = None) -> np.ndarray:
    return _maxpool(x, window, stride)[0]


def _maxpool(x, window, stride):
    x = np.asarray(x, dtype=np.float64)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError("maxpool2d expects NCHW input", x.shape)
    if window < 1 or stride < 1 or window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"maxpool2d window {window} does not fit input", x.shape)
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)  # first max wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(x, grad_out, window, stride=None):
    stride = window if stride is None else stride
    _, arg = _maxpool(x, window, stride)
    ho, wo = grad_out.shape[2:]
    grad = np.zeros(x.shape)
    for i in range(window):
        for j in range(window):
            hit = arg == i * window + j
            if hit.any():
                grad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += grad_out * hit
    return grad
