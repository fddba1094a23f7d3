from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fitact.numerics import (
    FixedPoint32, InvalidNumericError, ShapeError, add, conv2d, conv2d_backward,
    decode_array, decode_fixed, encode_array, encode_fixed, flip_bit, flip_bits_inplace,
    matmul, maxpool2d, maxpool2d_backward,
)


def exact_encode(v: float) -> int:
    """Oracle: nearest Q15.16 word via exact rational arithmetic, saturating."""
    q = Fraction(v) * 65536
    lo = q.numerator // q.denominator
    rem = q - lo
    raw = lo + 1 if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and lo % 2) else lo
    raw = max(-(1 << 31), min((1 << 31) - 1, raw))
    return raw & 0xFFFFFFFF


def twos_complement(raw: int) -> float:
    return (raw - (1 << 32) if raw >= 1 << 31 else raw) / 65536


class TestCodec:
    def test_zero_and_one(self):
        assert encode_fixed(0.0).raw_bits == 0x00000000
        assert encode_fixed(1.0).raw_bits == 0x00010000

    def test_saturation_matches_rational_oracle(self):
        assert exact_encode(100000.0) == 0x7FFFFFFF
        assert encode_fixed(100000.0).raw_bits == 0x7FFFFFFF
        assert encode_fixed(-1e9).raw_bits == exact_encode(-1e9) == 0x80000000

    @given(st.floats(min_value=-40000, max_value=40000, allow_nan=False))
    def test_encode_matches_rational_oracle(self, v):
        assert encode_fixed(v).raw_bits == exact_encode(v)

    def test_decode_examples(self):
        assert decode_fixed(FixedPoint32(0x00010000)) == 1.0
        assert decode_fixed(FixedPoint32(0xFFFF0000)) == -1.0
        assert decode_fixed(FixedPoint32(0x00008000)) == 0.5

    def test_decode_exhaustive_16bit_subrange(self):
        # every pattern whose upper half is 0xFFFF or 0x0000
        lows = np.arange(1 << 16, dtype=np.int64)
        for high in (0x0000, 0xFFFF):
            raws = (high << 16) | lows
            got = decode_array(raws.astype(np.uint32).view(np.int32))
            want = np.array([twos_complement(int(r)) for r in raws])
            assert np.array_equal(got, want)

    @given(st.floats(min_value=-32768, max_value=32768 - 2**-16, allow_nan=False))
    def test_round_trip_error_below_resolution(self, v):
        assert abs(decode_fixed(encode_fixed(v)) - v) < 2**-16

    def test_bijection_on_random_patterns(self):
        rng = np.random.default_rng(0)
        words = rng.integers(0, 1 << 32, size=10**6, dtype=np.uint64).astype(np.uint32).view(np.int32)
        assert np.array_equal(encode_array(decode_array(words)), words)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(InvalidNumericError):
            encode_fixed(bad)
        with pytest.raises(InvalidNumericError):
            encode_array([1.0, bad])


class TestFlip:
    def test_examples(self):
        f = flip_bit(FixedPoint32(0), 31)
        assert f.raw_bits == 0x80000000 and f.value == -32768.0
        assert flip_bit(FixedPoint32(0x00010000), 16).raw_bits == 0

    @given(st.integers(0, 0xFFFFFFFF), st.integers(0, 31))
    def test_involution_and_single_bit(self, raw, bit):
        f = FixedPoint32(raw)
        g = flip_bit(f, bit)
        assert flip_bit(g, bit) == f
        assert bin(f.raw_bits ^ g.raw_bits).count("1") == 1
        assert f.raw_bits ^ g.raw_bits == 1 << bit  # XOR oracle

    @pytest.mark.parametrize("bit", [-1, 32])
    def test_bad_position(self, bit):
        with pytest.raises(ValueError):
            flip_bit(FixedPoint32(0), bit)

    def test_array_flip_agrees_with_scalar(self):
        rng = np.random.default_rng(1)
        words = rng.integers(-(1 << 31), 1 << 31, size=50).astype(np.int32)
        idx = rng.integers(0, 50, size=20)
        bits = rng.integers(0, 32, size=20)
        got = words.copy()
        flip_bits_inplace(got, idx, bits)
        want = [FixedPoint32(int(w) & 0xFFFFFFFF) for w in words]
        for i, b in zip(idx, bits):
            want[i] = flip_bit(want[i], int(b))
        assert [int(w) & 0xFFFFFFFF for w in got] == [w.raw_bits for w in want]

    def test_array_flip_bounds_checked(self):
        with pytest.raises(IndexError):
            flip_bits_inplace(np.zeros(4, np.int32), [4], [0])


# -- naive oracles -----------------------------------------------------------

def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x, w, stride, pad):
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[n, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                    out[n, f, i, j] = s
    return out


def naive_pool(x, k, stride):
    b, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((b, c, ho, wo))
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[n, ch, i, j] = x[n, ch, i * stride:i * stride + k, j * stride:j * stride + k].max()
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestKernels:
    def test_identity_and_zero(self):
        x = np.array([[1.5], [-2.0], [3.25]])
        assert np.array_equal(matmul(np.eye(3), x), x)
        assert np.array_equal(add(x, np.zeros_like(x)), x)

    def test_conv_ones(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31))
    def test_matmul_matches_triple_loop(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
        assert rel_err(matmul(a, b), naive_matmul(a, b)) < 1e-10

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.sampled_from([1, 3]),
           st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31))
    def test_conv_matches_direct_summation(self, c, o, size, k, stride, pad, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, c, size, size + 1))
        w = rng.standard_normal((o, c, k, k))
        got = conv2d(x, w, stride, pad)
        want = naive_conv(x, w, stride, pad)
        assert got.shape == want.shape
        assert got.shape[2] == (size + 2 * pad - k) // stride + 1
        assert rel_err(got, want) < 1e-10

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 3), (3, 1), (6, 6)])
    def test_maxpool_matches_direct(self, k, stride):
        x = np.random.default_rng(k).standard_normal((2, 3, 12, 12))
        assert np.array_equal(maxpool2d(x, k, stride), naive_pool(x, k, stride))

    def test_conv_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        r = rng.standard_normal(conv2d(x, w, 2, 1).shape)
        gx, gw = conv2d_backward(x, w, r, 2, 1)
        h = 1e-6
        for arr, grad in ((x, gx), (w, gw)):
            for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(10)]:
                old = arr[idx]
                arr[idx] = old + h
                fp = np.sum(conv2d(x, w, 2, 1) * r)
                arr[idx] = old - h
                fm = np.sum(conv2d(x, w, 2, 1) * r)
                arr[idx] = old
                assert abs((fp - fm) / (2 * h) - grad[idx]) < 1e-6 * max(1, abs(grad[idx]))

    def test_maxpool_backward_routes_to_argmax(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        g = maxpool2d_backward(x, np.ones((1, 1, 2, 2)), 2)
        assert g.sum() == 4 and g[0, 0, 1, 1] == g[0, 0, 3, 3] == 1

    def test_shape_errors_carry_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        assert e.value.shapes == ((2, 3), (2, 3))
        with pytest.raises(ShapeError):
            conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            add(np.ones(3), np.ones(4))
