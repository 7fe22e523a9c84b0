"""Convolution checked against a literal quadruple-loop transcription.

The oracle below evaluates the flipped-index sum one scalar at a time in
Python floats: for each output pixel, accumulate filter-tap products over
(channel, tap-row, tap-col) and add the bias last. Out-of-range input reads
are zero. conv2d_fwd must be bit-identical to this on small random instances
in float64, whichever backend is active.
"""

import time

import numpy as np
import pytest

from rflab import _kernels as K
from rflab._kernels import fallback


def oracle_conv(x, q, b, stride, padding):
    """Literal per-pixel evaluation. x: (c, n, m); q: (F, c, h, w); b: (F,).

    Output row i (0-based) reads input row stride*i - k (+ centering offset
    (h-1)//2 for "same"), tap weight q[f, c, h-1-k, w-1-l].
    """
    c, n, m = x.shape
    F, _, h, w = q.shape
    if padding == "full":
        n2, m2 = 1 + (n + h - 2) // stride, 1 + (m + w - 2) // stride
        dr, dc = 0, 0
    else:
        n2, m2 = 1 + (n - 1) // stride, 1 + (m - 1) // stride
        dr, dc = (h - 1) // 2, (w - 1) // 2

    def read(ch, i, j):
        if 0 <= i < n and 0 <= j < m:
            return float(x[ch, i, j])
        return 0.0

    out = np.empty((F, n2, m2), dtype=np.float64)
    for f in range(F):
        for i in range(n2):
            for j in range(m2):
                acc = 0.0
                for ch in range(c):
                    for k in range(h):
                        for l in range(w):
                            acc += float(q[f, ch, h - 1 - k, w - 1 - l]) * \
                                read(ch, stride * i - k + dr, stride * j - l + dc)
                out[f, i, j] = acc + float(b[f])
    return out


def random_instance(rng):
    c = int(rng.integers(1, 4))
    F = int(rng.integers(1, 4))
    n = int(rng.integers(1, 9))
    m = int(rng.integers(1, 9))
    h = int(rng.integers(1, 5))
    w = int(rng.integers(1, 5))
    s = int(rng.integers(1, 3))
    x = rng.standard_normal((c, n, m))
    q = rng.standard_normal((F, c, h, w))
    b = rng.standard_normal(F)
    return x, q, b, s


def test_thousand_random_instances_bit_identical():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    counts = {"same": 0, "full": 0}
    for trial in range(1000):
        x, q, b, s = random_instance(rng)
        padding = ("same", "full")[trial % 2]
        counts[padding] += 1
        want = oracle_conv(x, q, b, s, padding)
        got = K.conv2d_fwd(x[None], q, b, s, padding)[0]
        assert got.dtype == np.float64
        assert got.shape == want.shape, (x.shape, q.shape, s, padding)
        assert np.array_equal(got, want), (x.shape, q.shape, s, padding)
    assert counts["same"] == counts["full"] == 500
    assert time.time() - t0 < 10.0


def test_both_backends_match_oracle():
    rng = np.random.default_rng(7)
    for trial in range(50):
        x, q, b, s = random_instance(rng)
        padding = ("same", "full")[trial % 2]
        want = oracle_conv(x, q, b, s, padding)
        assert np.array_equal(fallback.conv2d_fwd(x[None], q, b, s, padding)[0], want)
        assert np.array_equal(K.conv2d_fwd(x[None], q, b, s, padding)[0], want)


def test_pure_shift_example():
    # 2x2 input, 2x2 filter hot at its (0, 0) corner, full padding: the output
    # is the input shifted one down-right into a 3x3 grid.
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    q = np.zeros((1, 1, 2, 2))
    q[0, 0, 0, 0] = 1.0
    b = np.zeros(1)
    want = np.array([[0, 0, 0], [0, 1, 2], [0, 3, 4]], dtype=np.float64)
    np.testing.assert_array_equal(oracle_conv(x, q, b, 1, "full")[0], want)
    np.testing.assert_array_equal(K.conv2d_fwd(x[None], q, b, 1, "full")[0, 0], want)


def test_zero_input_any_filter():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((2, 1, 3, 3))
    out = K.conv2d_fwd(np.zeros((1, 1, 5, 5)), q, np.zeros(2), 1, "full")
    np.testing.assert_array_equal(out, 0.0)


def test_identity_1x1_same():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    q = np.ones((2, 2, 1, 1)) * np.eye(2)[:, :, None, None]
    out = K.conv2d_fwd(x, q, np.zeros(2), 1, "same")
    np.testing.assert_array_equal(out, x)


def test_same_output_dims_match_input_at_stride_1():
    rng = np.random.default_rng(5)
    for h, w in [(1, 1), (2, 2), (3, 3), (4, 2), (3, 4)]:
        x = rng.standard_normal((1, 1, 7, 6))
        q = rng.standard_normal((1, 1, h, w))
        out = K.conv2d_fwd(x, q, np.zeros(1), 1, "same")
        assert out.shape == (1, 1, 7, 6)


def test_batch_matches_per_sample():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 2, 5, 5))
    q = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    batched = K.conv2d_fwd(x, q, b, 2, "same")
    for i in range(3):
        single = K.conv2d_fwd(x[i:i + 1], q, b, 2, "same")
        assert np.array_equal(batched[i], single[0])


def test_unknown_padding_rejected():
    with pytest.raises(ValueError):
        K.conv2d_fwd(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)),
                     np.zeros(1), 1, "valid")
