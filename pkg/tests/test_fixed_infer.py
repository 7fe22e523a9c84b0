"""Whole-model fixed-point inference against a plain-integer oracle.

The oracle below re-derives every layer with python ints and Fractions, so
any deviation in accumulation order, rounding, or saturation in the real
engine shows up as a hard mismatch.
"""

import subprocess
import sys
import textwrap
from fractions import Fraction

import numpy as np
import pytest

from rflab import model_io, nn, trainer
from rflab._kernels import backend_name
from rflab.arch import build_from_string
from rflab.fxp import Q2_14, quantize_array

LABELS = ("a", "b", "c")


def rne(fr):
    """Round a Fraction half to even."""
    return int(round(fr))


def requantize(acc, fmt):
    v = rne(Fraction(int(acc), 1 << fmt.frac_bits))
    return max(fmt.raw_min, min(fmt.raw_max, v))


def oracle_conv_fxp(x, W, b, stride, padding, fmt):
    c_in, n, m = len(x), len(x[0]), len(x[0][0])
    F, h, w = len(W), len(W[0][0]), len(W[0][0][0])
    if padding == "same":
        dr, dc = (h - 1) // 2, (w - 1) // 2
        on, om = 1 + (n - 1) // stride, 1 + (m - 1) // stride
    else:
        dr, dc = 0, 0
        on, om = 1 + (n + h - 2) // stride, 1 + (m + w - 2) // stride
    out = [[[0] * om for _ in range(on)] for _ in range(F)]
    for f in range(F):
        for i in range(on):
            for j in range(om):
                acc = 0
                for c in range(c_in):
                    for k in range(h):
                        for l in range(w):
                            r, s = stride * i - k + dr, stride * j - l + dc
                            if 0 <= r < n and 0 <= s < m:
                                acc += x[c][r][s] * W[f][c][h - 1 - k][w - 1 - l]
                acc += b[f] << fmt.frac_bits
                out[f][i][j] = requantize(acc, fmt)
    return out


def oracle_pool_fxp(x, p, mode, fmt):
    c, n, m = len(x), len(x[0]), len(x[0][0])
    on, om = -(-n // p), -(-m // p)
    out = [[[0] * om for _ in range(on)] for _ in range(c)]
    for ch in range(c):
        for i in range(on):
            for j in range(om):
                vals = [x[ch][i * p + a][j * p + b_] if i * p + a < n and j * p + b_ < m else 0
                        for a in range(p) for b_ in range(p)]
                if mode == "max":
                    out[ch][i][j] = max(vals)
                else:
                    v = rne(Fraction(sum(vals), p * p))
                    out[ch][i][j] = max(fmt.raw_min, min(fmt.raw_max, v))
    return out


def oracle_forward(model, weights, frame):
    fmt = weights.fmt
    x = [[[int(v) for v in row] for row in plane] for plane in frame]
    flat = None
    for idx, layer in enumerate(model.layers):
        if layer.kind == "conv":
            p = weights.params[idx]
            x = oracle_conv_fxp(x, p["W"].tolist(), p["b"].tolist(),
                                layer.stride, layer.padding, fmt)
        elif layer.kind == "relu":
            if flat is None:
                x = [[[max(v, 0) for v in row] for row in plane] for plane in x]
            else:
                flat = [max(v, 0) for v in flat]
        elif layer.kind == "pool":
            x = oracle_pool_fxp(x, layer.p, layer.mode, fmt)
        elif layer.kind == "flatten":
            flat = [v for plane in x for row in plane for v in row]
        elif layer.kind == "dense":
            p = weights.params[idx]
            W, b = p["W"].tolist(), p["b"].tolist()
            flat = [requantize(sum(int(wv) * int(xv) for wv, xv in zip(Wrow, flat))
                               + (int(bv) << fmt.frac_bits), fmt)
                    for Wrow, bv in zip(W, b)]
    return flat


def quantized_setup(arch, side, seed):
    model = build_from_string(arch, side, LABELS)
    w = trainer.init_weights(model, seed=seed)
    wq, _ = trainer.quantize_weights(w, Q2_14)
    rng = np.random.default_rng(seed + 100)
    frames = rng.uniform(-1, 1, size=(4, 2, side, side)).astype(np.float32)
    return model, wq, quantize_array(frames, Q2_14)


class TestOracle:
    @pytest.mark.parametrize("arch,side", [
        ("conv2x3-pool2-out", 6),
        ("conv2x3-pool2avg-out", 6),
        ("conv3x3s2-fc4-out", 7),
        ("conv2x5-pool3avg-fc3-out", 9),
    ])
    def test_model_matches_integer_oracle(self, arch, side):
        model, wq, xq = quantized_setup(arch, side, seed=7)
        got = nn.forward_fixed_batch(model, wq, xq)
        want = np.array([oracle_forward(model, wq, f) for f in xq], np.int32)
        np.testing.assert_array_equal(got, want)
        assert got.dtype == np.int32

    def test_zero_frames(self):
        model, wq, xq = quantized_setup("conv2x3-pool2-out", 6, seed=9)
        zeros = np.zeros_like(xq)
        got = nn.forward_fixed_batch(model, wq, zeros)
        want = np.array([oracle_forward(model, wq, f) for f in zeros], np.int32)
        np.testing.assert_array_equal(got, want)
        # every frame identical, so every score row must be too
        assert (got == got[0]).all()


class TestSaturation:
    def test_hot_path_saturates_instead_of_wrapping(self):
        model = build_from_string("conv1x1-out", 2, LABELS)
        conv_idx = [l.kind for l in model.layers].index("conv")
        head_idx = [i for i, l in enumerate(model.layers) if l.kind == "dense"][0]
        headW = np.zeros((3, 4), np.int32)
        headW[0, 0] = 1 << 14  # 1.0
        wq = nn.WeightSet({
            conv_idx: {"W": np.full((1, 2, 1, 1), 32767, np.int32),
                       "b": np.zeros(1, np.int32)},
            head_idx: {"W": headW, "b": np.zeros(3, np.int32)},
        }, Q2_14)
        frames = np.full((2, 2, 2, 2), 2.0, np.float32)
        xq = quantize_array(frames, Q2_14)
        assert xq.max() == 32767  # input itself saturates at the format edge
        scores = nn.forward_fixed_batch(model, wq, xq)
        # conv accumulates ~2*2*2 = 8.0, far past the +-2 range: must pin at
        # raw_max, and the pass-through head then reads exactly that word
        np.testing.assert_array_equal(scores, [[32767, 0, 0]] * 2)


class TestDeterminism:
    def test_same_process_repeat(self):
        model, wq, xq = quantized_setup("conv2x3-pool2-fc3-out", 8, seed=3)
        a = nn.forward_fixed_batch(model, wq, xq)
        b = nn.forward_fixed_batch(model, wq, xq)
        np.testing.assert_array_equal(a, b)

    def test_single_frame_matches_batch(self):
        model, wq, xq = quantized_setup("conv2x3-pool2-fc3-out", 8, seed=4)
        scores, labels = nn.infer_fixed_batch(model, wq, xq)
        for i in range(len(xq)):
            s, lab = nn.infer_fixed(model, wq, xq[i])
            np.testing.assert_array_equal(s, scores[i])
            assert lab == int(labels[i])
            assert isinstance(lab, int)

    def test_pure_backend_subprocess_agrees(self, tmp_path):
        model, wq, xq = quantized_setup("conv2x5-pool2-fc4-out", 10, seed=5)
        here = nn.forward_fixed_batch(model, wq, xq)
        model_io.save_model(tmp_path / "net", model, wq)
        np.save(tmp_path / "frames.npy", xq)
        script = textwrap.dedent("""
            import sys
            import numpy as np
            from rflab import model_io, nn
            from rflab._kernels import backend_name
            model, wq, _ = model_io.load_model(sys.argv[1])
            xq = np.load(sys.argv[2])
            scores = nn.forward_fixed_batch(model, wq, xq)
            print(backend_name())
            print(scores.astype("<i4").tobytes().hex())
        """)
        out = subprocess.run(
            [sys.executable, "-c", script, str(tmp_path / "net"),
             str(tmp_path / "frames.npy")],
            capture_output=True, text=True, env={"RFLAB_PURE": "1", "PATH": "/usr/bin:/bin"},
            check=True).stdout.split()
        assert out[0] == "fallback"
        assert out[1] == here.astype("<i4").tobytes().hex()


class TestGuards:
    def test_float_weights_rejected(self):
        model = build_from_string("conv2x3-pool2-out", 6, LABELS)
        w = trainer.init_weights(model)
        xq = np.zeros((1, 2, 6, 6), np.int32)
        with pytest.raises(ValueError, match="quantize"):
            nn.forward_fixed_batch(model, w, xq)
