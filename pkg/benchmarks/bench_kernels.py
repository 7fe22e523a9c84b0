"""Time the compiled kernel core against the numpy fallback.

Inference kernels promise bit-identical outputs across backends (same
accumulation order, same rounding); gradients agree to 1e-12. Each case is
checked against its contract before it is timed; a mismatch aborts the run.

Usage: python benchmarks/bench_kernels.py [--batch 64] [--repeat 5]
"""

import argparse
import sys
import time

import numpy as np

from rflab._kernels import compiled, fallback
from rflab.fxp import Q2_14, quantize_array


def timeit(fn, repeat, inner=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best * 1e3


def cases(batch):
    rng = np.random.default_rng(0)
    f32 = lambda *s: rng.standard_normal(s).astype(np.float32)

    # ModRec front conv: 2 -> 16 channels, 5x5 taps, 32x32 frames
    x = f32(batch, 2, 32, 32)
    w = f32(16, 2, 5, 5) * 0.2
    b = f32(16) * 0.1
    dy = f32(batch, 16, 32, 32)
    yield ("conv2d_fwd 16x5 same", "exact",
           lambda k: k.conv2d_fwd(x, w, b, 1, "same"))
    yield ("conv2d_bwd 16x5 same", "close",
           lambda k: k.conv2d_bwd(x, w, dy, 1, "same"))

    x2 = f32(batch, 16, 10, 10)
    w2 = f32(24, 16, 3, 3) * 0.1
    b2 = f32(24) * 0.1
    yield ("conv2d_fwd 24x3 deep", "exact",
           lambda k: k.conv2d_fwd(x2, w2, b2, 1, "same"))

    xq = quantize_array(np.clip(f32(batch, 2, 32, 32), -1, 1), Q2_14)
    wq = quantize_array(w * 0.5, Q2_14)
    bq = quantize_array(b * 0.5, Q2_14)
    yield ("conv2d_fwd_fxp 16x5", "exact", lambda k: _fxp_conv(k, xq, wq, bq))

    xd = quantize_array(np.clip(f32(batch, 1936), -1, 1), Q2_14)
    wd = quantize_array(f32(16, 1936) * 0.02, Q2_14)
    bd = quantize_array(f32(16) * 0.1, Q2_14)
    yield ("dense_fwd_fxp 1936->16", "exact",
           lambda k: _fxp_dense(k, xd, wd, bd))


def _fxp_conv(k, xq, wq, bq):
    if k is fallback:
        return k.conv2d_fwd_fxp(xq, wq, bq, 1, "same", Q2_14)
    return k.conv2d_fwd_fxp(xq, wq, bq, 1, "same",
                            Q2_14.total_bits, Q2_14.frac_bits)


def _fxp_dense(k, xd, wd, bd):
    if k is fallback:
        return k.dense_fwd_fxp(xd, wd, bd, Q2_14)
    return k.dense_fwd_fxp(xd, wd, bd, Q2_14.total_bits, Q2_14.frac_bits)


def agrees(a, b, contract):
    if isinstance(a, tuple):
        return all(agrees(x, y, contract) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if contract == "exact":
        return np.array_equal(a, b)
    # gradients: error scales with the accumulation magnitude, not per element
    return float(np.abs(a - b).max()) <= 1e-5 * (float(np.abs(b).max()) + 1.0)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if compiled is None:
        print("compiled core not importable; timing the fallback only")
    print("%-24s %12s %12s %9s" % ("kernel", "fallback ms", "compiled ms",
                                   "speedup"))
    for name, contract, call in cases(args.batch):
        ref = call(fallback)
        t_fb = timeit(lambda: call(fallback), args.repeat)
        if compiled is None:
            print("%-24s %12.3f %12s %9s" % (name, t_fb, "-", "-"))
            continue
        got = call(compiled)
        if not agrees(ref, got, contract):
            print("MISMATCH in %s: backends disagree, aborting" % name)
            return 1
        t_c = timeit(lambda: call(compiled), args.repeat)
        print("%-24s %12.3f %12.3f %8.1fx" % (name, t_fb, t_c, t_fb / t_c))
    return 0


if __name__ == "__main__":
    sys.exit(main())
