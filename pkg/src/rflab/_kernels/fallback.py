"""Pure-numpy kernels, the reference backend.

Float accumulation order is part of the kernel contract: for each output
element the products are added in (channel, tap-row, tap-col) sequence with
the bias added last, so results are bit-identical to a literal scalar loop
in that order (and to the compiled backend, which uses the same order).
Fixed-point kernels are exact integer arithmetic and therefore identical
across backends and platforms by construction.
"""

from __future__ import annotations

import numpy as np

from ..fxp import FxpFormat, rne_shift_array, saturate_array
from .geometry import conv_offsets, conv_out_dims


def _pad_spatial(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, pad)


def acc_bits_needed(total_bits: int, n_terms: int) -> int:
    """Worst-case accumulator width for n_terms products plus the bias."""
    return 2 * (total_bits - 1) + int(np.ceil(np.log2(n_terms + 2))) + 1


def check_acc_width(total_bits: int, n_terms: int) -> None:
    if acc_bits_needed(total_bits, n_terms) > 63:
        raise ValueError(
            f"{total_bits}-bit words with {n_terms}-term dot products exceed the "
            "64-bit accumulator; use a narrower format"
        )


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b, stride: int, padding: str) -> np.ndarray:
    """Batched float convolution. x: (B,c,n,m); w: (F,c,h,w); b: (F,) or None."""
    B, c, n, m = x.shape
    F, cw, h, ww = w.shape
    assert c == cw
    n2, m2 = conv_out_dims(n, m, h, ww, stride, padding)
    off_r, off_c = conv_offsets(h, ww, padding)
    xp = _pad_spatial(x, h - 1, ww - 1)
    out = np.zeros((B, F, n2, m2), dtype=x.dtype)
    for ch in range(c):
        for k in range(h):
            r0 = off_r - k
            rows = slice(r0, r0 + stride * (n2 - 1) + 1, stride)
            for l in range(ww):
                c0 = off_c - l
                cols = slice(c0, c0 + stride * (m2 - 1) + 1, stride)
                patch = xp[:, ch, rows, cols]
                out += w[:, ch, h - 1 - k, ww - 1 - l][None, :, None, None] * patch[:, None, :, :]
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_bwd(x: np.ndarray, w: np.ndarray, dy: np.ndarray, stride: int, padding: str):
    """Gradients (dx, dw, db) of conv2d_fwd wrt input, filters, bias."""
    B, c, n, m = x.shape
    F, _, h, ww = w.shape
    n2, m2 = dy.shape[2], dy.shape[3]
    off_r, off_c = conv_offsets(h, ww, padding)
    xp = _pad_spatial(x, h - 1, ww - 1)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for k in range(h):
        r0 = off_r - k
        rows = slice(r0, r0 + stride * (n2 - 1) + 1, stride)
        for l in range(ww):
            c0 = off_c - l
            cols = slice(c0, c0 + stride * (m2 - 1) + 1, stride)
            # (B,F,n2,m2) x (F,c) -> (B,c,n2,m2)
            dxp[:, :, rows, cols] += np.einsum(
                "bfij,fc->bcij", dy, w[:, :, h - 1 - k, ww - 1 - l], optimize=True
            )
            for ch in range(c):
                patch = xp[:, ch, rows, cols]
                dw[:, ch, h - 1 - k, ww - 1 - l] += np.tensordot(
                    dy, patch, axes=([0, 2, 3], [0, 1, 2])
                )
    dx = dxp[:, :, h - 1 : h - 1 + n, ww - 1 : ww - 1 + m] if (h > 1 or ww > 1) else dxp
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def conv2d_fwd_fxp(
    xq: np.ndarray,
    wq: np.ndarray,
    bq: np.ndarray,
    stride: int,
    padding: str,
    fmt: FxpFormat,
) -> np.ndarray:
    """Fixed-point convolution: int64 accumulate, one round-to-even requantize.

    All raws share ``fmt``; the product scale 2^-2f is brought back to 2^-f by
    a single rounding shift, then saturated.
    """
    B, c, n, m = xq.shape
    F, _, h, ww = wq.shape
    check_acc_width(fmt.total_bits, c * h * ww)
    n2, m2 = conv_out_dims(n, m, h, ww, stride, padding)
    off_r, off_c = conv_offsets(h, ww, padding)
    xp = _pad_spatial(xq.astype(np.int64), h - 1, ww - 1)
    wl = wq.astype(np.int64)
    acc = np.zeros((B, F, n2, m2), dtype=np.int64)
    for ch in range(c):
        for k in range(h):
            r0 = off_r - k
            rows = slice(r0, r0 + stride * (n2 - 1) + 1, stride)
            for l in range(ww):
                c0 = off_c - l
                cols = slice(c0, c0 + stride * (m2 - 1) + 1, stride)
                patch = xp[:, ch, rows, cols]
                acc += wl[:, ch, h - 1 - k, ww - 1 - l][None, :, None, None] * patch[:, None, :, :]
    if bq is not None:
        acc += bq.astype(np.int64)[None, :, None, None] << fmt.frac_bits
    return saturate_array(rne_shift_array(acc, fmt.frac_bits), fmt)


def dense_fwd_fxp(xq: np.ndarray, wq: np.ndarray, bq: np.ndarray, fmt: FxpFormat) -> np.ndarray:
    """Fixed-point dense layer. xq: (B,fan); wq: (units,fan); bq: (units,)."""
    check_acc_width(fmt.total_bits, xq.shape[-1])
    acc = xq.astype(np.int64) @ wq.astype(np.int64).T
    if bq is not None:
        acc += bq.astype(np.int64)[None, :] << fmt.frac_bits
    return saturate_array(rne_shift_array(acc, fmt.frac_bits), fmt)
