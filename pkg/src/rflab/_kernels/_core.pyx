# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core.

Twins of the numpy fallback with identical numeric contracts: float
accumulation in (channel, tap-row, tap-col) order with bias last (built with
-ffp-contract=off so no FMA changes the rounding sequence), fixed-point in
exact int64 with round-to-nearest-even requantization.
"""

import numpy as np

from .geometry import conv_offsets, conv_out_dims

ctypedef fused floating:
    float
    double


cdef inline long long _rne_shift(long long v, int shift) nogil:
    cdef long long q, rem, half
    if shift <= 0:
        return v << (-shift)
    q = v >> shift
    rem = v - (q << shift)
    half = (<long long>1) << (shift - 1)
    if rem > half or (rem == half and (q & 1)):
        q += 1
    return q


cdef inline long long _clamp(long long v, long long lo, long long hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def _pad_spatial(x, int ph, int pw):
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(x, pad)


def conv2d_fwd(x, w, b, int stride, str padding):
    B, c, n, m = x.shape
    F, _, h, ww = w.shape
    n2, m2 = conv_out_dims(n, m, h, ww, stride, padding)
    out = np.zeros((B, F, n2, m2), dtype=x.dtype)
    xp = _pad_spatial(x, h - 1, ww - 1)
    off_r, off_c = conv_offsets(h, ww, padding)
    if b is None:
        b = np.zeros(F, dtype=x.dtype)
    if x.dtype == np.float32:
        _conv2d_fwd_impl[float](xp, np.ascontiguousarray(w), np.ascontiguousarray(b),
                                stride, off_r, off_c, out)
    else:
        _conv2d_fwd_impl[double](xp, np.ascontiguousarray(w), np.ascontiguousarray(b),
                                 stride, off_r, off_c, out)
    return out


cdef void _conv2d_fwd_impl(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                           floating[::1] b, int stride, int off_r, int off_c,
                           floating[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], F = out.shape[1], n2 = out.shape[2], m2 = out.shape[3]
    cdef Py_ssize_t c = w.shape[1], h = w.shape[2], ww = w.shape[3]
    cdef Py_ssize_t bi, f, i, j, ch, k, l, r, cc
    cdef floating acc
    for bi in range(B):
        for f in range(F):
            for i in range(n2):
                for j in range(m2):
                    acc = 0
                    for ch in range(c):
                        for k in range(h):
                            r = stride * i - k + off_r
                            for l in range(ww):
                                cc = stride * j - l + off_c
                                acc = acc + w[f, ch, h - 1 - k, ww - 1 - l] * xp[bi, ch, r, cc]
                    out[bi, f, i, j] = acc + b[f]


def conv2d_bwd(x, w, dy, int stride, str padding):
    B, c, n, m = x.shape
    F, _, h, ww = w.shape
    off_r, off_c = conv_offsets(h, ww, padding)
    xp = _pad_spatial(x, h - 1, ww - 1)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(np.ascontiguousarray(w))
    dy = np.ascontiguousarray(dy)
    if x.dtype == np.float32:
        _conv2d_bwd_impl[float](xp, np.ascontiguousarray(w), dy, stride, off_r, off_c, dxp, dw)
    else:
        _conv2d_bwd_impl[double](xp, np.ascontiguousarray(w), dy, stride, off_r, off_c, dxp, dw)
    dx = dxp[:, :, h - 1 : h - 1 + n, ww - 1 : ww - 1 + m] if (h > 1 or ww > 1) else dxp
    db = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


cdef void _conv2d_bwd_impl(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                           floating[:, :, :, ::1] dy, int stride, int off_r, int off_c,
                           floating[:, :, :, ::1] dxp, floating[:, :, :, ::1] dw) noexcept nogil:
    cdef Py_ssize_t B = dy.shape[0], F = dy.shape[1], n2 = dy.shape[2], m2 = dy.shape[3]
    cdef Py_ssize_t c = w.shape[1], h = w.shape[2], ww = w.shape[3]
    cdef Py_ssize_t bi, f, i, j, ch, k, l, r, cc
    cdef floating g
    for bi in range(B):
        for f in range(F):
            for i in range(n2):
                for j in range(m2):
                    g = dy[bi, f, i, j]
                    if g == 0:
                        continue
                    for ch in range(c):
                        for k in range(h):
                            r = stride * i - k + off_r
                            for l in range(ww):
                                cc = stride * j - l + off_c
                                dxp[bi, ch, r, cc] += g * w[f, ch, h - 1 - k, ww - 1 - l]
                                dw[f, ch, h - 1 - k, ww - 1 - l] += g * xp[bi, ch, r, cc]


def conv2d_fwd_fxp(xq, wq, bq, int stride, str padding, int total_bits, int frac_bits):
    B, c, n, m = xq.shape
    F, _, h, ww = wq.shape
    n2, m2 = conv_out_dims(n, m, h, ww, stride, padding)
    out = np.zeros((B, F, n2, m2), dtype=np.int32)
    xp = _pad_spatial(np.ascontiguousarray(xq, dtype=np.int32), h - 1, ww - 1)
    off_r, off_c = conv_offsets(h, ww, padding)
    if bq is None:
        bq = np.zeros(F, dtype=np.int32)
    _conv2d_fwd_fxp_impl(xp, np.ascontiguousarray(wq, dtype=np.int32),
                         np.ascontiguousarray(bq, dtype=np.int32),
                         stride, off_r, off_c, total_bits, frac_bits, out)
    return out


cdef void _conv2d_fwd_fxp_impl(int[:, :, :, ::1] xp, int[:, :, :, ::1] w, int[::1] b,
                               int stride, int off_r, int off_c, int total_bits,
                               int frac_bits, int[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], F = out.shape[1], n2 = out.shape[2], m2 = out.shape[3]
    cdef Py_ssize_t c = w.shape[1], h = w.shape[2], ww = w.shape[3]
    cdef Py_ssize_t bi, f, i, j, ch, k, l, r, cc
    cdef long long acc
    cdef long long lo = -((<long long>1) << (total_bits - 1))
    cdef long long hi = ((<long long>1) << (total_bits - 1)) - 1
    for bi in range(B):
        for f in range(F):
            for i in range(n2):
                for j in range(m2):
                    acc = 0
                    for ch in range(c):
                        for k in range(h):
                            r = stride * i - k + off_r
                            for l in range(ww):
                                cc = stride * j - l + off_c
                                acc += <long long>w[f, ch, h - 1 - k, ww - 1 - l] * <long long>xp[bi, ch, r, cc]
                    acc += (<long long>b[f]) << frac_bits
                    out[bi, f, i, j] = <int>_clamp(_rne_shift(acc, frac_bits), lo, hi)


def dense_fwd_fxp(xq, wq, bq, int total_bits, int frac_bits):
    B, fan = xq.shape
    units = wq.shape[0]
    out = np.zeros((B, units), dtype=np.int32)
    if bq is None:
        bq = np.zeros(units, dtype=np.int32)
    _dense_fwd_fxp_impl(np.ascontiguousarray(xq, dtype=np.int32),
                        np.ascontiguousarray(wq, dtype=np.int32),
                        np.ascontiguousarray(bq, dtype=np.int32),
                        total_bits, frac_bits, out)
    return out


cdef void _dense_fwd_fxp_impl(int[:, ::1] xq, int[:, ::1] w, int[::1] b,
                              int total_bits, int frac_bits, int[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = xq.shape[0], fan = xq.shape[1], units = w.shape[0]
    cdef Py_ssize_t bi, u, t
    cdef long long acc
    cdef long long lo = -((<long long>1) << (total_bits - 1))
    cdef long long hi = ((<long long>1) << (total_bits - 1)) - 1
    for bi in range(B):
        for u in range(units):
            acc = 0
            for t in range(fan):
                acc += <long long>w[u, t] * <long long>xq[bi, t]
            acc += (<long long>b[u]) << frac_bits
            out[bi, u] = <int>_clamp(_rne_shift(acc, frac_bits), lo, hi)
