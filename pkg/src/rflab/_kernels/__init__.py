"""Convolution and dense kernels with a compiled core and a numpy fallback.

The compiled extension (`_core`) is preferred when it imported cleanly; set
RFLAB_PURE=1 to force the numpy fallback. Both backends implement the same
accumulation-order contract, so selection never changes results, only speed.
"""

import os

import numpy as np

from . import fallback
from .fallback import acc_bits_needed, check_acc_width
from .geometry import PAD_MODES, conv_offsets, conv_out_dims, pool_out_dims

compiled = None
if not os.environ.get("RFLAB_PURE"):
    try:
        from . import _core as compiled
    except ImportError:
        compiled = None

_BACKEND = "compiled" if compiled is not None else "fallback"


def backend_name():
    return _BACKEND


def _floatify(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return np.ascontiguousarray(x)


def conv2d_fwd(x, w, b, stride=1, padding="same"):
    """Strided 2-D convolution of (B, c, n, m) by (F, c, h, w), bias last."""
    x = _floatify(x)
    w = np.ascontiguousarray(np.asarray(w, dtype=x.dtype))
    if b is not None:
        b = np.ascontiguousarray(np.asarray(b, dtype=x.dtype))
    if compiled is not None:
        return compiled.conv2d_fwd(x, w, b, stride, padding)
    return fallback.conv2d_fwd(x, w, b, stride, padding)


def conv2d_bwd(x, w, dy, stride=1, padding="same"):
    """Gradients (dx, dw, db) for conv2d_fwd."""
    x = _floatify(x)
    w = np.ascontiguousarray(np.asarray(w, dtype=x.dtype))
    dy = np.ascontiguousarray(np.asarray(dy, dtype=x.dtype))
    if compiled is not None:
        return compiled.conv2d_bwd(x, w, dy, stride, padding)
    return fallback.conv2d_bwd(x, w, dy, stride, padding)


def conv2d_fwd_fxp(xq, wq, bq, stride, padding, fmt):
    """Fixed-point conv: int64 accumulate, one RNE requantize, saturate."""
    n_terms = int(np.asarray(wq).shape[1] * np.asarray(wq).shape[2] * np.asarray(wq).shape[3])
    check_acc_width(fmt.total_bits, n_terms)
    if compiled is not None:
        return compiled.conv2d_fwd_fxp(xq, wq, bq, stride, padding,
                                       fmt.total_bits, fmt.frac_bits)
    return fallback.conv2d_fwd_fxp(xq, wq, bq, stride, padding, fmt)


def dense_fwd_fxp(xq, wq, bq, fmt):
    """Fixed-point dense layer: int64 accumulate, one RNE requantize, saturate."""
    check_acc_width(fmt.total_bits, int(np.asarray(wq).shape[1]))
    if compiled is not None:
        return compiled.dense_fwd_fxp(xq, wq, bq, fmt.total_bits, fmt.frac_bits)
    return fallback.dense_fwd_fxp(xq, wq, bq, fmt)
