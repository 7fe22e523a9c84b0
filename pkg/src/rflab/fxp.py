"""Signed fixed-point arithmetic with explicit rounding and saturation.

A value is carried as an integer ``raw`` with real value ``raw * 2**-frac_bits``.
All rounding is round-to-nearest-even; all overflow saturates (never wraps).
Scalar ops run on Python ints and are exact for any format width; array
helpers use numpy and back the inference engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FxpFormat",
    "FxpWord",
    "quantize",
    "dequantize",
    "fxp_add",
    "fxp_mul",
    "quantize_array",
    "dequantize_array",
    "rne_shift_array",
    "saturate_array",
    "Q2_14",
]


@dataclass(frozen=True)
class FxpFormat:
    """Word layout: ``total_bits`` two's-complement bits, ``frac_bits`` fractional."""

    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not self.signed:
            raise ValueError("only signed formats are supported")
        if not 2 <= self.total_bits <= 32:
            raise ValueError(f"total_bits must be in [2, 32], got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(
                f"frac_bits must be in [0, total_bits), got {self.frac_bits} "
                f"for {self.total_bits} total bits"
            )

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def resolution(self) -> float:
        return 2.0 ** (-self.frac_bits)

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def value_min(self) -> float:
        return self.raw_min * self.resolution

    @property
    def value_max(self) -> float:
        return self.raw_max * self.resolution

    @property
    def word_bytes(self) -> int:
        """Bytes per stored word (byte-aligned: 1, 2, or 4)."""
        return 1 if self.total_bits <= 8 else 2 if self.total_bits <= 16 else 4

    def __str__(self) -> str:
        return f"Q{self.total_bits - self.frac_bits}.{self.frac_bits}"


Q2_14 = FxpFormat(16, 14)


@dataclass(frozen=True)
class FxpWord:
    raw: int
    fmt: FxpFormat

    def __post_init__(self):
        if not self.fmt.raw_min <= self.raw <= self.fmt.raw_max:
            raise ValueError(f"raw {self.raw} outside {self.fmt} range")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.resolution

    def __repr__(self) -> str:
        return f"FxpWord({self.value}, {self.fmt})"


def _saturate(raw: int, fmt: FxpFormat) -> int:
    return min(max(raw, fmt.raw_min), fmt.raw_max)


def _rne_shift(v: int, shift: int) -> int:
    """Round-to-nearest-even arithmetic right shift of a Python int."""
    if shift <= 0:
        return v << -shift
    q = v >> shift  # floor
    rem = v - (q << shift)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and (q & 1)):
        q += 1
    return q


def quantize(x: float, fmt: FxpFormat) -> FxpWord:
    """Round ``x`` to the nearest representable word, saturating on overflow.

    Total on magnitude: any finite real maps to the clamped nearest word.
    """
    scaled = float(x) * fmt.scale
    # Saturate before int conversion; round() on a float is half-to-even.
    if scaled >= fmt.raw_max:
        raw = fmt.raw_max
    elif scaled <= fmt.raw_min:
        raw = fmt.raw_min
    else:
        raw = round(scaled)
    return FxpWord(raw, fmt)


def dequantize(w: FxpWord) -> float:
    return w.value


def fxp_add(a: FxpWord, b: FxpWord) -> FxpWord:
    """Saturating two's-complement add; operands must share a format."""
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")
    return FxpWord(_saturate(a.raw + b.raw, a.fmt), a.fmt)


def fxp_mul(a: FxpWord, b: FxpWord, out_fmt: FxpFormat | None = None) -> FxpWord:
    """Full-precision product rescaled to ``out_fmt`` (default: operand format).

    The integer product is exact; the single rounding happens at the rescale,
    round-to-nearest-even, then the result saturates.
    """
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")
    if out_fmt is None:
        out_fmt = a.fmt
    prod = a.raw * b.raw  # scale 2^-(fa+fb), exact
    shift = a.fmt.frac_bits + b.fmt.frac_bits - out_fmt.frac_bits
    return FxpWord(_saturate(_rne_shift(prod, shift), out_fmt), out_fmt)


# --- array helpers (numpy, int32 raws) ---

def quantize_array(x: np.ndarray, fmt: FxpFormat) -> np.ndarray:
    """Vectorized quantize; returns int32 raws. np.rint is half-to-even."""
    scaled = np.asarray(x, dtype=np.float64) * fmt.scale
    raw = np.clip(np.rint(scaled), fmt.raw_min, fmt.raw_max)
    return np.asarray(raw).astype(np.int32)


def dequantize_array(raw: np.ndarray, fmt: FxpFormat, dtype=np.float64) -> np.ndarray:
    return np.asarray(raw).astype(dtype) * dtype(fmt.resolution)


def rne_shift_array(v: np.ndarray, shift: int) -> np.ndarray:
    """Round-to-nearest-even right shift on an int64 array (exact, no float)."""
    v = np.asarray(v, dtype=np.int64)
    if shift <= 0:
        return v << np.int64(-shift)
    q = v >> np.int64(shift)  # arithmetic shift: floor
    rem = v - (q << np.int64(shift))
    half = np.int64(1) << np.int64(shift - 1)
    bump = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + bump.astype(np.int64)


def saturate_array(v: np.ndarray, fmt: FxpFormat) -> np.ndarray:
    return np.clip(v, fmt.raw_min, fmt.raw_max).astype(np.int32)
