"""Shared convolution geometry.

Activations are planar ``(channels, rows, cols)`` arrays (batched: a leading
batch axis). A convolution output pixel ``(i, j)`` at stride ``s`` reads the
zero-padded input at ``row = s*i - k + off_r`` for filter tap ``k``, where the
input was padded by ``(h-1, w-1)`` on every side and ``off_r`` encodes the
padding mode:

- ``"full"``: every placement with any overlap; output ``1 + (n+h-2)//s``.
- ``"same"``: output spatially aligned with the input; ``1 + (n-1)//s`` rows
  (equal to the input at stride 1).
"""

from __future__ import annotations

PAD_MODES = ("same", "full")


def conv_out_dims(n: int, m: int, h: int, w: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "full":
        return 1 + (n + h - 2) // stride, 1 + (m + w - 2) // stride
    if padding == "same":
        return 1 + (n - 1) // stride, 1 + (m - 1) // stride
    raise ValueError(f"unknown padding mode {padding!r}")


def conv_offsets(h: int, w: int, padding: str) -> tuple[int, int]:
    """Read offsets into an input padded by (h-1, w-1) per side."""
    if padding == "full":
        return h - 1, w - 1
    if padding == "same":
        return (h - 1) + (h - 1) // 2, (w - 1) + (w - 1) // 2
    raise ValueError(f"unknown padding mode {padding!r}")


def pool_out_dims(n: int, m: int, p: int) -> tuple[int, int]:
    """Non-overlapping p x p windows; input is zero-padded up to a multiple of p."""
    return -(-n // p), -(-m // p)
