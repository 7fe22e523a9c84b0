"""rflab: desk-scale RF spectrum classifiers and hardware cost exploration.

Synthesizes labeled I/Q frame datasets, trains small CNNs on them, quantizes
the weights to fixed point for bit-exact integer inference, and lowers the
resulting networks to loop nests to estimate latency, resources, and energy
for sequential and pipelined schedules.
"""

from .fxp import FxpFormat, Q2_14, dequantize, fxp_add, fxp_mul, quantize

__version__ = "0.1.0"

__all__ = ["FxpFormat", "Q2_14", "quantize", "dequantize", "fxp_add", "fxp_mul",
           "__version__"]
