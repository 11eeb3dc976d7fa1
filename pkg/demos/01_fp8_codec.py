"""
The E4M3 FP8 grid in numpy
==========================

Walk through the 8-bit float format the rest of the package quantizes to:
what the 256 codes decode to, how rounding lands on the grid, and how a
per-row scale stretches the grid over an arbitrary weight matrix.
"""

import numpy as np

from slaqat.fp8 import Axis, fp8_decode, fp8_encode, grid_spacing, quantize_scaled

# every byte decodes to a value; 0x7F and 0xFF are the only NaNs
values = fp8_decode(np.arange(256, dtype=np.uint8))
finite = values[~np.isnan(values)]
print("finite codes:", finite.size)
print("largest:", finite.max(), " smallest positive:", finite[finite > 0].min())

# the grid is dense near zero and coarse near the top
for x in (0.01, 0.3, 1.0, 17.0, 300.0):
    print(f"spacing around {x:>6}: {grid_spacing(x):.6g}")

# rounding is to nearest, ties go to the even mantissa, and big values saturate
x = np.array([1.0625, 1.1875, 3.3, -500.0, 1e9], dtype=np.float32)
print("in :", x)
print("out:", fp8_decode(fp8_encode(x)))

# a weight matrix gets one scale per output row, so each row uses the whole range
rng = np.random.default_rng(0)
w = rng.standard_normal((4, 8)).astype(np.float32) * np.array([[0.01], [0.1], [1.0], [10.0]], np.float32)
q = quantize_scaled(w, Axis.PER_OUTPUT_ROW)
print("scales:", q.scales)
rel = np.abs(q.dequantize() - w).max(axis=1) / np.abs(w).max(axis=1)
print("worst relative error per row:", rel)
print("bytes: float32", w.nbytes, "-> fp8 codes + scales", q.nbytes)
