"""Symmetric INT8 quantization in a few lines.

A tensor is mapped onto the integer grid [-127, 127] with one FP32 scale,
chosen so the largest magnitude lands exactly on 127. Every element then
moves by at most half a grid step when we come back to float.
"""
import numpy as np

from kurtq import (compute_scale_maxabs, dequantize, fake_quant, int8_matmul, make_rng,
                   quantize)
from kurtq.quant import quantize_maxabs

rng = make_rng(0)
t = rng.normal(0, 0.05, size=(4, 6)).astype(np.float32)

s = compute_scale_maxabs(t)
q = quantize(t, s)
print(f"scale = max|t| / 127 = {s:.6g}")
print("int8 values:\n", q.values)
err = np.abs(dequantize(q) - t)
print(f"worst round-trip error {err.max():.3g} <= scale/2 = {s / 2:.3g}")

# fake quantization is the same round trip kept in float, so it can sit inside training
print("fake_quant is idempotent:", np.array_equal(fake_quant(fake_quant(t, s), s), fake_quant(t, s)))

# one outlier stretches the grid and flattens everyone else onto a few levels
spiky = t.copy()
spiky[0, 0] = 2.0
qs = quantize_maxabs(spiky)
print(f"with one outlier: scale {qs.scale:.3g}, distinct levels used by the rest: "
      f"{len(np.unique(qs.values.ravel()[1:]))} (vs {len(np.unique(q.values))} before)")

# integer matmul accumulates in INT32 and rescales once
a = quantize_maxabs(rng.normal(size=(16, 16)).astype(np.float32))
b = quantize_maxabs(rng.normal(size=(16, 16)).astype(np.float32))
ref = dequantize(a) @ dequantize(b)
print(f"int8_matmul vs dequantized matmul: max diff {np.abs(int8_matmul(a, b) - ref).max():.2g}")
