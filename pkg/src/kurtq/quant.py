"""Symmetric per-tensor FP32 -> INT8 quantization.

Values map to ``q = clamp(round_half_even(t / scale), -127, 127)`` with a
single positive FP32 scale per tensor; -128 is never produced. The scale
comes from the largest magnitude in the tensor (MAX_ABS), or, for
activations, from a decayed running maximum (:class:`ActCalibrator`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

QMAX = 127
FP32 = np.float32


@dataclass(frozen=True)
class QTensor:
    values: np.ndarray  # int8, in [-127, 127]
    scale: np.float32

    @property
    def shape(self):
        return self.values.shape


def compute_scale_maxabs(t) -> np.float32:
    """``max|t| / 127``; an all-zero (or empty) tensor gets scale 1.0."""
    t = np.asarray(t)
    amax = FP32(np.max(np.abs(t))) if t.size else FP32(0)
    if amax == 0:
        return FP32(1.0)
    # subnormal inputs would otherwise underflow the scale to zero
    return max(FP32(amax / FP32(QMAX)), np.finfo(FP32).smallest_subnormal)


def _check_scale(scale):
    if not (np.isfinite(scale) and scale > 0):
        raise ParameterError(f"quantization scale must be positive and finite, got {scale!r}")


def _qgrid(t, scale):
    # t / scale in the dtype of t; np.rint rounds half to even
    return np.clip(np.rint(t / t.dtype.type(scale)), -QMAX, QMAX)


def quantize(t, scale) -> QTensor:
    _check_scale(scale)
    t = np.asarray(t, dtype=FP32)
    return QTensor(_qgrid(t, scale).astype(np.int8), FP32(scale))


def dequantize(q: QTensor) -> np.ndarray:
    return q.values.astype(FP32) * q.scale


def quantize_maxabs(t) -> QTensor:
    return quantize(t, compute_scale_maxabs(t))


def fake_quant(t, scale) -> np.ndarray:
    """Forward value of fake quantization: quantize then dequantize, staying in float."""
    _check_scale(scale)
    t = np.asarray(t)
    if t.dtype not in (np.float32, np.float64):
        t = t.astype(FP32)
    return _qgrid(t, scale) * t.dtype.type(scale)


def ste_mask(t, scale) -> np.ndarray:
    """Where the straight-through estimator passes gradient: ``|t| <= 127 * scale``."""
    t = np.asarray(t)
    return np.abs(t) <= t.dtype.type(QMAX) * t.dtype.type(scale)


def int8_matmul(a: QTensor, b: QTensor) -> np.ndarray:
    """Integer matmul with INT32 accumulation, rescaled once to FP32.

    Leading batch dimensions are allowed if identical, as in
    :func:`kurtq.tensor.matmul`.
    """
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise DimensionError(f"int8_matmul: incompatible shapes {av.shape} and {bv.shape}")
    if av.shape[-1] * QMAX * QMAX >= 2**31:
        raise DimensionError(f"int8_matmul: inner dimension {av.shape[-1]} overflows INT32 accumulation")
    acc = np.matmul(av.astype(np.int32), bv.astype(np.int32))
    return acc.astype(FP32) * FP32(a.scale * b.scale)


@dataclass
class ActCalibrator:
    """Running max-abs tracker for one activation site.

    ``running_absmax <- max(decay * running_absmax, max|t|)``; with
    ``decay=1.0`` this is a plain running maximum.
    """

    decay: float = 0.99
    running_absmax: float = 0.0
    updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ParameterError(f"calibrator decay must be in (0, 1], got {self.decay}")

    def update(self, t) -> "ActCalibrator":
        t = np.asarray(t)
        amax = float(FP32(np.max(np.abs(t)))) if t.size else 0.0
        self.running_absmax = float(FP32(max(FP32(self.decay) * FP32(self.running_absmax), amax)))
        self.updates += 1
        return self

    @property
    def calibrated(self) -> bool:
        return self.updates > 0

    @property
    def scale(self) -> np.float32:
        if self.running_absmax == 0:
            return FP32(1.0)
        return FP32(FP32(self.running_absmax) / FP32(QMAX))


def calibrate(c: ActCalibrator, t) -> ActCalibrator:
    return c.update(t)
