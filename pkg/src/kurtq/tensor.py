"""Dense FP32 tensors and the elementary kernels the model is built from.

A tensor here is a row-major (C-ordered) ``numpy.ndarray`` of ``float32``.
Kernels never modify their inputs. They keep the floating dtype of their
inputs, so a float64 array stays float64; the gradient checker relies on
this to take finite differences without FP32 round-off.

Random numbers come from numpy's PCG64 bit generator
(``numpy.random.Generator(PCG64(seed))``). The same seed yields the same
stream on every platform for a given numpy release.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

FP32 = np.float32


def tensor(data, dtype=FP32) -> np.ndarray:
    """Build a contiguous tensor from nested lists or an array."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def _float(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(FP32)
    return a


def matmul(a, b) -> np.ndarray:
    """Row-major product of ``a[..., m, k]`` and ``b[..., k, n]``.

    Leading (batch) dimensions must match exactly. FP32 inputs accumulate
    in FP32.
    """
    a, b = _float(a), _float(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a, b) -> np.ndarray:
    """Pointwise add/sub/mul. ``b`` may also be a vector matching ``a``'s last axis."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    a, b = _float(a), _float(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return fn(a, b)


def softmax_rows(a) -> np.ndarray:
    a = _float(a)
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def layer_norm(a, gain, bias, eps=1e-5) -> np.ndarray:
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    a = _float(a)
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + a.dtype.type(eps))
    return xhat * gain + bias


def relu(a) -> np.ndarray:
    a = _float(a)
    return np.maximum(a, a.dtype.type(0))


# -- random initialisation ---------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    low: float = -1.0
    high: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class StudentT:
    """Student-t with ``nu`` degrees of freedom, multiplied by ``scale``.

    For ``nu <= 4`` the fourth moment is infinite, which is what makes the
    sample kurtosis of such draws blow up.
    """

    nu: float = 2.5
    scale: float = 1.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def rand_tensor(rng: np.random.Generator, shape, dist) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ParameterError(f"shape dimensions must be positive, got {shape}")
    if isinstance(dist, Uniform):
        if not dist.high > dist.low:
            raise ParameterError(f"uniform needs high > low, got {dist}")
        out = rng.uniform(dist.low, dist.high, size=shape)
    elif isinstance(dist, Normal):
        if not dist.std > 0:
            raise ParameterError(f"normal needs std > 0, got {dist}")
        out = rng.normal(dist.mean, dist.std, size=shape)
    elif isinstance(dist, StudentT):
        if not (dist.nu > 0 and dist.scale > 0):
            raise ParameterError(f"student_t needs nu > 0 and scale > 0, got {dist}")
        out = dist.scale * rng.standard_t(dist.nu, size=shape)
    else:
        raise ParameterError(f"unknown distribution {dist!r}")
    return out.astype(FP32)
