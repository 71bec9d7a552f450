"""Binary checkpoint reader/writer.

Little-endian, no padding::

    magic    b"KQCK"
    version  u32 = 1
    count    u32
    per tensor:
        name_len u32, name (UTF-8)
        dtype    u8   (0 = FP32, 1 = INT8)
        rank     u8
        dims     u64 * rank
        scale    f32  (INT8 only)
        data     row-major, 4 bytes/elem (FP32) or 1 byte/elem (INT8)

Activation calibration is stored alongside the weights as one-element
tensors named ``act.<site>`` holding the running max-abs; after
quantization they become INT8 ``[127]`` with the activation scale.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .quant import QTensor, quantize_maxabs

MAGIC = b"KQCK"
VERSION = 1
FP32_TAG, INT8_TAG = 0, 1
ACT_PREFIX = "act."


def encode(params: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        if isinstance(t, QTensor):
            vals = np.ascontiguousarray(t.values, dtype=np.int8)
            out.append(struct.pack("<BB", INT8_TAG, vals.ndim))
            out.append(struct.pack(f"<{vals.ndim}Q", *vals.shape))
            out.append(struct.pack("<f", t.scale))
            out.append(vals.tobytes())
        else:
            arr = np.ascontiguousarray(t, dtype="<f4")
            out.append(struct.pack("<BB", FP32_TAG, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: need {n} bytes for {what}, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict:
    r = _Reader(memoryview(buf).tobytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'KQCK'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 4) from None
        if name in params:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        tag_pos = r.pos
        dtype, rank = r.unpack("<BB", f"header of {name!r}")
        if dtype not in (FP32_TAG, INT8_TAG):
            raise FormatError(f"unknown dtype tag {dtype} for {name!r}", tag_pos)
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        if dtype == INT8_TAG:
            (scale,) = r.unpack("<f", f"scale of {name!r}")
            if not (np.isfinite(scale) and scale > 0):
                raise FormatError(f"non-positive scale {scale} for {name!r}", r.pos - 4)
            vals = np.frombuffer(r.take(n, f"data of {name!r}"), dtype=np.int8).reshape(dims)
            if (vals == -128).any():
                raise FormatError(f"INT8 value -128 in {name!r}", r.pos - n)
            params[name] = QTensor(vals.copy(), np.float32(scale))
        else:
            data = r.take(4 * n, f"data of {name!r}")
            params[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last tensor", r.pos)
    return params


def save_checkpoint(params: dict, path) -> None:
    data = encode(params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        return decode(f.read())


def is_quantized(params: dict) -> bool:
    return any(isinstance(t, QTensor) for t in params.values())


def quantize_params(params: dict) -> dict:
    """Per-tensor MAX_ABS INT8 version of every tensor in ``params``."""
    return {name: quantize_maxabs(t) for name, t in params.items()}


def split_calibration(params: dict):
    """Separate ``act.*`` entries from model parameters.

    Returns ``(model_params, {site: running_absmax})``.
    """
    model, acts = {}, {}
    for name, t in params.items():
        if name.startswith(ACT_PREFIX):
            v = t.values.astype(np.float32) * t.scale if isinstance(t, QTensor) else np.asarray(t)
            acts[name[len(ACT_PREFIX):]] = float(np.float32(np.max(np.abs(v))))
        else:
            model[name] = t
    return model, acts


def with_calibration(params: dict, act_absmax: dict) -> dict:
    out = dict(params)
    for site, amax in sorted(act_absmax.items()):
        out[ACT_PREFIX + site] = np.array([amax], dtype=np.float32)
    return out
