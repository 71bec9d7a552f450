"""Toy transformer encoder classifier with QAT instrumentation.

Layout: token embedding -> ``num_blocks`` post-LN encoder blocks
(multi-head self-attention, then a two-layer ReLU feed-forward) -> mean
pooling over the sequence -> linear head.

Parameters live in a plain ``dict`` keyed by canonical names::

    embed.w
    block{i}.attn.{query,key,value,out}.{w,b}
    block{i}.ln1.{g,b}
    block{i}.ffn.{fc1,fc2}.{w,b}
    block{i}.ln2.{g,b}
    head.{w,b}

Every matmul is a quantization site. With QAT enabled both operands pass
through fake-quantization: weights with a MAX_ABS scale recomputed on
every call, activations with a per-operand :class:`ActCalibrator`.
Layer norm, softmax, ReLU and bias adds stay in FP32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quant
from .errors import DimensionError, InputError, ParameterError, StateError
from .tensor import Normal, StudentT, rand_tensor

ATTN_PROJ = ("query", "key", "value", "out")
HEAVY_SITES = ("ffn.fc1", "ffn.fc2")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    d_model: int = 32
    num_heads: int = 4
    d_ff: int = 64
    vocab: int = 16
    seq_len: int = 9
    num_classes: int = 2

    def __post_init__(self):
        if self.num_blocks < 0:
            raise ParameterError(f"num_blocks must be >= 0, got {self.num_blocks}")
        for k in ("d_model", "num_heads", "d_ff", "vocab", "seq_len", "num_classes"):
            if getattr(self, k) < 1:
                raise ParameterError(f"{k} must be >= 1, got {getattr(self, k)}")
        if self.d_model % self.num_heads:
            raise ParameterError(
                f"d_model ({self.d_model}) must be divisible by num_heads ({self.num_heads})")

    @property
    def d_head(self):
        return self.d_model // self.num_heads


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embed.w": (cfg.vocab, d)}
    for i in range(cfg.num_blocks):
        p = f"block{i}"
        for proj in ATTN_PROJ:
            shapes[f"{p}.attn.{proj}.w"] = (d, d)
            shapes[f"{p}.attn.{proj}.b"] = (d,)
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ffn.fc1.w"] = (d, f)
        shapes[f"{p}.ffn.fc1.b"] = (f,)
        shapes[f"{p}.ffn.fc2.w"] = (f, d)
        shapes[f"{p}.ffn.fc2.b"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def matmul_weight_names(cfg: ModelConfig) -> list:
    """Weight operands of the quantized matmuls: 6 per block plus the head."""
    names = []
    for i in range(cfg.num_blocks):
        names += [f"block{i}.attn.{p}.w" for p in ATTN_PROJ]
        names += [f"block{i}.ffn.fc1.w", f"block{i}.ffn.fc2.w"]
    return names + ["head.w"]


def init_params(rng, cfg: ModelConfig, dist=Normal(0.0, 0.02)) -> dict:
    """Matrices drawn from ``dist``; biases zero, layer-norm gains one."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            params[name] = rand_tensor(rng, shape, dist)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def generate_pretrained_like(rng, cfg: ModelConfig, heavy_site: str = "ffn.fc2",
                             heavy_dist=StudentT(2.5, 1e-3), outliers: int = 1,
                             outlier_scale: float = 0.5) -> dict:
    """Parameters resembling a pretrained encoder with one critical tensor per block.

    Every matrix is normal(0, 0.02) except ``block{i}.{heavy_site}.w``: a
    narrow heavy-tailed core from ``heavy_dist`` with ``outliers`` entries
    at random positions replaced by ``+-outlier_scale``. At desk sizes a
    Student-t draw alone rarely exceeds kurtosis ~100, since sample kurtosis
    is capped near the element count; the planted outliers push it past 1e3.
    """
    if heavy_site not in HEAVY_SITES:
        raise ParameterError(f"heavy_site must be one of {HEAVY_SITES}, got {heavy_site!r}")
    params = init_params(rng, cfg)
    for i in range(cfg.num_blocks):
        name = f"block{i}.{heavy_site}.w"
        w = rand_tensor(rng, params[name].shape, heavy_dist)
        flat = w.reshape(-1)
        pos = rng.choice(flat.size, size=outliers, replace=False)
        signs = np.where(rng.random(outliers) < 0.5, -1.0, 1.0)
        flat[pos] = (signs * outlier_scale).astype(np.float32)
        params[name] = w
    return params


# -- QAT state ---------------------------------------------------------------

@dataclass
class QatState:
    """Fake-quantization switches and per-site activation calibrators.

    ``frozen`` stops calibrator updates (evaluation). ``int8`` runs every
    matmul as a true INT8 kernel using frozen calibrator scales and, when
    given, pre-quantized weights in ``qweights``.
    """

    enabled: bool = False
    decay: float = 0.99
    frozen: bool = False
    int8: bool = False
    calibrators: dict = field(default_factory=dict)
    qweights: dict = field(default_factory=dict)
    fake_quant_count: int = 0
    matmul_count: int = 0

    def calibrator(self, key) -> quant.ActCalibrator:
        c = self.calibrators.get(key)
        if c is None:
            c = self.calibrators[key] = quant.ActCalibrator(self.decay)
        return c

    def act_scales(self) -> dict:
        return {k: c.running_absmax for k, c in self.calibrators.items()}


def _act_scale(qat: QatState, key, value):
    if qat.int8 or qat.frozen:
        c = qat.calibrators.get(key)
        if c is None or not c.calibrated:
            raise StateError(f"no activation calibration for site {key!r}")
        return c.scale
    return qat.calibrator(key).update(value).scale


def _operand_scale(qat, key, v: ad.Var):
    if v.name is not None:  # a parameter
        q = qat.qweights.get(v.name)
        return q.scale if q is not None else quant.compute_scale_maxabs(v.value)
    return _act_scale(qat, key, v.value)


def site_matmul(site: str, a: ad.Var, b: ad.Var, qat: QatState | None) -> ad.Var:
    if qat is None or not qat.enabled:
        return ad.matmul(a, b)
    qat.matmul_count += 1
    sa = _operand_scale(qat, f"{site}.a", a)
    sb = _operand_scale(qat, f"{site}.b", b)
    if qat.int8:
        qa = quant.quantize(a.value, sa)
        qb = qat.qweights.get(b.name) if b.name is not None else None
        if qb is None:
            qb = quant.quantize(b.value, sb)
        return a.tape.const(quant.int8_matmul(qa, qb))
    qat.fake_quant_count += 2
    return ad.matmul(ad.fake_quant(a, sa), ad.fake_quant(b, sb))


# -- forward -----------------------------------------------------------------

def bind(tape: ad.Tape, params: dict, requires_grad=True) -> dict:
    """Register every parameter on ``tape`` as a named leaf."""
    out = {}
    for name, t in params.items():
        if isinstance(t, quant.QTensor):
            t = quant.dequantize(t)
        out[name] = tape.var(t, name=name, requires_grad=requires_grad)
    return out


def attention(x: ad.Var, pv: dict, block: int, cfg: ModelConfig, qat=None) -> ad.Var:
    """Multi-head self-attention sublayer output for ``x[B, S, D]`` (before residual)."""
    if x.value.ndim != 3 or x.value.shape[-1] != cfg.d_model:
        raise DimensionError(f"attention expects [B, S, {cfg.d_model}], got {x.value.shape}")
    B, S, D = x.value.shape
    H, dh = cfg.num_heads, cfg.d_head
    p = f"block{block}.attn"
    x2 = ad.reshape(x, (B * S, D))

    def proj(which, inp):
        return ad.add(site_matmul(f"{p}.{which}", inp, pv[f"{p}.{which}.w"], qat), pv[f"{p}.{which}.b"])

    def heads(v):
        return ad.transpose(ad.reshape(v, (B, S, H, dh)), (0, 2, 1, 3))

    q, k, v = (heads(proj(w, x2)) for w in ("query", "key", "value"))
    scores = ad.scale(site_matmul(f"{p}.scores", q, ad.transpose(k, (0, 1, 3, 2)), qat),
                      1.0 / math.sqrt(dh))
    ctx = site_matmul(f"{p}.context", ad.softmax(scores), v, qat)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B * S, D))
    return ad.reshape(proj("out", ctx), (B, S, D))


def attention_block(x: ad.Var, pv: dict, block: int, cfg: ModelConfig, qat=None) -> ad.Var:
    a = attention(x, pv, block, cfg, qat)
    p = f"block{block}.ln1"
    return ad.layer_norm(ad.add(x, a), pv[f"{p}.g"], pv[f"{p}.b"])


def ffn(x: ad.Var, pv: dict, block: int, cfg: ModelConfig, qat=None) -> ad.Var:
    """Feed-forward sublayer ``relu(x W1 + b1) W2 + b2`` (before residual)."""
    if x.value.ndim != 3 or x.value.shape[-1] != cfg.d_model:
        raise DimensionError(f"ffn expects [B, S, {cfg.d_model}], got {x.value.shape}")
    B, S, D = x.value.shape
    p = f"block{block}.ffn"
    x2 = ad.reshape(x, (B * S, D))
    h = ad.relu(ad.add(site_matmul(f"{p}.fc1", x2, pv[f"{p}.fc1.w"], qat), pv[f"{p}.fc1.b"]))
    f = ad.add(site_matmul(f"{p}.fc2", h, pv[f"{p}.fc2.w"], qat), pv[f"{p}.fc2.b"])
    return ad.reshape(f, (B, S, D))


def ffn_block(x: ad.Var, pv: dict, block: int, cfg: ModelConfig, qat=None) -> ad.Var:
    f = ffn(x, pv, block, cfg, qat)
    p = f"block{block}.ln2"
    return ad.layer_norm(ad.add(x, f), pv[f"{p}.g"], pv[f"{p}.b"])


def forward(pv: dict, tokens, cfg: ModelConfig, qat: QatState | None = None) -> ad.Var:
    """Class logits for ``tokens`` of shape [B, S] (-> [B, C]) or [S] (-> [C])."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise InputError(f"tokens must have shape [B, S] or [S], got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise InputError(f"token ids must lie in [0, {cfg.vocab}), got range "
                         f"[{tokens.min()}, {tokens.max()}]")
    if qat is not None:
        qat.fake_quant_count = 0
        qat.matmul_count = 0
    x = ad.embedding(pv["embed.w"], tokens)
    for i in range(cfg.num_blocks):
        x = attention_block(x, pv, i, cfg, qat)
        x = ffn_block(x, pv, i, cfg, qat)
    pooled = ad.mean_axis(x, 1)
    logits = ad.add(site_matmul("head", pooled, pv["head.w"], qat), pv["head.b"])
    return ad.reshape(logits, (cfg.num_classes,)) if single else logits


def logits(params: dict, tokens, cfg: ModelConfig, qat: QatState | None = None) -> np.ndarray:
    """Convenience forward pass without gradient tracking."""
    tape = ad.Tape()
    return forward(bind(tape, params, requires_grad=False), tokens, cfg, qat).value


def quantized_sites(cfg: ModelConfig) -> int:
    """Matmul sites per forward pass: 8 per block plus the head."""
    return 8 * cfg.num_blocks + 1


def infer_config(params: dict, num_heads: int) -> ModelConfig:
    """Rebuild a config from parameter shapes (heads are not recoverable from shapes)."""
    vocab, d = params["embed.w"].shape
    blocks = sum(1 for n in params if n.endswith(".attn.query.w"))
    d_ff = params["block0.ffn.fc1.w"].shape[1] if blocks else d
    classes = params["head.w"].shape[1]
    return ModelConfig(num_blocks=blocks, d_model=d, num_heads=num_heads, d_ff=d_ff,
                       vocab=vocab, num_classes=classes)
