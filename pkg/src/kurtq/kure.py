"""Kurtosis of weight tensors and the kurtosis regularizer (KURE).

Kurtosis uses population moments::

    K(t) = m4 / (m2 + eps)**2,   m_r = mean((t - mean(t))**r)

A tensor whose elements are all equal is *degenerate*: it reports K = 0
and receives a zero gradient.
"""
from __future__ import annotations

import csv
import fnmatch
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateTensorError, ParameterError
from .quant import QTensor, dequantize

UNIFORM_KURTOSIS = 1.8
EPS = 1e-12
MODES = ("plain_sum", "target_deviation")


def _check(t):
    t = np.asarray(t)
    if t.size < 2:
        raise DegenerateTensorError(f"kurtosis needs at least 2 elements, got shape {t.shape}")
    return t


def is_degenerate(t) -> bool:
    t = _check(t)
    return bool(np.ptp(t) == 0)


def kurtosis(t, eps: float = EPS) -> float:
    t = _check(t)
    if np.ptp(t) == 0:
        return 0.0
    d = t.astype(np.float64).ravel()
    d = d - d.mean()
    d2 = d * d
    m2 = d2.mean()
    m4 = (d2 * d2).mean()
    return float(m4 / (m2 + eps) ** 2)


def kurtosis_grad(t, eps: float = EPS) -> np.ndarray:
    """Analytic dK/dt, returned in the dtype of ``t``.

    With ``d = t - mean(t)`` and ``D = m2 + eps``::

        dK/dt_i = 4/n * (d_i**3 - m3) / D**2 - 4/n * m4 * d_i / D**3
    """
    t = _check(t)
    out_dtype = t.dtype if t.dtype in (np.float32, np.float64) else np.float32
    if np.ptp(t) == 0:
        return np.zeros(t.shape, dtype=out_dtype)
    n = t.size
    d = t.astype(np.float64) - t.astype(np.float64).mean()
    d2 = d * d
    m2 = d2.mean()
    m3 = (d2 * d).mean()
    m4 = (d2 * d2).mean()
    D = m2 + eps
    g = (4.0 / n) * ((d2 * d - m3) / D**2 - m4 * d / D**3)
    return g.astype(out_dtype)


def kurtosis_node(v: ad.Var, eps: float = EPS) -> ad.Var:
    """Kurtosis as a differentiable scalar on the tape of ``v``."""
    val = np.asarray(kurtosis(v.value, eps), dtype=v.value.dtype)
    return v.tape.record(val, (v,), lambda g: (g * kurtosis_grad(v.value, eps),))


def kure_penalty(tensors, included, mode: str = "target_deviation",
                 target: float = UNIFORM_KURTOSIS, tape: ad.Tape | None = None) -> ad.Var:
    """Regularizer over the ``included`` subset of ``tensors`` (a list of Vars).

    ``plain_sum``: sum of K(T). ``target_deviation``: sum of (K(T) - target)**2.
    Excluded tensors never enter the graph, so their regularizer gradient is
    exactly zero.
    """
    tensors = list(tensors)
    included = list(included)
    if len(included) != len(tensors):
        raise ParameterError(f"mask length {len(included)} != tensor count {len(tensors)}")
    if mode not in MODES:
        raise ParameterError(f"unknown KURE mode {mode!r}")
    terms = []
    for v, inc in zip(tensors, included):
        if not inc:
            continue
        k = kurtosis_node(v)
        terms.append(k if mode == "plain_sum" else ad.square(ad.add_const(k, -target)))
    if not terms:
        if tape is None:
            tape = tensors[0].tape if tensors else ad.Tape()
        return tape.const(np.float32(0.0))
    return ad.add_n(terms) if len(terms) > 1 else terms[0]


# -- reporting ---------------------------------------------------------------

@dataclass
class KurtosisEntry:
    name: str
    numel: int
    min: float
    max: float
    mean: float
    std: float
    kurtosis: float
    included: bool
    degenerate: bool = False


@dataclass
class KurtosisReport:
    entries: list = field(default_factory=list)
    lam: float = 0.5
    mode: str = "target_deviation"
    target: float = UNIFORM_KURTOSIS
    threshold: float = 100.0

    @property
    def included_names(self):
        return [e.name for e in self.entries if e.included]

    @property
    def excluded_names(self):
        return [e.name for e in self.entries if not e.included]

    def mask(self, names):
        inc = {e.name: e.included for e in self.entries}
        return [inc.get(n, False) for n in names]

    def mean_abs_deviation(self, target=None, names=None) -> float:
        """Mean |K - target| over included entries (or over ``names``)."""
        target = self.target if target is None else target
        pick = set(self.included_names if names is None else names)
        ks = [abs(e.kurtosis - target) for e in self.entries if e.name in pick]
        return float(np.mean(ks)) if ks else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "numel", "min", "max", "mean", "std", "kurtosis", "included"])
        for e in self.entries:
            w.writerow([e.name, e.numel] + [f"{float(np.float32(x)):.9g}" for x in
                                            (e.min, e.max, e.mean, e.std, e.kurtosis)]
                       + ["true" if e.included else "false"])
        return buf.getvalue()


def _matches(name, patterns):
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def kurtosis_report(params, threshold: float = 100.0, exclusion_patterns=(),
                    lam: float = 0.5, mode: str = "target_deviation",
                    target: float = UNIFORM_KURTOSIS) -> KurtosisReport:
    """One entry per tensor in ``params`` (name -> array or QTensor).

    A tensor is included in the regularizer when its kurtosis is at most
    ``threshold`` and its name matches none of ``exclusion_patterns``.
    Degenerate tensors are never included.
    """
    entries = []
    for name, t in params.items():
        if isinstance(t, QTensor):
            t = dequantize(t)
        t = np.asarray(t, dtype=np.float32)
        degenerate = is_degenerate(t)
        k = kurtosis(t)
        t64 = t.astype(np.float64)
        entries.append(KurtosisEntry(
            name=name, numel=int(t.size), min=float(t.min()), max=float(t.max()),
            mean=float(t64.mean()), std=float(t64.std()), kurtosis=k,
            included=(not degenerate) and k <= threshold and not _matches(name, exclusion_patterns),
            degenerate=degenerate,
        ))
    return KurtosisReport(entries, lam=lam, mode=mode, target=target, threshold=threshold)
