"""Fine-tune / QAT fine-tune / quantize / evaluate pipeline with optional KURE.

The training objective is ``task_loss + lam * kure_penalty`` where the
penalty only covers tensors marked *included* by a kurtosis report taken
when the regularized stage starts. Optimizer: SGD with momentum.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import model as M
from .errors import ParameterError, StateError, TrainingDivergenceError
from .kure import MODES, UNIFORM_KURTOSIS, kure_penalty, kurtosis, kurtosis_report
from .quant import ActCalibrator, QTensor, dequantize, quantize_maxabs
from .tensor import make_rng

log = logging.getLogger(__name__)

STAGES = ("finetune", "qat_finetune", "quantize", "evaluate")
HIST_BINS = 64


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    momentum: float = 0.9
    batch_size: int = 20
    steps: int = 2000
    lam: float = 0.5
    kure_mode: str = "target_deviation"
    kure_target: float = UNIFORM_KURTOSIS
    exclusion_threshold: float = 100.0
    exclusion_patterns: tuple = ()
    qat_enabled: bool = True
    collapse_stages: bool = True
    seed: int = 0
    report_every: int = 100
    hist_tensors: tuple = ("block0.attn.key.w",)
    init: str = "pretrained_like"
    heavy_site: str = "ffn.fc2"
    act_decay: float = 0.99
    eval_size: int = 2000
    task_rule: str = "majority"
    calib_batches: int = 20

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f"lam must be >= 0, got {self.lam}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kure_mode not in MODES:
            raise ParameterError(f"kure_mode must be one of {MODES}, got {self.kure_mode!r}")
        if self.init not in ("pretrained_like", "normal"):
            raise ParameterError(f"init must be 'pretrained_like' or 'normal', got {self.init!r}")
        if self.report_every < 1:
            raise ParameterError(f"report_every must be >= 1, got {self.report_every}")


# -- synthetic task ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Sequence classification with labels that are a function of the tokens.

    ``majority``: token ``t`` votes for class ``t % num_classes``; the label
    is the class with the most votes. Sequences with a tied vote are
    redrawn, so every example has a unique answer.

    ``contains``: binary; label 1 iff token 0 occurs in the sequence.
    """

    vocab: int = 16
    seq_len: int = 9
    num_classes: int = 3
    rule: str = "majority"

    def __post_init__(self):
        if self.rule not in ("majority", "contains"):
            raise ParameterError(f"unknown task rule {self.rule!r}")
        if self.rule == "contains" and self.num_classes != 2:
            raise ParameterError("the 'contains' rule is binary (num_classes=2)")
        if self.vocab < self.num_classes:
            raise ParameterError("vocab must be at least num_classes")

    def label(self, tokens) -> np.ndarray:
        tokens = np.atleast_2d(tokens)
        if self.rule == "contains":
            return (tokens == 0).any(axis=1).astype(np.int64)
        votes = np.stack([(tokens % self.num_classes == c).sum(axis=1)
                          for c in range(self.num_classes)], axis=1)
        return votes.argmax(axis=1).astype(np.int64)

    def _tied(self, tokens):
        votes = np.stack([(tokens % self.num_classes == c).sum(axis=1)
                          for c in range(self.num_classes)], axis=1)
        top = votes.max(axis=1, keepdims=True)
        return (votes == top).sum(axis=1) > 1

    def sample(self, rng, n):
        if self.rule == "contains":
            # about half the sequences avoid token 0 entirely
            tokens = rng.integers(1, self.vocab, size=(n, self.seq_len))
            hit = rng.random(n) < 0.5
            pos = rng.integers(0, self.seq_len, size=n)
            tokens[hit, pos[hit]] = 0
            return tokens, self.label(tokens)
        tokens = rng.integers(0, self.vocab, size=(n, self.seq_len))
        bad = self._tied(tokens)
        while bad.any():
            tokens[bad] = rng.integers(0, self.vocab, size=(int(bad.sum()), self.seq_len))
            bad = self._tied(tokens)
        return tokens, self.label(tokens)


def task_for(mcfg: M.ModelConfig, rule="majority") -> SyntheticTask:
    return SyntheticTask(mcfg.vocab, mcfg.seq_len, mcfg.num_classes, rule)


def heldout(task: SyntheticTask, seed: int, n: int):
    return task.sample(make_rng(seed + 1), n)


# -- training ----------------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    mcfg: M.ModelConfig
    velocity: dict = field(default_factory=dict)
    qat: M.QatState | None = None
    step: int = 0


@dataclass
class StepResult:
    task_loss: float
    kure_loss: float
    total_loss: float
    reg_grads: dict | None = None


def initial_params(cfg: TrainConfig, mcfg: M.ModelConfig) -> dict:
    rng = make_rng(cfg.seed)
    if cfg.init == "pretrained_like":
        return M.generate_pretrained_like(rng, mcfg, heavy_site=cfg.heavy_site)
    return M.init_params(rng, mcfg)


def regularized_names(mcfg: M.ModelConfig) -> list:
    return M.matmul_weight_names(mcfg)


def selection_report(params, mcfg, cfg: TrainConfig):
    names = regularized_names(mcfg)
    return kurtosis_report({n: params[n] for n in names}, cfg.exclusion_threshold,
                           cfg.exclusion_patterns, cfg.lam, cfg.kure_mode, cfg.kure_target)


def train_step(state: TrainState, batch, cfg: TrainConfig, mask: dict,
               lam: float | None = None, keep_reg_grads=False) -> StepResult:
    """One SGD-momentum update on ``task_loss + lam * kure_penalty``.

    ``mask`` maps regularized tensor names to their inclusion flag.
    """
    lam = cfg.lam if lam is None else lam
    # overflow surfaces as a non-finite loss below, reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_step(state, batch, cfg, mask, lam, keep_reg_grads)


def _train_step(state, batch, cfg, mask, lam, keep_reg_grads):
    tokens, labels = batch
    tape = ad.Tape()
    pv = M.bind(tape, state.params)
    logits = M.forward(pv, tokens, state.mcfg, state.qat)
    task = ad.cross_entropy(logits, labels)
    names = list(mask)
    kure = kure_penalty([pv[n] for n in names], [mask[n] for n in names],
                        cfg.kure_mode, cfg.kure_target, tape=tape)
    task_loss, kure_loss = float(task.value), float(kure.value)
    total = task if lam == 0 else ad.add(task, ad.scale(kure, lam))
    total_loss = float(total.value)
    if not (np.isfinite(task_loss) and np.isfinite(kure_loss) and np.isfinite(total_loss)):
        raise TrainingDivergenceError(state.step, task_loss, kure_loss)

    reg_grads = None
    if keep_reg_grads and lam != 0:
        reg_grads = ad.backward(tape, kure)
    grads = ad.backward(tape, total)

    mu, lr = np.float32(cfg.momentum), np.float32(cfg.lr)
    new = {}
    for name, p in state.params.items():
        g = grads[name].astype(np.float32)
        v = state.velocity.get(name)
        v = g if v is None else mu * v + g
        state.velocity[name] = v
        new[name] = (p - lr * v).astype(np.float32)
    state.params = new
    state.step += 1
    return StepResult(task_loss, kure_loss, total_loss, reg_grads)


def histogram(t, bins=HIST_BINS):
    t = np.asarray(t, dtype=np.float32).ravel()
    counts, edges = np.histogram(t, bins=bins, range=(float(t.min()), float(t.max())))
    return edges, counts


def histogram_csv(edges, counts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left", "bin_right", "count"])
    for i, c in enumerate(counts):
        w.writerow([f"{float(np.float32(edges[i])):.9g}", f"{float(np.float32(edges[i + 1])):.9g}", int(c)])
    return buf.getvalue()


def dataset_loss(params, dataset, mcfg, chunk=500) -> float:
    tokens, labels = dataset
    total = 0.0
    for i in range(0, len(labels), chunk):
        z = M.logits(params, tokens[i:i + chunk], mcfg)
        tape = ad.Tape()
        total += float(ad.cross_entropy(tape.const(z.astype(np.float64)), labels[i:i + chunk]).value) * len(labels[i:i + chunk])
    return total / len(labels)


# -- evaluation --------------------------------------------------------------

def _int8_runtime(params: dict, mcfg: M.ModelConfig):
    model_params, acts = ckpt.split_calibration(params)
    if not acts:
        raise StateError("int8 evaluation needs calibrated activation scales (act.* entries)")
    qweights = {}
    fp = {}
    weight_names = set(M.matmul_weight_names(mcfg))
    for name, t in model_params.items():
        if name in weight_names:
            q = t if isinstance(t, QTensor) else quantize_maxabs(t)
            qweights[name] = q
            fp[name] = dequantize(q)
        else:
            fp[name] = dequantize(t) if isinstance(t, QTensor) else t
    cal = {site: ActCalibrator(1.0, amax, 1) for site, amax in acts.items()}
    qat = M.QatState(enabled=True, frozen=True, int8=True, calibrators=cal, qweights=qweights)
    return fp, qat


def evaluate(params: dict, dataset, mcfg: M.ModelConfig, precision="fp32", chunk=500) -> float:
    """Accuracy of ``params`` on ``dataset = (tokens, labels)``.

    ``int8`` runs every matmul as an INT8 kernel; it needs ``act.*``
    calibration entries in ``params`` and raises :class:`StateError` without them.
    """
    tokens, labels = dataset
    if precision == "fp32":
        fp = {k: (dequantize(v) if isinstance(v, QTensor) else v)
              for k, v in ckpt.split_calibration(params)[0].items()}
        qat = None
    elif precision == "int8":
        fp, qat = _int8_runtime(params, mcfg)
    else:
        raise ParameterError(f"precision must be 'fp32' or 'int8', got {precision!r}")
    correct = 0
    for i in range(0, len(labels), chunk):
        z = M.logits(fp, tokens[i:i + chunk], mcfg, qat)
        correct += int((z.argmax(axis=-1) == labels[i:i + chunk]).sum())
    return correct / len(labels)


# -- pipeline ----------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    model_config: dict
    stages: list
    task_loss: list = field(default_factory=list)
    kure_loss: list = field(default_factory=list)
    stage_of_step: list = field(default_factory=list)
    included: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    kurtosis_snapshots: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    fp32_accuracy: float | None = None
    int8_accuracy: float | None = None
    params: dict | None = None
    quantized: dict | None = None

    def to_dict(self):
        d = asdict(self)
        d.pop("params")
        d.pop("quantized")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def mean_abs_deviation(self, snapshot, names=None, target=UNIFORM_KURTOSIS) -> float:
        names = self.included if names is None else names
        ks = snapshot["kurtosis"]
        return float(np.mean([abs(ks[n] - target) for n in names])) if names else 0.0


def _check_stages(stages):
    stages = list(stages)
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ParameterError(f"unknown stages {bad}; valid: {STAGES}")
    order = [STAGES.index(s) for s in stages]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ParameterError(f"stages must be distinct and in pipeline order {STAGES}, got {stages}")
    return stages


def _plan(cfg: TrainConfig, stages):
    """Training phases as (stage name, steps, qat, kure) tuples."""
    ft, qft = "finetune" in stages, "qat_finetune" in stages
    if ft and qft and not cfg.collapse_stages:
        first = cfg.steps // 2
        return [("finetune", first, False, True), ("qat_finetune", cfg.steps - first, True, False)]
    if ft and qft:
        return [("qat_finetune", cfg.steps, cfg.qat_enabled, True)]
    if qft:
        return [("qat_finetune", cfg.steps, cfg.qat_enabled, True)]
    if ft:
        return [("finetune", cfg.steps, False, True)]
    return []


def _snapshot(rec, params, step, stage, names, hist_names):
    rec.kurtosis_snapshots.append(
        {"step": step, "stage": stage, "kurtosis": {n: kurtosis(params[n]) for n in names}})
    for n in hist_names:
        edges, counts = histogram(params[n])
        rec.histograms.append({"step": step, "name": n, "edges": edges.astype(float).tolist(),
                               "counts": counts.astype(int).tolist()})


def run_pipeline(cfg: TrainConfig, mcfg: M.ModelConfig, stages=STAGES, params=None,
                 mask=None) -> RunRecord:
    """Run the requested stages and collect losses, kurtosis and accuracies.

    ``params`` defaults to a fresh initialisation from ``cfg.init``; it may
    also be an INT8 parameter set, which can only be evaluated. ``mask``
    overrides the inclusion set chosen by the initial kurtosis report.
    """
    stages = _check_stages(stages)
    task = task_for(mcfg, cfg.task_rule)
    rec = RunRecord(config=asdict(cfg), model_config=asdict(mcfg), stages=stages)
    if params is None:
        params = initial_params(cfg, mcfg)
    quantized = params if ckpt.is_quantized(params) else None
    model_params, acts = ckpt.split_calibration(params)
    plan = _plan(cfg, stages)
    if plan and quantized is not None:
        raise StateError("cannot train from an INT8 checkpoint")

    names = regularized_names(mcfg)
    if mask is None:
        report = selection_report(model_params, mcfg, cfg)
        mask = dict(zip([e.name for e in report.entries], [e.included for e in report.entries]))
    rec.included = [n for n in names if mask.get(n)]
    rec.excluded = [n for n in names if not mask.get(n)]
    hist_names = [n for n in cfg.hist_tensors if n in model_params]

    if plan:
        state = TrainState(dict(model_params), mcfg)
        data_rng = make_rng([cfg.seed, 2])
        qat = M.QatState(enabled=True, decay=cfg.act_decay)
        for n, a in acts.items():
            qat.calibrators[n] = ActCalibrator(cfg.act_decay, a, 1)
        _snapshot(rec, state.params, 0, plan[0][0], names, hist_names)
        for stage, steps, use_qat, use_kure in plan:
            state.qat = qat if use_qat else None
            lam = cfg.lam if use_kure else 0.0
            for _ in range(steps):
                batch = task.sample(data_rng, cfg.batch_size)
                r = train_step(state, batch, cfg, mask, lam=lam)
                rec.task_loss.append(r.task_loss)
                rec.kure_loss.append(r.kure_loss)
                rec.stage_of_step.append(stage)
                if state.step % cfg.report_every == 0:
                    _snapshot(rec, state.params, state.step, stage, names, hist_names)
                    log.info("step %d %s task=%.4f kure=%.4g", state.step, stage,
                             r.task_loss, r.kure_loss)
        if state.step % cfg.report_every:
            _snapshot(rec, state.params, state.step, plan[-1][0], names, hist_names)
        model_params = state.params
        acts = qat.act_scales() or acts

    if "quantize" in stages:
        if quantized is None:
            if not acts:
                acts = calibrate_post_training(model_params, mcfg, task, cfg)
            quantized = ckpt.quantize_params(ckpt.with_calibration(model_params, acts))
    if "evaluate" in stages:
        data = heldout(task, cfg.seed, cfg.eval_size)
        rec.fp32_accuracy = evaluate(model_params, data, mcfg, "fp32")
        if quantized is not None:
            rec.int8_accuracy = evaluate(quantized, data, mcfg, "int8")
    rec.params = ckpt.with_calibration(model_params, acts)
    rec.quantized = quantized
    return rec


def calibrate_post_training(params, mcfg, task, cfg: TrainConfig) -> dict:
    """Collect activation max-abs over ``cfg.calib_batches`` training-distribution batches."""
    qat = M.QatState(enabled=True, decay=1.0)
    rng = make_rng([cfg.seed, 3])
    for _ in range(cfg.calib_batches):
        tokens, _ = task.sample(rng, cfg.batch_size)
        M.logits(params, tokens, mcfg, qat)
    return qat.act_scales()


# -- A/B comparison ----------------------------------------------------------

def ab_experiment(cfg: TrainConfig, mcfg: M.ModelConfig) -> dict:
    """QAT fine-tuning with selective KURE (arm A) against QAT alone (arm B).

    Both arms share the seed, initialisation, data stream and the inclusion
    set chosen from the initial weights.
    """
    params = initial_params(cfg, mcfg)
    report = selection_report(params, mcfg, cfg)
    mask = {e.name: e.included for e in report.entries}
    arms = []
    for arm, lam in (("kure", cfg.lam), ("qat_only", 0.0)):
        rec = run_pipeline(replace(cfg, lam=lam, collapse_stages=True), mcfg,
                           ("finetune", "qat_finetune", "quantize", "evaluate"),
                           params=params, mask=mask)
        snaps = rec.kurtosis_snapshots
        arms.append({
            "arm": arm, "lam": lam,
            "fp32_accuracy": rec.fp32_accuracy, "int8_accuracy": rec.int8_accuracy,
            "initial_mean_abs_dev": rec.mean_abs_deviation(snaps[0], target=cfg.kure_target),
            "final_mean_abs_dev": rec.mean_abs_deviation(snaps[-1], target=cfg.kure_target),
            "kurtosis_trajectory": snaps,
            "task_loss": rec.task_loss,
            "kure_loss": rec.kure_loss,
        })
    return {
        "config": asdict(cfg), "model_config": asdict(mcfg),
        "included": [n for n, v in mask.items() if v],
        "excluded": [n for n, v in mask.items() if not v],
        "arms": arms,
        "int8_gap": arms[0]["int8_accuracy"] - arms[1]["int8_accuracy"],
    }
