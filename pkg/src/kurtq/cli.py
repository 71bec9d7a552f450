"""Command-line interface: ``kurtq {init,train,quantize,inspect,ab}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 training divergence,
3 file I/O or checkpoint format error.

A config file is a JSON object with up to four sections::

    {"model": {...ModelConfig fields},
     "train": {...TrainConfig fields},
     "stages": ["finetune", "qat_finetune", "quantize", "evaluate"],
     "paths": {"checkpoint": "in.kqck", "out": "out.kqck", "record": "run.json"}}

Command-line flags override file values. The seed is taken from ``--seed``,
then ``train.seed``, then the ``KURTQ_SEED`` environment variable, then 0.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from . import pipeline as P
from .errors import FormatError, KurtqError, TrainingDivergenceError
from .kure import kurtosis_report
from .quant import QTensor, dequantize

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
SECTIONS = ("model", "train", "stages", "paths")
PATH_KEYS = ("checkpoint", "out", "record")


class ConfigError(KurtqError):
    pass


@dataclass
class CliConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: P.TrainConfig = field(default_factory=P.TrainConfig)
    stages: tuple = P.STAGES
    paths: dict = field(default_factory=dict)


def _coerce(key, value, default):
    """Check ``value`` against the type of the field default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
        value = tuple(value) if ok else value
    else:  # pragma: no cover
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


def _section(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"config key {prefix!r} must be an object")
    defaults = {f.name: f.default for f in fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        if k not in defaults:
            raise ConfigError(f"unknown config key '{prefix}.{k}'; valid keys: {sorted(defaults)}")
        kwargs[k] = _coerce(f"{prefix}.{k}", v, defaults[k])
    try:
        return cls(**kwargs)
    except KurtqError as e:
        raise ConfigError(f"invalid {prefix!r} section: {e}") from None


def parse_config(text: str, source="config") -> CliConfig:
    """Parse and fully validate a config document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    for k in doc:
        if k not in SECTIONS:
            raise ConfigError(f"unknown config key {k!r}; valid keys: {list(SECTIONS)}")
    cfg = CliConfig()
    if "model" in doc:
        cfg.model = _section(M.ModelConfig, doc["model"], "model")
    train = doc.get("train", {})
    if isinstance(train, dict) and "seed" not in train and "KURTQ_SEED" in os.environ:
        try:
            train = {**train, "seed": int(os.environ["KURTQ_SEED"])}
        except ValueError:
            raise ConfigError(f"KURTQ_SEED must be an integer, got {os.environ['KURTQ_SEED']!r}") from None
    cfg.train = _section(P.TrainConfig, train, "train")
    if "stages" in doc:
        st = doc["stages"]
        if not (isinstance(st, list) and all(isinstance(s, str) for s in st)):
            raise ConfigError("config key 'stages' must be a list of stage names")
        cfg.stages = _stages(st)
    if "paths" in doc:
        paths = doc["paths"]
        if not isinstance(paths, dict):
            raise ConfigError("config key 'paths' must be an object")
        for k, v in paths.items():
            if k not in PATH_KEYS:
                raise ConfigError(f"unknown config key 'paths.{k}'; valid keys: {list(PATH_KEYS)}")
            if not isinstance(v, str):
                raise ConfigError(f"config key 'paths.{k}' must be a string")
        cfg.paths = dict(paths)
    return cfg


def _stages(names):
    try:
        return tuple(P._check_stages(names))
    except KurtqError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> CliConfig:
    if path is None:
        return parse_config("{}")
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))


def _apply_overrides(cfg: CliConfig, args) -> CliConfig:
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "stages", None):
        cfg.stages = _stages([s for s in args.stages.split(",") if s])
    for key, attr in (("checkpoint", "inp"), ("out", "out"), ("record", "record")):
        if getattr(args, attr, None):
            cfg.paths[key] = getattr(args, attr)
    return cfg


def _write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- commands ----------------------------------------------------------------

def cmd_init(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = cfg.paths.get("out")
    if not out:
        raise ConfigError("init needs --out")
    ckpt.save_checkpoint(P.initial_params(cfg.train, cfg.model), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    training = any(s in cfg.stages for s in ("finetune", "qat_finetune"))
    params = None
    src = cfg.paths.get("checkpoint")
    if src:
        params = ckpt.load_checkpoint(src)
    elif cfg.stages == ("evaluate",):
        raise ConfigError("--stages evaluate needs a checkpoint to evaluate (--in PATH)")
    out = cfg.paths.get("out")
    writes_ckpt = training or "quantize" in cfg.stages
    if writes_ckpt and not out:
        raise ConfigError("train needs --out for the resulting checkpoint")
    record = cfg.paths.get("record") or (out + ".json" if out else None)
    if not record:
        raise ConfigError("train needs --record (or --out) for the run record")

    rec = P.run_pipeline(cfg.train, cfg.model, cfg.stages, params=params)
    if writes_ckpt:
        ckpt.save_checkpoint(rec.quantized if rec.quantized is not None else rec.params, out)
    _write_text(record, rec.to_json() + "\n")
    if rec.task_loss:
        print(f"task_loss {rec.task_loss[0]:.4f} -> {rec.task_loss[-1]:.4f} over {len(rec.task_loss)} steps")
    if rec.fp32_accuracy is not None:
        print(f"fp32_accuracy {rec.fp32_accuracy:.4f}")
    if rec.int8_accuracy is not None:
        print(f"int8_accuracy {rec.int8_accuracy:.4f}")
    print(f"excluded from KURE: {len(rec.excluded)} tensor(s)")
    if writes_ckpt:
        print(f"wrote {out}")
    print(f"wrote {record}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    params = ckpt.load_checkpoint(args.inp)
    if ckpt.is_quantized(params):
        raise ConfigError(f"{args.inp} is already quantized")
    ckpt.save_checkpoint(ckpt.quantize_params(params), args.out)
    _, acts = ckpt.split_calibration(params)
    if not acts:
        print("note: no activation calibration in the input; int8 evaluation will need it")
    print(f"wrote {args.out}")
    return EXIT_OK


def _report_names(model_params):
    if "embed.w" in model_params and "head.w" in model_params:
        names = P.regularized_names(M.infer_config(model_params, num_heads=1))
        if all(n in model_params for n in names):
            return names
    return list(model_params)


def cmd_inspect(args) -> int:
    params = ckpt.load_checkpoint(args.inp)
    model_params, _ = ckpt.split_calibration(params)
    for name, _path in args.hist or ():
        if name not in model_params:
            raise ConfigError(f"unknown tensor {name!r}; valid names: {', '.join(model_params)}")
    names = _report_names(model_params)
    report = kurtosis_report({n: model_params[n] for n in names}, threshold=args.threshold)
    if args.csv:
        _write_text(args.csv, report.to_csv())
    for name, path in args.hist or ():
        t = model_params[name]
        edges, counts = P.histogram(dequantize(t) if isinstance(t, QTensor) else t)
        _write_text(path, P.histogram_csv(edges, counts))
    print(f"{'name':32s} {'dtype':6s} {'scale':>11s} {'kurtosis':>11s} included")
    for e in report.entries:
        t = model_params[e.name]
        dtype, scale = ("int8", f"{float(t.scale):.4g}") if isinstance(t, QTensor) else ("fp32", "-")
        print(f"{e.name:32s} {dtype:6s} {scale:>11s} {e.kurtosis:11.4g} {str(e.included).lower()}")
    others = [n for n in model_params if n not in set(names)]
    n_int8 = sum(isinstance(model_params[n], QTensor) for n in others)
    print(f"{len(report.excluded_names)} of {len(report.entries)} tensors have kurtosis above "
          f"{args.threshold:g}; {len(others)} other tensors ({n_int8} int8)")
    return EXIT_OK


def cmd_ab(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = cfg.paths.get("out") or cfg.paths.get("record")
    if not out:
        raise ConfigError("ab needs --out for the result JSON")
    result = P.ab_experiment(cfg.train, cfg.model)
    _write_text(out, json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(f"{'arm':10s} {'fp32_acc':>9s} {'int8_acc':>9s} {'gap':>8s}")
    for arm in result["arms"]:
        gap = arm["fp32_accuracy"] - arm["int8_accuracy"]
        print(f"{arm['arm']:10s} {arm['fp32_accuracy']:9.4f} {arm['int8_accuracy']:9.4f} {gap:8.4f}")
    print(f"int8 gain of kure over qat_only: {result['int8_gap']:+.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kurtq", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("init", help="write a freshly initialised checkpoint")
    run_flags(p)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="run pipeline stages and write checkpoint + run record")
    run_flags(p)
    p.add_argument("--in", dest="inp", help="start from this checkpoint")
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(P.STAGES)}")
    p.add_argument("--record", help="run record JSON path (default: OUT.json)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("quantize", help="convert an FP32 checkpoint to INT8")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("inspect", help="kurtosis report and weight histograms")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--threshold", type=float, default=100.0)
    p.add_argument("--csv", help="write the kurtosis report CSV here")
    p.add_argument("--hist", nargs=2, action="append", metavar=("TENSOR", "PATH"),
                   help="write a 64-bin histogram CSV of TENSOR (repeatable)")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("ab", help="QAT with selective KURE against QAT alone")
    run_flags(p)
    p.set_defaults(fn=cmd_ab)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors; remap to 1
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except TrainingDivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except KurtqError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
