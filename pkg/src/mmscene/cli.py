"""Command line: gen-data, train, calibrate, quantize, eval, report.

Run as ``python3 -m mmscene.cli <command> ...``. Exit codes: 0 ok, 2 usage or
config, 3 I/O, 4 numeric or runtime, 5 corrupted bundle.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields

import numpy as np

from . import dataio
from .bundle import BundleCorruptError, BundleError, bundle_from_model, load_bundle, save_bundle
from .config import ConfigError
from .quantizer import (MissingStatsError, QuantizationError, QuantPolicy, apply_awq,
                        collect_calibration_stats, layer_quantiles)
from .trainer import TrainConfig, TrainingDiverged, metrics_from_predictions, train
from .model import predict_logits

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_RUNTIME, EXIT_CORRUPT = 0, 2, 3, 4, 5
SPLITS = ("train", "val", "test")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------- flat configs

def read_kv(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e.strerror}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise CliError(EXIT_USAGE, f"{path}:{n}: expected key=value, got {line!r}")
        out[k.strip()] = v.strip()
    return out


def _convert(cls, name, raw, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return type(default)(raw)
    except ValueError:
        raise CliError(EXIT_USAGE, f"{cls.__name__}: bad value for {name}: {raw!r}") from None


def parse_train_config(kv: dict) -> TrainConfig:
    """Every key is required; unknown keys are rejected."""
    known = {f.name: f.default for f in fields(TrainConfig)}
    for k in known:
        if k not in kv:
            raise CliError(EXIT_USAGE, f"config is missing key {k!r}")
    extra = sorted(set(kv) - set(known))
    if extra:
        raise CliError(EXIT_USAGE, f"unknown config key {extra[0]!r}")
    try:
        return TrainConfig(**{k: _convert(TrainConfig, k, kv[k], d) for k, d in known.items()})
    except ConfigError as e:
        raise CliError(EXIT_USAGE, f"invalid config: {e}") from None


def parse_policy(kv: dict) -> QuantPolicy:
    """Missing keys take the defaults."""
    known = {f.name: f.default for f in fields(QuantPolicy)}
    extra = sorted(set(kv) - set(known))
    if extra:
        raise CliError(EXIT_USAGE, f"unknown policy key {extra[0]!r}")
    try:
        return QuantPolicy(**{k: _convert(QuantPolicy, k, v, known[k]) for k, v in kv.items()})
    except QuantizationError as e:
        raise CliError(EXIT_USAGE, f"invalid policy: {e}") from None


def format_train_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


# ------------------------------------------------------------------ helpers

def _load_dataset(path) -> dataio.Dataset:
    try:
        return dataio.read_dataset(path)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read dataset at {path}: {e.strerror or e}") from None
    except (dataio.DataFormatError, KeyError, ValueError) as e:
        raise CliError(EXIT_CORRUPT, f"dataset at {path} is malformed: {e}") from None


def _load_bundle(path):
    try:
        return load_bundle(path)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read bundle {path}: {e.strerror}") from None
    except BundleCorruptError as e:
        raise CliError(EXIT_CORRUPT, f"{path}: {e}") from None
    except BundleError as e:
        raise CliError(EXIT_CORRUPT, f"{path}: not a valid bundle: {e}") from None


def _write_text(path, text: str):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e.strerror}") from None


def _save_bundle(bundle, path) -> int:
    try:
        return save_bundle(bundle, path)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e.strerror}") from None


def _split_ids(ds, split):
    try:
        return ds.split_ids(split)
    except dataio.DataFormatError as e:
        raise CliError(EXIT_USAGE, str(e)) from None


def payload_bytes(bundle) -> int:
    """Weight payload of a bundle: fp32 tensors plus codes and scales."""
    return (sum(4 * v.size for v in bundle.tensors.values())
            + sum(q.payload_bytes() for q in bundle.quantized.values()))


def _calibration_arrays(ds, n, seed):
    ids = dataio.sample_calibration(_split_ids(ds, "train"), n, seed)
    return ids, dataio.preprocess_arrays(ds, ids)[:3]


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    try:
        cfg = dataio.GeneratorConfig(per_class=args.per_class)
        ds = dataio.generate_dataset(cfg, seed=args.seed)
        dataio.attach_splits(ds, dataio.split_dataset(ds.labels, args.seed), args.seed)
    except ConfigError as e:
        raise CliError(EXIT_USAGE, f"invalid generator settings: {e}") from None
    try:
        dataio.write_dataset(ds, args.out)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset to {args.out}: {e.strerror or e}") from None
    print(f"wrote {len(ds)} samples to {args.out} "
          f"(mllm argmax accuracy {float(ds.manifest['mllm_argmax_accuracy']):.4f})")
    return EXIT_OK


def cmd_default_config(args) -> int:
    sys.stdout.write(format_train_config(TrainConfig()))
    return EXIT_OK


def cmd_train(args) -> int:
    config = parse_train_config(read_kv(args.config))
    ds = _load_dataset(args.data)
    for s in ("train", "val"):
        _split_ids(ds, s)
    lines = []
    try:
        res = train(ds, config, log=lambda line: (lines.append(line), print(line)))
    except TrainingDiverged as e:
        raise CliError(EXIT_RUNTIME, str(e)) from None
    meta = {f"train.{f.name}": str(getattr(config, f.name)) for f in fields(config)}
    meta["train.best_epoch"] = str(res.best_epoch)
    meta["train.best_val_accuracy"] = repr(res.best_val_accuracy)
    _save_bundle(bundle_from_model(res.best, meta=meta), args.out)
    _write_text(args.history or args.out + ".history.txt", "".join(line + "\n" for line in lines))
    print(f"best val accuracy {res.best_val_accuracy:.4f} at epoch {res.best_epoch}; wrote {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    bundle = _load_bundle(args.bundle)
    if bundle.is_quantized:
        raise CliError(EXIT_USAGE, f"{args.bundle} is already quantized")
    if not 0 < args.alpha <= 1:
        raise CliError(EXIT_USAGE, "alpha must lie in (0, 1]")
    model = bundle.to_model()
    ds = _load_dataset(args.data)
    ids, arrays = _calibration_arrays(ds, args.samples, args.seed)
    stats = collect_calibration_stats(model, *arrays)
    lines = [f"alpha={args.alpha!r}", f"samples={len(ids)}", f"seed={args.seed}"]
    for name in stats.layer_names():
        q = layer_quantiles(name, stats, args.alpha)
        lines.append(f"layer.{name}=" + ",".join(repr(float(v)) for v in q))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"recorded {len(stats.layer_names())} layers from {len(ids)} samples into {args.out}")
    return EXIT_OK


def _read_stats(path, alpha):
    kv = read_kv(path)
    try:
        file_alpha = float(kv["alpha"])
    except (KeyError, ValueError):
        raise CliError(EXIT_USAGE, f"{path}: no valid alpha entry") from None
    if file_alpha != alpha:
        raise CliError(EXIT_USAGE, f"{path} was recorded at alpha={file_alpha}, policy wants {alpha}")
    try:
        return int(kv.get("samples", 0)), {k[6:]: np.array([float(t) for t in v.split(",")])
                                            for k, v in kv.items() if k.startswith("layer.")}
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"{path}: bad statistics entry: {e}") from None


def cmd_quantize(args) -> int:
    policy = parse_policy(read_kv(args.policy)) if args.policy else QuantPolicy()
    bundle = _load_bundle(args.bundle)
    if bundle.is_quantized:
        raise CliError(EXIT_USAGE, f"{args.bundle} is already quantized")
    model = bundle.to_model()
    if args.stats:
        n_samples, stats = _read_stats(args.stats, policy.alpha)
    else:
        ds = _load_dataset(args.data)
        ids, arrays = _calibration_arrays(ds, args.samples, args.seed)
        stats, n_samples = collect_calibration_stats(model, *arrays), len(ids)
    try:
        qm = apply_awq(model, stats, policy)
    except MissingStatsError as e:
        raise CliError(EXIT_RUNTIME, f"missing calibration statistics: {e}") from None
    except QuantizationError as e:
        raise CliError(EXIT_RUNTIME, str(e)) from None
    meta = dict(bundle.meta)
    meta.update({f"quant.{f.name}": str(getattr(policy, f.name)) for f in fields(policy)})
    meta["quant.alpha"] = repr(policy.alpha)
    meta["calib.samples"] = str(n_samples)
    meta["calib.seed"] = str(args.seed)
    out = bundle_from_model(model, qm.layers, meta)
    _save_bundle(out, args.out)
    before, after = payload_bytes(bundle), payload_bytes(out)
    print(f"quantized {len(qm.layers)} layers at {policy.bits} bits (alpha={policy.alpha})")
    print(f"size before: {before} bytes")
    print(f"size after:  {after} bytes")
    print(f"ratio: {before / after:.4f}")
    floored = {k: v for k, v in qm.degenerate.items() if v}
    if floored:
        print("channels with zero activation quantile: "
              + ", ".join(f"{k}={v}" for k, v in sorted(floored.items())))
    return EXIT_OK


def _predict(model, ds, ids):
    images, tokens, vectors, labels = dataio.preprocess_arrays(ds, ids)
    return predict_logits(model, images, tokens, vectors).argmax(axis=1), labels


def cmd_eval(args) -> int:
    bundle = _load_bundle(args.bundle)
    ds = _load_dataset(args.data)
    ids = _split_ids(ds, args.split)
    model = bundle.to_model()
    pred, labels = _predict(model, ds, ids)
    report = metrics_from_predictions(pred, labels, model.cfg.n_classes)
    records = [f"split={args.split}", f"samples={len(ids)}"] + report.records()
    if args.reference:
        ref = _load_bundle(args.reference)
        _check_compatible(ref, bundle)
        ref_pred, _ = _predict(ref.to_model(), ds, ids)
        records.append(f"agreement={float((ref_pred == pred).mean())!r}")
    print(report.table(list(dataio.CLASS_NAMES)))
    if args.reference:
        print(records[-1].replace("=", ": "))
    if args.records:
        _write_text(args.records, "".join(r + "\n" for r in records))
    return EXIT_OK


def _check_compatible(a, b):
    if a.config() != b.config() or a.shapes() != b.shapes():
        raise CliError(EXIT_USAGE, "bundles describe different architectures")


def report_table(fp_metrics, q_metrics, fp_bytes, q_bytes, agreement) -> str:
    rows = [
        ("Accuracy (%)", f"{100 * fp_metrics.accuracy:.2f}", f"{100 * q_metrics.accuracy:.2f}"),
        ("Precision (%)", f"{100 * fp_metrics.macro['precision']:.2f}", f"{100 * q_metrics.macro['precision']:.2f}"),
        ("Recall (%)", f"{100 * fp_metrics.macro['recall']:.2f}", f"{100 * q_metrics.macro['recall']:.2f}"),
        ("F1-score (%)", f"{100 * fp_metrics.macro['f1']:.2f}", f"{100 * q_metrics.macro['f1']:.2f}"),
        ("Model Size (MB)", f"{fp_bytes / 1e6:.4f}", f"{q_bytes / 1e6:.4f}"),
        ("Argmax agreement (%)", "100.00", f"{100 * agreement:.2f}"),
    ]
    w0 = max(len(r[0]) for r in rows + [("Metric",)])
    w1 = max(len("Full-Precision"), *(len(r[1]) for r in rows))
    w2 = max(len("AWQ-4bit"), *(len(r[2]) for r in rows))
    out = [f"{'Metric':<{w0}}  {'Full-Precision':>{w1}}  {'AWQ-4bit':>{w2}}"]
    out += [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}" for a, b, c in rows]
    out.append(f"Size ratio: {fp_bytes / q_bytes:.4f}")
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    fp, q = _load_bundle(args.fp), _load_bundle(args.q)
    _check_compatible(fp, q)
    ds = _load_dataset(args.data)
    ids = _split_ids(ds, args.split)
    fp_pred, labels = _predict(fp.to_model(), ds, ids)
    q_pred, _ = _predict(q.to_model(), ds, ids)
    text = report_table(metrics_from_predictions(fp_pred, labels), metrics_from_predictions(q_pred, labels),
                        payload_bytes(fp), payload_bytes(q), float((fp_pred == q_pred).mean()))
    _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmscene", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--per-class", type=int, default=100)
    g.set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("default-config", help="print the default training config")
    c.set_defaults(fn=cmd_default_config)

    t = sub.add_parser("train", help="train and save the best checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.set_defaults(fn=cmd_train)

    k = sub.add_parser("calibrate", help="record activation quantiles")
    k.add_argument("--bundle", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--alpha", type=float, default=0.99)
    k.add_argument("--samples", type=int, default=128)
    k.add_argument("--seed", type=int, default=42)
    k.set_defaults(fn=cmd_calibrate)

    q = sub.add_parser("quantize", help="write a mixed-precision bundle")
    q.add_argument("--bundle", required=True)
    q.add_argument("--data")
    q.add_argument("--policy")
    q.add_argument("--stats", help="quantiles from 'calibrate' instead of calibrating here")
    q.add_argument("--out", required=True)
    q.add_argument("--samples", type=int, default=128)
    q.add_argument("--seed", type=int, default=42)
    q.set_defaults(fn=cmd_quantize)

    e = sub.add_parser("eval", help="metrics on one split")
    e.add_argument("--bundle", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--reference", help="bundle to measure argmax agreement against")
    e.add_argument("--records", help="write metric=value lines here")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="full-precision vs quantized comparison table")
    r.add_argument("--fp", required=True)
    r.add_argument("--q", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="test", choices=SPLITS)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "quantize" and not args.stats and not args.data:
            raise CliError(EXIT_USAGE, "quantize needs --data or --stats")
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
