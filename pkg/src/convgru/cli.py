"""Command-line entry point.

Subcommands: gradcheck, synth, trace-shapes, train, eval, robustness,
featmaps. Exit codes: 0 success, 1 validation/usage error, 2
runtime/numerical error. ``CONVGRU_OUT_ROOT`` provides a default output
root when --out is omitted. Run configs are JSON documents with "model"
and "train" sections (unknown keys rejected) and are echoed into the
output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np

from . import checkpoint, datapipe as dp, models, synthgen, trainer
from .errors import NumericalError, ValidationError
from .gradcheck import run_suite
from .models import Architecture, ModelConfig
from .trainer import TrainConfig

log = logging.getLogger("convgru")

ARCH_ALIASES = {
    "spatial": Architecture.SPATIAL_ONLY,
    "spatial_only": Architecture.SPATIAL_ONLY,
    "gru_alexnet": Architecture.GRU_ALEXNET,
    "convgru1d": Architecture.CONVGRU_1D,
    "convgru_1d": Architecture.CONVGRU_1D,
    "convgru2d": Architecture.CONVGRU_2D,
    "convgru_2d": Architecture.CONVGRU_2D,
    "convgru2d2": Architecture.CONVGRU_2D2,
    "convgru_2d2": Architecture.CONVGRU_2D2,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        raise ValidationError(message)


def _arch(name: str) -> Architecture:
    key = name.lower().replace("-", "_")
    if key not in ARCH_ALIASES:
        raise ValidationError(f"unknown architecture {name!r}; choose from {sorted(set(ARCH_ALIASES))}")
    return ARCH_ALIASES[key]


def _out_dir(value, command: str) -> Path:
    if value:
        return Path(value)
    root = os.environ.get("CONVGRU_OUT_ROOT")
    if not root:
        raise ValidationError(f"--out is required (or set CONVGRU_OUT_ROOT) for {command}")
    return Path(root) / command


def _parse_levels(text: str) -> list[int]:
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError as e:
        raise ValidationError(f"cannot parse levels {text!r}: {e}") from e


def _load_run_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}")
    known = {"model", "train", "data", "out", "seeds"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    # duplicated knobs in the train section resolve into the model config
    if train_cfg.fusion is not None:
        model_cfg.fusion = models.FusionMethod(train_cfg.fusion)
    if train_cfg.keep_prob is not None:
        model_cfg.dropout = train_cfg.keep_prob
        model_cfg.dropout_is_keep_prob = True
    if model_cfg.architecture is Architecture.GRU_ALEXNET:
        model_cfg.fusion = models.FusionMethod.FLAT
    return model_cfg, train_cfg, doc


def _echo_config(out: Path, model_cfg: ModelConfig, train_cfg: TrainConfig, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": doc.get("data"),
        "out": str(out),
        "seeds": doc.get("seeds", {}),
    }
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, eps=args.eps, quick=args.quick)
    failures = [r for r in results if not r.passed(args.tol)]
    for r in results:
        print(f"{'PASS' if r.passed(args.tol) else 'FAIL'} {r.name:40s} max_rel_err={r.max_rel_error:.3e}")
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_error)
        print(f"FAILED: {len(failures)} checks above tol={args.tol:g}; worst {worst.name} at {worst.max_rel_error:.3e}")
        return 2
    print(f"all {len(results)} checks passed at tol={args.tol:g}")
    return 0


def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise ValidationError("--per-class must be >= 1")
    spec = synthgen.SynthSpec(mode=args.mode, resolution=args.res, participants=args.participants,
                              start=args.start)
    out = _out_dir(args.out, "synth")
    synthgen.generate_dataset(spec, args.per_class, out, seed=args.seed)
    dataset = dp.Dataset(out)  # validates the manifest and layout
    print(f"wrote {len(dataset)} trials to {out}")
    return 0


def cmd_trace_shapes(args) -> int:
    cfg = ModelConfig(architecture=_arch(args.arch), input_size=args.input, width_div=args.width_div)
    if cfg.architecture is Architecture.GRU_ALEXNET:
        cfg.fusion = models.FusionMethod.FLAT
    trace = models.trace_shapes(cfg)
    counts = models.layer_parameter_counts(cfg)
    total = sum(counts.values())
    for e in trace.entries:
        shape = "x".join(str(v) for v in e.shape)
        extra = f"  params={counts[e.name]:,}" if e.name in counts else ""
        print(f"{e.index:>2} {e.name:10s} {e.kind:8s} {shape}{extra}")
    print(f"total parameters: {total:,}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, doc = _load_run_config(args.config)
    data_root = args.data or doc.get("data")
    if not data_root:
        raise ValidationError("no dataset: pass --data or put \"data\" in the config")
    dataset = dp.Dataset(data_root)
    out = _out_dir(args.out or doc.get("out"), "train")
    _echo_config(out, model_cfg, train_cfg, doc)
    if args.workers == 1:
        train_cfg.strict_repro = True
    split_seed = int(doc.get("seeds", {}).get("split", 0))
    train_trials, test_trials = dp.split(dataset.trials, np.random.default_rng(split_seed))
    summary = ["run,final_test_acc,best_test_acc,best_epoch,epochs"]
    finals = []
    for run in range(args.runs):
        run_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": train_cfg.seed + run})
        run_model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": model_cfg.seed + run})
        model = models.build(run_model_cfg)
        run_dir = out / f"run_{run}" if args.runs > 1 else out
        result = trainer.train(model, dataset, run_cfg, out_dir=run_dir,
                               train_trials=train_trials, test_trials=test_trials)
        # record the split provenance so eval can reproduce the reported accuracy
        for name in ("final", "best"):
            if name in result.files:
                m = checkpoint.load(result.files[name])
                extra = dict(m.checkpoint_extra)
                extra.update({"split_seed": split_seed, "scheme_id": run_cfg.scheme_id})
                checkpoint.save(m, result.files[name], extra=extra)
        finals.append(result.final_test_acc)
        summary.append(f"{run},{result.final_test_acc:.6f},{result.best_test_acc:.6f},"
                       f"{result.best_epoch},{result.metrics[-1].epoch}")
        print(f"run {run}: final test acc {result.final_test_acc:.4f} "
              f"(best {result.best_test_acc:.4f} @ epoch {result.best_epoch})")
    summary.append(f"mean,{np.mean(finals):.6f},,,")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    print(f"mean final test acc over {args.runs} run(s): {np.mean(finals):.4f}")
    return 0


def _load_checkpoint_and_data(args) -> tuple[models.Model, dp.Dataset, int, int]:
    model = checkpoint.load(args.checkpoint)
    dataset = dp.Dataset(args.data)
    extra = getattr(model, "checkpoint_extra", {})
    scheme_id = args.scheme if args.scheme is not None else int(extra.get("scheme_id", 1))
    split_seed = args.split_seed if args.split_seed is not None else int(extra.get("split_seed", 0))
    return model, dataset, scheme_id, split_seed


def cmd_eval(args) -> int:
    model, dataset, scheme_id, split_seed = _load_checkpoint_and_data(args)
    _, test_trials = dp.split(dataset.trials, np.random.default_rng(split_seed))
    result = trainer.evaluate(model, dataset, test_trials, scheme_id)
    print(f"test accuracy: {result.accuracy:.6f} over {result.n_trials} trials (scheme {scheme_id})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.csv").write_text(trainer.confusion_csv(result.confusion))
        (out / "accuracy.txt").write_text(f"{result.accuracy:.6f}\n")
        print(f"wrote {out / 'confusion.csv'}")
    return 0


def cmd_robustness(args) -> int:
    model, dataset, scheme_id, split_seed = _load_checkpoint_and_data(args)
    _, test_trials = dp.split(dataset.trials, np.random.default_rng(split_seed))
    levels = _parse_levels(args.levels)
    for level in levels:
        if level != 0:
            dp.PerturbationSpec(args.kind, level)  # range check before any work
    rows = trainer.robustness_eval(model, dataset, test_trials, scheme_id,
                                   args.kind, levels, repeats=args.repeats, seed=args.seed)
    csv_text = trainer.robustness_csv(rows)
    print(csv_text, end="")
    out = _out_dir(args.out, "robustness") if (args.out or os.environ.get("CONVGRU_OUT_ROOT")) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"robustness_{args.kind}.csv").write_text(csv_text)
    return 0


def cmd_featmaps(args) -> int:
    model = checkpoint.load(args.checkpoint)
    dataset = dp.Dataset(args.data)
    extra = getattr(model, "checkpoint_extra", {})
    scheme_id = args.scheme if args.scheme is not None else int(extra.get("scheme_id", 1))
    if args.trial:
        matches = [t for t in dataset.trials if t.path == args.trial or t.trial == args.trial]
        if not matches:
            raise ValidationError(f"trial {args.trial!r} not in dataset")
        info = matches[0]
    else:
        info = dataset.trials[0]
    cfg = dataset.preprocess_config(model.config.input_size)
    clips = dp.build_test_clips(dataset, info, dp.get_scheme(scheme_id), cfg)
    images = models.export_feature_maps(model, clips[0], args.layer)
    out = _out_dir(args.out, "featmaps")
    out.mkdir(parents=True, exist_ok=True)
    for (t, c), img in images.items():
        cv2.imwrite(str(out / f"{args.layer}_t{t}_c{c}.png"), img)
    print(f"wrote {len(images)} maps for layer {args.layer} of trial {info.path} to {out}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="convgru", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference verification of every gradient path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--quick", action="store_true", help="numeric kernels only")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic pitch-like dataset")
    s.add_argument("--mode", choices=["pose", "motion"], default="pose")
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--res", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--participants", type=int, default=1)
    s.add_argument("--start", type=int, default=None, help="fixed planted start frame (default: random)")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("trace-shapes", help="print the layer-by-layer shape trace")
    t.add_argument("--arch", required=True)
    t.add_argument("--input", type=int, default=224)
    t.add_argument("--width-div", type=int, default=1)
    t.set_defaults(func=cmd_trace_shapes)

    tr = sub.add_parser("train", help="train a model from a JSON run config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", default=None)
    tr.add_argument("--out", default=None)
    tr.add_argument("--runs", type=int, default=1)
    tr.add_argument("--workers", type=int, default=0,
                    help="1 forces strict single-worker reproducibility (zeroed timings)")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scheme", type=int, default=None)
    e.add_argument("--split-seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("robustness", help="perturbation sweep over a trained checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--kind", choices=["frame_rate", "missing", "position"], required=True)
    r.add_argument("--levels", default="1..5", help="e.g. 1..5 or 0,1,5")
    r.add_argument("--repeats", type=int, default=3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--scheme", type=int, default=None)
    r.add_argument("--split-seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_robustness)

    f = sub.add_parser("featmaps", help="export per-channel feature maps as PNGs")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--trial", default=None, help="trial path or id (default: first trial)")
    f.add_argument("--layer", default="conv1")
    f.add_argument("--scheme", type=int, default=None)
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_featmaps)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CONVGRU_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
