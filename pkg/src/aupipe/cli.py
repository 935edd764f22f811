"""``aupipe`` command line interface.

Exit codes: 0 success, 1 usage error, 2 data or configuration error.
Logs go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import os

# pin BLAS to one thread before numpy loads so runs are reproducible bit-for-bit
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import load_config, stage_seed  # noqa: E402
import numpy as np  # noqa: E402

from .core import (  # noqa: E402
    LABEL_HEADER,
    PredictionRun,
    generate_synthetic,
    read_label_file,
    read_predictions,
    write_label_file,
    write_predictions,
)
from .errors import AUPipeError  # noqa: E402
from .evaluate import EnsembleSpec, apply_ensemble, evaluate_run, select_ensemble  # noqa: E402
from .imbalance import label_counts, resample  # noqa: E402
from .postprocess import check_window, smooth_run  # noqa: E402
from .trainer import Checkpoint, predict, train  # noqa: E402

logger = logging.getLogger("aupipe")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _cmd_stats(args) -> int:
    report = label_counts(read_label_file(args.data))
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.table())
    return 0


def _cmd_synth(args) -> int:
    cfg = load_config(args.config)
    synth_cfg = cfg.synth.model_copy(update={"seed": stage_seed(cfg.seed, "synth")})
    ds = generate_synthetic(synth_cfg)
    write_label_file(ds, args.out)
    if args.clean_out:
        write_label_file(ds.clean(), args.clean_out, include_features=False)
    logger.info("wrote %d frames to %s", len(ds), args.out)
    return 0


def _cmd_resample(args) -> int:
    cfg = load_config(args.config)
    update = {"seed": stage_seed(cfg.seed, "resample"), "enabled": True}
    if args.budget is not None:
        update["clone_budget"] = args.budget if args.budget.endswith("%") else int(args.budget)
    rs_cfg = cfg.resample.model_validate({**cfg.resample.model_dump(), **update})
    ds = read_label_file(args.data)
    out = resample(ds, rs_cfg)
    write_label_file(out, args.out)
    before, after = label_counts(ds).mean_ir, label_counts(out).mean_ir
    print(f"samples {len(ds)} -> {len(out)}; MeanIR {before:.4f} -> {after:.4f}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_ds = read_label_file(args.data)
    val_ds = read_label_file(args.val) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = Checkpoint.load(args.resume) if args.resume else None
    model_cfg = cfg.model.model_copy(update={"init_seed": stage_seed(cfg.seed, f"init:{args.name}")})
    result = train(
        train_ds, val_ds, model_cfg, cfg.optim, cfg.loss, cfg.sampler,
        stage_seed(cfg.seed, f"train:{args.name}"),
        resume=resume,
        on_epoch=lambda c: c.save(out / f"epoch_{c.epoch:02d}.ckpt"),
    )
    result.final.save(out / "final.ckpt")
    (out / "history.json").write_text(json.dumps([vars(r) for r in result.history], indent=2) + "\n")
    last = result.history[-1]
    if last.val_macro_f1 is not None:
        print(f"epoch {last.epoch}: val macro F1 {last.val_macro_f1:.4f}")
    return 0


def _cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    write_predictions(predict(ckpt, read_label_file(args.data)), args.out)
    return 0


def _cmd_smooth(args) -> int:
    check_window(args.window)
    write_predictions(smooth_run(read_predictions(getattr(args, "in")), args.window), args.out)
    return 0


def _read_run(path) -> PredictionRun:
    """Read a prediction file; a label file is accepted as hard +-1 logits."""
    with open(path) as fh:
        first = fh.readline().strip().split(",")
    if first[: len(LABEL_HEADER)] == list(LABEL_HEADER):
        ds = read_label_file(path)
        return PredictionRun(ds.video_ids, ds.frames, np.where(ds.labels == 1, 1.0, -1.0))
    return read_predictions(path)


def _cmd_eval(args) -> int:
    run = _read_run(args.pred)
    if args.window != 1:
        run = smooth_run(run, args.window)
    report = evaluate_run(run, read_label_file(args.truth), args.threshold)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.table())
    return 0


def _cmd_ensemble(args) -> int:
    check_window(args.window)
    paths = [p for p in args.runs.split(",") if p]
    runs = {}
    for p in paths:
        name = Path(p).stem
        if name in runs:
            raise AUPipeError(f"duplicate run name {name!r}")
        runs[name] = smooth_run(read_predictions(p), args.window)
    truth = read_label_file(args.truth)
    spec = select_ensemble(runs, truth, threshold=args.threshold)
    combined = apply_ensemble(spec, runs)
    write_predictions(combined, args.out)
    if args.spec_out:
        spec.save(args.spec_out)
    print(f"selection macro F1 {evaluate_run(combined, truth, args.threshold).macro_f1:.4f}")
    if args.report_truth:
        report = evaluate_run(combined, read_label_file(args.report_truth), args.threshold)
        print(f"report macro F1 {report.macro_f1:.4f}")
    return 0


def _cmd_apply(args) -> int:
    spec = EnsembleSpec.from_json(Path(args.spec).read_text())
    runs = {Path(p).stem: read_predictions(p) for p in args.runs.split(",") if p}
    write_predictions(apply_ensemble(spec, runs), args.out)
    return 0


def _cmd_repro(args) -> int:
    from .pipeline import run_repro

    cfg = load_config(args.config)
    summary = run_repro(cfg, args.out)
    for name, m in summary["models"].items():
        print(f"{name}: final val macro F1 {m['final_macro_f1_raw']:.4f} (smoothed {m['final_macro_f1_smoothed']:.4f})")
    print(f"best single run macro F1 {summary['best_single_run_macro_f1']:.4f}")
    print(f"ensemble macro F1 {summary['ensemble']['macro_f1']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aupipe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("stats", help="label counts, IRLbl and MeanIR")
    s.add_argument("--data", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=_cmd_stats)

    s = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--clean-out", help="also write the flicker-free labels here")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("resample", help="ML-ROS (or manual table) resampling")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--budget", help="clone budget, e.g. 250 or 25%%")
    s.set_defaults(func=_cmd_resample)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--val")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="m1", help="model name, keys the derived seeds")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("predict", help="write raw logits for a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_predict)

    s = sub.add_parser("smooth", help="sliding-window smoothing of logits")
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--in", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_smooth)

    s = sub.add_parser("eval", help="per-AU and macro F1")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--window", type=int, default=1)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("ensemble", help="per-AU best-run ensemble")
    s.add_argument("--runs", required=True, help="comma-separated prediction files")
    s.add_argument("--truth", required=True, help="selection set labels")
    s.add_argument("--out", required=True)
    s.add_argument("--spec-out")
    s.add_argument("--report-truth", help="separate labels to report the ensemble on")
    s.add_argument("--window", type=int, default=1, help="smooth every run before selection")
    s.add_argument("--threshold", type=float, default=0.0)
    s.set_defaults(func=_cmd_ensemble)

    s = sub.add_parser("apply-ensemble", help="apply a saved ensemble spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_apply)

    s = sub.add_parser("repro", help="synth -> resample -> train -> predict -> smooth -> eval -> ensemble")
    s.add_argument("--config", help="pipeline config JSON (default: packaged desk-scale config)")
    s.add_argument("--out", help="output directory (default: paths.out_dir)")
    s.set_defaults(func=_cmd_repro)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (AUPipeError, ValueError, OSError, KeyError) as exc:
        print(f"aupipe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())
