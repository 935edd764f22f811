"""End-to-end ``repro`` run: synth, resample, train, predict, smooth, eval, ensemble."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .config import PipelineConfig, dump_config, stage_seed
from .core import AU_NAMES, generate_synthetic, split_by_video, write_label_file, write_predictions
from .evaluate import apply_ensemble, evaluate_run, select_ensemble
from .imbalance import label_counts, resample
from .postprocess import smooth_run
from .trainer import config_fingerprint, predict, train

logger = logging.getLogger(__name__)


def _write_json(path: Path, blob) -> None:
    path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")


def run_repro(cfg: PipelineConfig, out_dir: str | Path | None = None) -> dict:
    out = Path(out_dir if out_dir is not None else cfg.paths.out_dir)
    dirs = {k: out / k for k in ("data", "models", "preds/raw", "preds/smoothed", "ensemble")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))

    synth_cfg = cfg.synth.model_copy(update={"seed": stage_seed(cfg.seed, "synth")})
    full = generate_synthetic(synth_cfg)
    train_ds, val_ds = split_by_video(full, cfg.val_fraction, stage_seed(cfg.seed, "split"))
    truth = val_ds.clean()
    write_label_file(full, dirs["data"] / "full.csv")
    write_label_file(train_ds, dirs["data"] / "train.csv")
    write_label_file(val_ds, dirs["data"] / "val.csv")
    write_label_file(truth, dirs["data"] / "val_truth.csv", include_features=False)
    logger.info("synthetic corpus: %d train / %d val frames", len(train_ds), len(val_ds))

    before = label_counts(train_ds)
    rs_cfg = cfg.resample.model_copy(update={"seed": stage_seed(cfg.seed, "resample")})
    train_rs = resample(train_ds, rs_cfg)
    after = label_counts(train_rs)
    write_label_file(train_rs, dirs["data"] / "train_resampled.csv")
    _write_json(out / "imbalance.json", {"before": before.to_dict(), "after": after.to_dict()})
    logger.info("MeanIR %.4f -> %.4f (%d -> %d samples)", before.mean_ir, after.mean_ir, len(train_ds), len(train_rs))

    raw_runs, model_summaries = {}, {}
    for m in range(1, cfg.n_models + 1):
        name = f"m{m}"
        model_cfg = cfg.model.model_copy(update={"init_seed": stage_seed(cfg.seed, f"init:{name}")})
        result = train(train_rs, val_ds, model_cfg, cfg.optim, cfg.loss, cfg.sampler, stage_seed(cfg.seed, f"train:{name}"))
        mdir = dirs["models"] / name
        mdir.mkdir(exist_ok=True)
        for ckpt in result.checkpoints:
            ckpt.save(mdir / f"epoch_{ckpt.epoch:02d}.ckpt")
            run_name = f"{name}_e{ckpt.epoch:02d}"
            raw_runs[run_name] = predict(ckpt, val_ds)
            write_predictions(raw_runs[run_name], dirs["preds/raw"] / f"{run_name}.csv")
        result.final.save(mdir / "final.ckpt")
        _write_json(mdir / "history.json", [vars(r) for r in result.history])
        final_run = raw_runs[f"{name}_e{result.final.epoch:02d}"]
        model_summaries[name] = {
            "history_val_macro_f1": [r.val_macro_f1 for r in result.history],
            "final_macro_f1_raw": evaluate_run(final_run, truth, cfg.threshold).macro_f1,
            "final_macro_f1_smoothed": evaluate_run(smooth_run(final_run, cfg.smooth_window), truth, cfg.threshold).macro_f1,
        }

    smoothed_runs = {n: smooth_run(r, cfg.smooth_window) for n, r in raw_runs.items()}
    for n, r in smoothed_runs.items():
        write_predictions(r, dirs["preds/smoothed"] / f"{n}.csv")
    if cfg.smooth_before_ensemble:
        candidates = {f"{n}_w{cfg.smooth_window}": r for n, r in smoothed_runs.items()}
        if cfg.ensemble_include_raw and cfg.smooth_window != 1:
            candidates.update({f"{n}_w1": r for n, r in raw_runs.items()})
        spec = select_ensemble(candidates, truth, threshold=cfg.threshold)
        combined = apply_ensemble(spec, candidates)
    else:
        candidates = raw_runs
        spec = select_ensemble(candidates, truth, threshold=cfg.threshold)
        combined = smooth_run(apply_ensemble(spec, candidates), cfg.smooth_window)
    write_predictions(combined, dirs["ensemble"] / "combined.csv")
    spec.save(dirs["ensemble"] / "spec.json")

    ens_report = evaluate_run(combined, truth, cfg.threshold)
    single_best = max(sum(scores) / len(scores) for scores in spec.f1_table.values())
    summary = {
        "config_fingerprint": config_fingerprint(cfg.model, cfg.optim, cfg.loss),
        "n_train": len(train_ds),
        "n_train_resampled": len(train_rs),
        "n_val": len(val_ds),
        "mean_ir_before": before.mean_ir,
        "mean_ir_after": after.mean_ir,
        "models": model_summaries,
        "ensemble": {
            "macro_f1": ens_report.macro_f1,
            "per_au_f1": dict(zip(AU_NAMES, ens_report.per_au_f1.tolist())),
            "choices": spec.choices,
        },
        "best_single_run_macro_f1": single_best,
    }
    _write_json(out / "summary.json", summary)
    return summary
