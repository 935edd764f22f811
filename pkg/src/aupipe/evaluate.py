"""Per-AU confusion counts, F1, and per-AU best-run ensembling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .core import AU_NAMES, INVALID, N_AUS, LabelledDataset, PredictionRun, align_keys
from .errors import AlignmentError, DataError, ShapeError
from .postprocess import binarize, smooth_run


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray


@dataclass(frozen=True)
class F1Report:
    per_au_f1: np.ndarray
    macro_f1: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "per_au_f1": {au: float(v) for au, v in zip(AU_NAMES, self.per_au_f1)},
            "macro_f1": float(self.macro_f1),
            "degenerate": list(self.degenerate),
        }

    def table(self) -> str:
        lines = [f"{au:<6} {v:.4f}" for au, v in zip(AU_NAMES, self.per_au_f1)]
        lines.append(f"macro  {self.macro_f1:.4f}")
        if self.degenerate:
            lines.append(f"F1 undefined (set to 0): {', '.join(self.degenerate)}")
        return "\n".join(lines)


def confusion_from_arrays(preds: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f"predictions {preds.shape} and labels {labels.shape} differ in shape")
    valid = labels != INVALID
    p = (preds == 1) & valid
    t = (labels == 1) & valid
    return ConfusionCounts(
        tp=(p & t).sum(axis=0),
        fp=(p & ~t & valid).sum(axis=0),
        fn=(~p & t).sum(axis=0),
        tn=(~p & ~t & valid).sum(axis=0),
    )


def confusion(preds: PredictionRun, truth: LabelledDataset, threshold: float = 0.0) -> ConfusionCounts:
    """Counts per AU over annotated frames; both sides must cover the same frames."""
    align_keys(truth.keys(), preds.keys())
    return confusion_from_arrays(binarize(preds.logits, threshold), truth.labels)


def f1(counts: ConfusionCounts) -> F1Report:
    denom = 2 * counts.tp + counts.fp + counts.fn
    scores = np.where(denom > 0, 2 * counts.tp / np.maximum(denom, 1), 0.0)
    n = len(scores)
    names = AU_NAMES if n == N_AUS else tuple(f"L{k + 1}" for k in range(n))
    degenerate = tuple(names[k] for k in np.flatnonzero(denom == 0))
    return F1Report(scores.astype(np.float64), float(scores.mean()), degenerate)


def evaluate_run(run: PredictionRun, truth: LabelledDataset, threshold: float = 0.0) -> F1Report:
    return f1(confusion(run, truth, threshold))


@dataclass(frozen=True)
class EnsembleSpec:
    choices: dict[str, str]  # AU name -> run name
    f1_table: dict[str, list[float]]  # run name -> per-AU F1 on the selection set

    def __post_init__(self):
        for au, name in self.choices.items():
            if name not in self.f1_table:
                raise DataError(f"{au} is assigned to {name!r}, which is missing from the F1 table")

    def to_json(self) -> str:
        blob = {
            "choices": {au: self.choices[au] for au in AU_NAMES},
            "f1_table": {
                name: {au: float(v) for au, v in zip(AU_NAMES, scores)}
                for name, scores in sorted(self.f1_table.items())
            },
        }
        return json.dumps(blob, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EnsembleSpec":
        blob = json.loads(text)
        table = {name: [float(row[au]) for au in AU_NAMES] for name, row in blob["f1_table"].items()}
        return cls(dict(blob["choices"]), table)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def _smoothed(runs: Mapping[str, PredictionRun], windows: Optional[Mapping[str, int]]):
    if not windows:
        return dict(runs)
    return {name: smooth_run(run, windows.get(name, 1)) for name, run in runs.items()}


def select_ensemble(
    runs: Mapping[str, PredictionRun],
    truth: LabelledDataset,
    windows: Optional[Mapping[str, int]] = None,
    threshold: float = 0.0,
) -> EnsembleSpec:
    """Pick, for every AU, the run with the highest F1 on ``truth``.

    Ties go to the lexicographically smallest run name.
    """
    if not runs:
        raise DataError("need at least one run to ensemble")
    runs = _smoothed(runs, windows)
    table = {name: [float(v) for v in evaluate_run(run, truth, threshold).per_au_f1] for name, run in runs.items()}
    choices = {}
    for k, au in enumerate(AU_NAMES):
        best = max(table[name][k] for name in table)
        choices[au] = min(name for name in table if table[name][k] == best)
    return EnsembleSpec(choices, table)


def apply_ensemble(
    spec: EnsembleSpec,
    runs: Mapping[str, PredictionRun],
    windows: Optional[Mapping[str, int]] = None,
) -> PredictionRun:
    """Assemble a run whose AU ``k`` column comes from the run chosen for AU ``k``."""
    missing = sorted({n for n in spec.choices.values() if n not in runs})
    if missing:
        raise DataError(f"ensemble spec refers to missing run(s): {', '.join(missing)}")
    runs = _smoothed(runs, windows)
    used = sorted(set(spec.choices.values()))
    ref = runs[used[0]]
    for name in used[1:]:
        try:
            align_keys(ref.keys(), runs[name].keys())
        except AlignmentError as exc:
            raise AlignmentError(f"run {name!r} is not frame-aligned with {used[0]!r}: {exc}") from None
    logits = np.empty_like(ref.logits)
    for k, au in enumerate(AU_NAMES):
        logits[:, k] = runs[spec.choices[au]].logits[:, k]
    return ref.with_logits(logits)
