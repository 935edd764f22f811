"""Label-imbalance statistics, ML-ROS oversampling and bucketed batch sampling."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .core import AU_NAMES, N_AUS, LabelledDataset, au_index
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

OVERSAMPLE_AUS = ("AU2", "AU15", "AU23", "AU24", "AU26")
DOWNSAMPLE_AUS = ("AU1", "AU4", "AU6", "AU7", "AU10", "AU12", "AU25")


@dataclass(frozen=True)
class ImbalanceReport:
    pos_counts: np.ndarray
    neg_counts: np.ndarray
    irlbl: np.ndarray
    mean_ir: float
    label_names: tuple[str, ...] = AU_NAMES

    @property
    def zero_positive(self) -> list[str]:
        """Labels with no positive example (their IRLbl is +inf)."""
        return [n for n, c in zip(self.label_names, self.pos_counts) if c == 0]

    def to_dict(self) -> dict:
        return {
            "labels": list(self.label_names),
            "pos_counts": [int(c) for c in self.pos_counts],
            "neg_counts": [int(c) for c in self.neg_counts],
            "irlbl": [None if math.isinf(r) else float(r) for r in self.irlbl],
            "mean_ir": float(self.mean_ir),
            "zero_positive": self.zero_positive,
        }

    def table(self) -> str:
        lines = [f"{'label':<6} {'pos':>7} {'neg':>7} {'IRLbl':>9}"]
        for name, p, n, r in zip(self.label_names, self.pos_counts, self.neg_counts, self.irlbl):
            ir = "inf" if math.isinf(r) else f"{r:.3f}"
            lines.append(f"{name:<6} {int(p):>7d} {int(n):>7d} {ir:>9}")
        lines.append(f"MeanIR {self.mean_ir:.4f}")
        if self.zero_positive:
            lines.append(f"no positives: {', '.join(self.zero_positive)}")
        return "\n".join(lines)


def imbalance_ratios(pos_counts: np.ndarray) -> tuple[np.ndarray, float]:
    """IRLbl per label and their mean over the finite entries."""
    pos = np.asarray(pos_counts, dtype=np.float64)
    irlbl = np.full(pos.shape, np.inf)
    nz = pos > 0
    if nz.any():
        irlbl[nz] = pos.max() / pos[nz]
        mean_ir = float(irlbl[nz].mean())
    else:
        mean_ir = 1.0
    return irlbl, mean_ir


def report_from_labels(labels: np.ndarray, names: tuple[str, ...] | None = None) -> ImbalanceReport:
    labels = np.asarray(labels)
    pos = (labels == 1).sum(axis=0).astype(np.int64)
    neg = (labels == 0).sum(axis=0).astype(np.int64)
    irlbl, mean_ir = imbalance_ratios(pos)
    if names is None:
        names = AU_NAMES if labels.shape[1] == N_AUS else tuple(f"L{k + 1}" for k in range(labels.shape[1]))
    return ImbalanceReport(pos, neg, irlbl, mean_ir, names)


def label_counts(ds: LabelledDataset) -> ImbalanceReport:
    if len(ds) == 0:
        raise DataError("cannot count labels of an empty dataset")
    report = report_from_labels(ds.labels)
    if report.zero_positive:
        logger.warning("labels without positives (IRLbl = inf): %s", ", ".join(report.zero_positive))
    return report


# ---------------------------------------------------------------------------
# ML-ROS

_PERCENT = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*%\s*$")


class ResampleConfig(BaseModel):
    """Resampling options.

    ``clone_budget`` is an absolute clone count or a percentage string such
    as ``"25%"`` of the dataset size. The ``manual_*`` fields drive the
    optional per-AU repeat / keep-probability table.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = True
    clone_budget: Union[int, str] = "25%"
    seed: int = 0
    manual: bool = False
    oversample_aus: tuple[str, ...] = OVERSAMPLE_AUS
    downsample_aus: tuple[str, ...] = DOWNSAMPLE_AUS
    repeat: int = Field(2, ge=1)
    keep_prob: float = Field(0.5, gt=0.0, le=1.0)

    @field_validator("clone_budget")
    @classmethod
    def _budget(cls, v):
        if isinstance(v, str):
            m = _PERCENT.match(v)
            if not m or float(m.group(1)) <= 0:
                raise ValueError(f"clone_budget {v!r} must be a positive integer or a percentage like '25%'")
        elif v <= 0:
            raise ValueError("clone_budget must be > 0")
        return v

    @field_validator("oversample_aus", "downsample_aus")
    @classmethod
    def _aus(cls, v):
        for name in v:
            if name not in AU_NAMES:
                raise ValueError(f"unknown action unit {name!r}")
        return v

    def resolve_budget(self, n_samples: int) -> int:
        if isinstance(self.clone_budget, str):
            pct = float(_PERCENT.match(self.clone_budget).group(1))
            return int(n_samples * pct / 100.0)
        return int(self.clone_budget)


@dataclass(frozen=True)
class CloneStep:
    """One ML-ROS iteration: the bag served, the sample cloned, the bag's IRLbl afterwards."""

    label: int
    source: int
    irlbl_after: float
    retired: bool


@dataclass
class MLROSResult:
    sources: list[int] = field(default_factory=list)
    trace: list[CloneStep] = field(default_factory=list)
    mean_ir: float = 1.0
    minority_labels: list[int] = field(default_factory=list)


def ml_ros_plan(labels: np.ndarray, budget: int, rng: np.random.Generator) -> MLROSResult:
    """Run ML-ROS on a label matrix and return which rows to clone.

    MeanIR is frozen on the input. Minority bags (IRLbl > MeanIR) are served
    round-robin; each turn clones one uniformly drawn original sample from the
    bag, then retires the bag once its IRLbl drops to MeanIR or below.
    Comparisons use exact rationals so ties behave deterministically.
    """
    labels = np.asarray(labels)
    positive = labels == 1
    pos = [int(c) for c in positive.sum(axis=0)]
    n_labels = len(pos)
    finite = [c for c in pos if c > 0]
    result = MLROSResult()
    if not finite:
        return result
    top = max(pos)
    mean_ir = sum(Fraction(top, c) for c in finite) / len(finite)
    result.mean_ir = float(mean_ir)
    bags = [k for k in range(n_labels) if pos[k] > 0 and Fraction(top, pos[k]) > mean_ir]
    result.minority_labels = list(bags)
    members = {k: np.flatnonzero(positive[:, k]) for k in bags}

    active = list(bags)
    remaining = budget
    while remaining > 0 and active:
        for k in list(active):
            src = int(members[k][rng.integers(len(members[k]))])
            result.sources.append(src)
            for j in np.flatnonzero(positive[src]):
                pos[j] += 1
            top = max(pos)
            ir = Fraction(top, pos[k])
            retired = ir <= mean_ir
            if retired:
                active.remove(k)
            result.trace.append(CloneStep(k, src, float(ir), retired))
            remaining -= 1
            if remaining == 0:
                break
    return result


def ml_ros(ds: LabelledDataset, cfg: ResampleConfig) -> LabelledDataset:
    """Return ``ds`` plus ML-ROS clones; clone ids get a ``#cloneN`` suffix."""
    budget = cfg.resolve_budget(len(ds))
    if budget < 1:
        raise ConfigError(f"clone budget resolves to {budget} clones for {len(ds)} samples")
    plan = ml_ros_plan(ds.labels, budget, np.random.default_rng(cfg.seed))
    if not plan.minority_labels:
        logger.info("ML-ROS: no label has IRLbl above MeanIR, nothing to do")
        return ds
    logger.info(
        "ML-ROS: MeanIR %.4f, minority labels %s, %d clones",
        plan.mean_ir,
        ", ".join(AU_NAMES[k] for k in plan.minority_labels),
        len(plan.sources),
    )
    return append_clones(ds, plan.sources)


def append_clones(ds: LabelledDataset, sources) -> LabelledDataset:
    src = np.asarray(sources, dtype=np.int64)
    if src.size == 0:
        return ds
    clone_ids = [f"{ds.video_ids[s]}#clone{n}" for n, s in enumerate(src.tolist(), start=1)]
    clean = None
    if ds.clean_labels is not None:
        clean = np.concatenate([ds.clean_labels, ds.clean_labels[src]])
    return LabelledDataset(
        np.concatenate([ds.video_ids, np.asarray(clone_ids, dtype=str)]),
        np.concatenate([ds.frames, ds.frames[src]]),
        np.concatenate([ds.labels, ds.labels[src]]),
        np.concatenate([ds.features, ds.features[src]]),
        clean,
    )


def manual_resample(ds: LabelledDataset, cfg: ResampleConfig) -> LabelledDataset:
    """Per-AU repeat / keep table.

    A sample positive for any ``oversample_aus`` entry is repeated ``repeat``
    times in total. Otherwise, a sample positive for some ``downsample_aus``
    entry is kept with probability ``keep_prob``. All other samples are kept.
    """
    rng = np.random.default_rng(cfg.seed)
    over = [au_index(a) for a in cfg.oversample_aus]
    down = [au_index(a) for a in cfg.downsample_aus]
    pos = ds.labels == 1
    is_over = pos[:, over].any(axis=1) if over else np.zeros(len(ds), bool)
    is_down = (pos[:, down].any(axis=1) if down else np.zeros(len(ds), bool)) & ~is_over
    keep = ~is_down | (rng.random(len(ds)) < cfg.keep_prob)
    kept = ds.take(np.flatnonzero(keep))
    reps = np.flatnonzero(is_over[keep])
    extra = np.repeat(reps, cfg.repeat - 1)
    return append_clones(kept, np.sort(extra))


def resample(ds: LabelledDataset, cfg: ResampleConfig) -> LabelledDataset:
    if not cfg.enabled:
        return ds
    if cfg.manual:
        return manual_resample(ds, cfg)
    return ml_ros(ds, cfg)


# ---------------------------------------------------------------------------
# Batch sampling

N_BUCKETS = 2 * N_AUS


@dataclass(frozen=True)
class BatchPlan:
    """Per-AU positive/negative index buckets.

    ``buckets[2 * k]`` holds samples with AU ``k`` positive and
    ``buckets[2 * k + 1]`` those with AU ``k`` negative.
    """

    batch_size: int
    n_samples: int
    buckets: tuple[np.ndarray, ...]
    infeasible_buckets: tuple[tuple[str, str], ...]

    def bucket(self, au: int | str, polarity: str) -> np.ndarray:
        k = au_index(au) if isinstance(au, str) else au
        return self.buckets[2 * k + (0 if polarity == "positive" else 1)]


def build_batch_plan(ds: LabelledDataset, batch_size: int) -> BatchPlan:
    if batch_size < N_BUCKETS:
        raise ConfigError(f"batch_size must be >= {N_BUCKETS} for bucketed sampling, got {batch_size}")
    buckets, infeasible = [], []
    for k, name in enumerate(AU_NAMES):
        for value, polarity in ((1, "positive"), (0, "negative")):
            idx = np.flatnonzero(ds.labels[:, k] == value)
            idx.setflags(write=False)
            buckets.append(idx)
            if idx.size == 0:
                infeasible.append((name, polarity))
    return BatchPlan(batch_size, len(ds), tuple(buckets), tuple(infeasible))


def balanced_batches(plan: BatchPlan, n_batches: int, seed, *, log_gaps: bool = True) -> Iterator[np.ndarray]:
    """Yield ``n_batches`` index arrays of exactly ``plan.batch_size`` entries.

    The first slots take one draw from every non-empty bucket, the rest are
    uniform over the dataset. Draws are with replacement.
    """
    if n_batches < 1:
        raise ConfigError("n_batches must be >= 1")
    if plan.infeasible_buckets and log_gaps:
        logger.warning(
            "no samples for bucket(s) %s; batches carry no guarantee for them",
            ", ".join(f"{au}/{pol}" for au, pol in plan.infeasible_buckets),
        )
    rng = np.random.default_rng(seed)
    feasible = [b for b in plan.buckets if b.size]
    n_fill = plan.batch_size - len(feasible)
    for _ in range(n_batches):
        reserved = [b[rng.integers(b.size)] for b in feasible]
        fill = rng.integers(0, plan.n_samples, size=n_fill)
        yield np.concatenate([np.asarray(reserved, dtype=np.int64), fill])


def epoch_batches(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)
