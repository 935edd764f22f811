"""Data model, CSV ingestion/emission, synthetic data and video-level splits.

Labels are stored as ``int8`` matrices in the fixed AU order of
:data:`AU_NAMES`; ``-1`` (:data:`INVALID`) marks an unannotated entry that
every loss and metric ignores.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import (
    AlignmentError,
    DataError,
    DuplicateKeyError,
    FormatError,
    LabelValueError,
    SplitError,
)

logger = logging.getLogger(__name__)

AU_NAMES: tuple[str, ...] = (
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
    "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
)
N_AUS = len(AU_NAMES)
INVALID = -1

LABEL_HEADER = ("video_id", "frame") + AU_NAMES
PREDICTION_HEADER = ("video_id", "frame") + tuple(f"{au}_logit" for au in AU_NAMES)


def au_index(name: str) -> int:
    try:
        return AU_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown action unit {name!r}; expected one of {', '.join(AU_NAMES)}") from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _sorted_order(video_ids: np.ndarray, frames: np.ndarray) -> np.ndarray:
    return np.lexsort((frames, video_ids))


def _check_unique_keys(video_ids: np.ndarray, frames: np.ndarray) -> None:
    # assumes rows already sorted by (video_id, frame)
    if len(frames) < 2:
        return
    dup = (video_ids[1:] == video_ids[:-1]) & (frames[1:] == frames[:-1])
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise DuplicateKeyError(
            f"duplicate (video_id, frame) key ({video_ids[i]!s}, {int(frames[i])})"
        )


@dataclass(frozen=True)
class Sample:
    video_id: str
    frame_idx: int
    features: np.ndarray
    labels: np.ndarray


class LabelledDataset:
    """Immutable, array-backed collection of labelled frames.

    Rows are kept in ``(video_id, frame)`` lexicographic order unless the
    dataset was produced by :meth:`shuffled`. ``features`` may have zero
    columns when only labels were loaded. ``clean_labels`` optionally carries
    the noise-free annotation of synthetic data.
    """

    def __init__(
        self,
        video_ids: Sequence[str] | np.ndarray,
        frames: Sequence[int] | np.ndarray,
        labels: np.ndarray,
        features: np.ndarray | None = None,
        clean_labels: np.ndarray | None = None,
        *,
        sort: bool = True,
    ) -> None:
        video_ids = np.asarray(video_ids, dtype=str).reshape(-1)
        frames = np.asarray(frames, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels)
        n = len(video_ids)
        if labels.size == 0:
            labels = labels.reshape(0, N_AUS)
        if labels.shape != (n, N_AUS):
            raise DataError(f"labels must have shape ({n}, {N_AUS}), got {labels.shape}")
        if len(frames) != n:
            raise DataError(f"{len(frames)} frame indices for {n} samples")
        if n and frames.min() < 0:
            raise DataError("frame indices must be non-negative")
        if not np.isin(labels, (INVALID, 0, 1)).all():
            raise LabelValueError("label values must be 0, 1 or -1 (INVALID)")
        labels = labels.astype(np.int8)
        if features is None:
            features = np.zeros((n, 0))
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise DataError(f"features must be a 2-D array with {n} rows, got {features.shape}")
        if clean_labels is not None:
            clean_labels = np.asarray(clean_labels).astype(np.int8)
            if clean_labels.shape != labels.shape:
                raise DataError("clean_labels must match labels in shape")

        order = _sorted_order(video_ids, frames)
        _check_unique_keys(video_ids[order], frames[order])
        if sort:
            video_ids, frames, labels, features = (
                video_ids[order], frames[order], labels[order], features[order]
            )
            if clean_labels is not None:
                clean_labels = clean_labels[order]

        self.video_ids = _frozen(np.array(video_ids))
        self.frames = _frozen(np.array(frames))
        self.labels = _frozen(np.array(labels))
        self.features = _frozen(np.array(features))
        self.clean_labels = None if clean_labels is None else _frozen(np.array(clean_labels))

    au_names = AU_NAMES

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean matrix, True where the label is annotated."""
        return self.labels != INVALID

    def __len__(self) -> int:
        return len(self.video_ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(str(self.video_ids[i]), int(self.frames[i]), self.features[i], self.labels[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def keys(self) -> list[tuple[str, int]]:
        return list(zip(self.video_ids.tolist(), self.frames.tolist()))

    def videos(self) -> list[str]:
        return sorted(set(self.video_ids.tolist()))

    def take(self, indices: Sequence[int] | np.ndarray, *, sort: bool = True) -> "LabelledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabelledDataset(
            self.video_ids[idx],
            self.frames[idx],
            self.labels[idx],
            self.features[idx],
            None if self.clean_labels is None else self.clean_labels[idx],
            sort=sort,
        )

    def shuffled(self, seed: int) -> "LabelledDataset":
        perm = np.random.default_rng(seed).permutation(len(self))
        return self.take(perm, sort=False)

    def with_labels(self, labels: np.ndarray) -> "LabelledDataset":
        return LabelledDataset(self.video_ids, self.frames, labels, self.features, None, sort=False)

    def clean(self) -> "LabelledDataset":
        """Same frames with the clean label channel promoted to ``labels``."""
        if self.clean_labels is None:
            return self
        return self.with_labels(self.clean_labels)

    def equals(self, other: "LabelledDataset") -> bool:
        return (
            len(self) == len(other)
            and np.array_equal(self.video_ids, other.video_ids)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    def __repr__(self) -> str:
        return (
            f"LabelledDataset(n={len(self)}, videos={len(self.videos())}, "
            f"feature_dim={self.feature_dim})"
        )


class PredictionRun:
    """Per-frame logit vectors for one model, sorted by (video_id, frame)."""

    def __init__(
        self,
        video_ids: Sequence[str] | np.ndarray,
        frames: Sequence[int] | np.ndarray,
        logits: np.ndarray,
    ) -> None:
        video_ids = np.asarray(video_ids, dtype=str).reshape(-1)
        frames = np.asarray(frames, dtype=np.int64).reshape(-1)
        logits = np.asarray(logits, dtype=np.float64)
        n = len(video_ids)
        if logits.size == 0:
            logits = logits.reshape(0, N_AUS)
        if logits.shape != (n, N_AUS) or len(frames) != n:
            raise DataError(f"logits must have shape ({n}, {N_AUS}), got {logits.shape}")
        order = _sorted_order(video_ids, frames)
        video_ids, frames, logits = video_ids[order], frames[order], logits[order]
        _check_unique_keys(video_ids, frames)
        self.video_ids = _frozen(video_ids)
        self.frames = _frozen(frames)
        self.logits = _frozen(logits)

    def __len__(self) -> int:
        return len(self.video_ids)

    def keys(self) -> list[tuple[str, int]]:
        return list(zip(self.video_ids.tolist(), self.frames.tolist()))

    def with_logits(self, logits: np.ndarray) -> "PredictionRun":
        return PredictionRun(self.video_ids, self.frames, logits)

    def __repr__(self) -> str:
        return f"PredictionRun(n={len(self)})"


def align_keys(
    reference: Sequence[tuple[str, int]], other: Sequence[tuple[str, int]]
) -> None:
    """Raise :class:`AlignmentError` unless both key sequences are identical."""
    if list(reference) == list(other):
        return
    ref, oth = set(reference), set(other)
    offenders = sorted(
        [(k, "missing from predictions") for k in ref - oth]
        + [(k, "missing from truth") for k in oth - ref]
    )
    if not offenders:
        raise AlignmentError("frames are present on both sides but in a different order")
    shown = "; ".join(f"{v}/{f}: {why}" for (v, f), why in offenders[:10])
    raise AlignmentError(f"{len(offenders)} unaligned frame(s), first offenders: {shown}")


# ---------------------------------------------------------------------------
# CSV formats


def _check_header(header: list[str], expected: Sequence[str]) -> None:
    for pos, want in enumerate(expected):
        if pos >= len(header):
            raise FormatError(f"header is missing column {pos + 1} {want!r}")
        if header[pos].strip() != want:
            raise FormatError(
                f"header column {pos + 1}: expected {want!r}, got {header[pos].strip()!r}"
            )


def _parse_frame(cell: str, line: int) -> int:
    try:
        frame = int(cell)
    except ValueError:
        raise LabelValueError(f"row {line}: frame {cell!r} is not an integer") from None
    if frame < 0:
        raise LabelValueError(f"row {line}: frame {frame} is negative")
    return frame


_LABEL_CELLS = {"0": 0, "1": 1, "-1": INVALID}


def parse_label_file(csv_text: str) -> LabelledDataset:
    """Parse a label CSV.

    The first fourteen columns must be exactly ``video_id,frame,AU1,...,AU26``.
    Optional trailing columns ``f0,f1,...`` carry the feature vector.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("label file is empty") from None
    _check_header(header, LABEL_HEADER)
    extra = [h.strip() for h in header[len(LABEL_HEADER):]]
    for d, name in enumerate(extra):
        if name != f"f{d}":
            raise FormatError(
                f"header column {len(LABEL_HEADER) + d + 1}: expected feature column 'f{d}', got {name!r}"
            )
    width = len(header)

    video_ids, frames, labels, features = [], [], [], []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"row {line}: expected {width} cells, got {len(row)}")
        video_ids.append(row[0])
        frames.append(_parse_frame(row[1], line))
        lab = []
        for au, cell in zip(AU_NAMES, row[2:len(LABEL_HEADER)]):
            try:
                lab.append(_LABEL_CELLS[cell.strip()])
            except KeyError:
                raise LabelValueError(
                    f"row {line}: {au} value {cell!r} is not one of 0, 1, -1"
                ) from None
        labels.append(lab)
        if extra:
            try:
                features.append([float(c) for c in row[len(LABEL_HEADER):]])
            except ValueError as exc:
                raise DataError(f"row {line}: bad feature value ({exc})") from None

    n = len(video_ids)
    feats = np.asarray(features, dtype=np.float64).reshape(n, len(extra)) if extra else None
    return LabelledDataset(video_ids, frames, np.asarray(labels, dtype=np.int8).reshape(n, N_AUS), feats)


def read_label_file(path: str | Path) -> LabelledDataset:
    return parse_label_file(Path(path).read_text())


def format_label_file(ds: LabelledDataset, *, include_features: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = ds.feature_dim if include_features else 0
    writer.writerow(list(LABEL_HEADER) + [f"f{i}" for i in range(d)])
    for i in range(len(ds)):
        row = [ds.video_ids[i], int(ds.frames[i])] + [int(v) for v in ds.labels[i]]
        if d:
            row += [repr(float(v)) for v in ds.features[i]]
        writer.writerow(row)
    return buf.getvalue()


def write_label_file(ds: LabelledDataset, path: str | Path, *, include_features: bool = True) -> Path:
    path = Path(path)
    path.write_text(format_label_file(ds, include_features=include_features))
    return path


def parse_prediction_file(csv_text: str) -> PredictionRun:
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("prediction file is empty") from None
    _check_header(header, PREDICTION_HEADER)
    if len(header) != len(PREDICTION_HEADER):
        raise FormatError(f"unexpected extra column {header[len(PREDICTION_HEADER)]!r}")
    video_ids, frames, logits = [], [], []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(PREDICTION_HEADER):
            raise FormatError(f"row {line}: expected {len(PREDICTION_HEADER)} cells, got {len(row)}")
        video_ids.append(row[0])
        frames.append(_parse_frame(row[1], line))
        try:
            logits.append([float(c) for c in row[2:]])
        except ValueError as exc:
            raise DataError(f"row {line}: bad logit value ({exc})") from None
    return PredictionRun(video_ids, frames, np.asarray(logits, dtype=np.float64).reshape(-1, N_AUS))


def read_predictions(path: str | Path) -> PredictionRun:
    return parse_prediction_file(Path(path).read_text())


def write_predictions(run: PredictionRun, path: str | Path) -> Path:
    """Write logits with ``repr`` formatting, which round-trips float64 exactly."""
    if len(run) == 0:
        raise DataError("refusing to write an empty prediction run")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PREDICTION_HEADER)
    for i in range(len(run)):
        writer.writerow(
            [run.video_ids[i], int(run.frames[i])] + [repr(float(v)) for v in run.logits[i]]
        )
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


# ---------------------------------------------------------------------------
# Synthetic data

DEFAULT_POSITIVE_RATES = (0.15, 0.1, 0.2, 0.3, 0.4, 0.35, 0.3, 0.08, 0.05, 0.08, 0.5, 0.12)
# rarer tail used for resampling benchmarks
IMBALANCED_POSITIVE_RATES = (0.12, 0.05, 0.15, 0.25, 0.4, 0.35, 0.3, 0.02, 0.03, 0.02, 0.5, 0.1)
DEFAULT_COOCCURRENCE = ((10, 11, 0.9), (3, 6, 0.7))


class SynthConfig(BaseModel):
    """Parameters of the synthetic stand-in for an AU video corpus.

    ``persistence`` is the lag-1 autocorrelation of every per-AU label track,
    ``prototype_scale`` and ``noise_std`` control feature separability.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_videos: int = Field(100, ge=1)
    frames_per_video: int = Field(10, ge=1)
    feature_dim: int = Field(32, ge=1)
    positive_rates: tuple[float, ...] = DEFAULT_POSITIVE_RATES
    cooccurrence_pairs: tuple[tuple[int, int, float], ...] = DEFAULT_COOCCURRENCE
    flicker_rate: float = Field(0.0, ge=0.0, lt=1.0)
    seed: int = 0
    persistence: float = Field(0.8, ge=0.0, lt=1.0)
    noise_std: float = Field(0.5, ge=0.0)
    prototype_scale: float = Field(3.0, gt=0.0)

    @field_validator("positive_rates")
    @classmethod
    def _rates(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if len(v) != N_AUS:
            raise ValueError(f"positive_rates needs {N_AUS} entries, got {len(v)}")
        if not all(0.0 < r < 1.0 for r in v):
            raise ValueError("positive_rates must lie strictly inside (0, 1)")
        return v

    @field_validator("cooccurrence_pairs")
    @classmethod
    def _pairs(cls, v):
        for i, j, c in v:
            if not (0 <= i < N_AUS and 0 <= j < N_AUS) or i == j:
                raise ValueError(f"bad cooccurrence pair ({i}, {j})")
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"cooccurrence correlation {c} outside [0, 1]")
        return v


def imbalanced_preset(**overrides) -> SynthConfig:
    params = {"positive_rates": IMBALANCED_POSITIVE_RATES, **overrides}
    return SynthConfig(**params)


def flicker_preset(**overrides) -> SynthConfig:
    """Long, persistent tracks with 10% single-bit frame noise."""
    params = {"n_videos": 40, "frames_per_video": 100, "persistence": 0.95, "flicker_rate": 0.1, **overrides}
    return SynthConfig(**params)


def _prototypes(rng: np.random.Generator, dim: int, scale: float) -> np.ndarray:
    g = rng.standard_normal((dim, N_AUS))
    if dim >= N_AUS:
        q, _ = np.linalg.qr(g)
        protos = q.T
    else:
        protos = (g / np.linalg.norm(g, axis=0)).T
    return scale * protos


def generate_synthetic(cfg: SynthConfig) -> LabelledDataset:
    """Draw a deterministic synthetic corpus.

    Every AU track of every video is a two-state Markov chain with stationary
    positive rate ``positive_rates[k]``. Chains advance by comparing a uniform
    draw against the state's switch-on probability; a co-occurrence pair
    ``(i, j, c)`` makes AU ``j`` reuse AU ``i``'s uniform with probability
    ``c``, which couples the two tracks without changing either marginal.
    """
    rng = np.random.default_rng(cfg.seed)
    n_v, n_t = cfg.n_videos, cfg.frames_per_video
    rates = np.asarray(cfg.positive_rates)
    leak = 1.0 - cfg.persistence
    on_from_off = leak * rates
    on_from_on = 1.0 - leak * (1.0 - rates)

    protos = _prototypes(rng, cfg.feature_dim, cfg.prototype_scale)
    u = rng.random((n_v, n_t, N_AUS))
    for i, j, c in cfg.cooccurrence_pairs:
        share = rng.random((n_v, n_t)) < c
        u[:, :, j] = np.where(share, u[:, :, i], u[:, :, j])

    state = np.empty((n_v, n_t, N_AUS), dtype=bool)
    state[:, 0] = u[:, 0] < rates
    for t in range(1, n_t):
        p_on = np.where(state[:, t - 1], on_from_on, on_from_off)
        state[:, t] = u[:, t] < p_on

    clean = state.reshape(-1, N_AUS).astype(np.int8)
    observed = clean.copy()
    flicker = rng.random(n_v * n_t) < cfg.flicker_rate
    which = rng.integers(0, N_AUS, size=n_v * n_t)
    rows = np.flatnonzero(flicker)
    observed[rows, which[rows]] ^= 1

    noise = rng.standard_normal((n_v * n_t, cfg.feature_dim))
    features = (observed - 0.5) @ protos + cfg.noise_std * noise

    video_ids = np.repeat([f"vid{v:03d}" for v in range(n_v)], n_t)
    frames = np.tile(np.arange(n_t), n_v)
    return LabelledDataset(video_ids, frames, observed, features, clean)


def split_by_video(
    ds: LabelledDataset, val_fraction: float, seed: int
) -> tuple[LabelledDataset, LabelledDataset]:
    """Partition whole videos into (train, val)."""
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    videos = ds.videos()
    if len(videos) < 2:
        raise SplitError(f"need at least 2 videos to split, got {len(videos)}")
    n_val = int(math.floor(len(videos) * val_fraction + 0.5))
    n_val = min(max(n_val, 1), len(videos) - 1)
    perm = np.random.default_rng(seed).permutation(len(videos))
    val_videos = {videos[i] for i in perm[:n_val]}
    in_val = np.array([v in val_videos for v in ds.video_ids.tolist()], dtype=bool)
    return ds.take(np.flatnonzero(~in_val)), ds.take(np.flatnonzero(in_val))
