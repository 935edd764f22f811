"""Sliding-window smoothing of per-video logit tracks and binarisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PredictionRun
from .errors import ConfigError, DataError

DEFAULT_WINDOW = 5


@dataclass(frozen=True)
class LogitSequence:
    video_id: str
    frames: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.size > 1 and not (np.diff(frames) > 0).all():
            raise DataError(f"{self.video_id}: frame indices must be strictly increasing")
        if np.asarray(self.logits).shape[0] != frames.size:
            raise DataError(f"{self.video_id}: {frames.size} frames but {np.asarray(self.logits).shape[0]} logit rows")


def check_window(window: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 1, got {window}")


def moving_average(track: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average along axis 0 with edge replication.

    The first row is subtracted before averaging and added back afterwards,
    so constant tracks come out bit-identical.
    """
    check_window(window)
    x = np.asarray(track, dtype=np.float64)
    if window == 1 or x.shape[0] == 0:
        return x.copy()
    if window > 2 * x.shape[0] - 1:
        raise ConfigError(f"window {window} is longer than 2*{x.shape[0]}-1 frames")
    half = window // 2
    ref = x[:1]
    padded = np.pad(x - ref, [(half, half)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)
    return ref + windows.mean(axis=-1)


def smooth_logits(seq: LogitSequence, window: int) -> LogitSequence:
    return LogitSequence(seq.video_id, seq.frames, moving_average(seq.logits, window))


def sequences(run: PredictionRun) -> list[LogitSequence]:
    out = []
    ids = run.video_ids
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    ends = np.r_[starts[1:], len(ids)]
    for s, e in zip(starts, ends):
        out.append(LogitSequence(str(ids[s]), run.frames[s:e], run.logits[s:e]))
    return out


def smooth_run(run: PredictionRun, window: int) -> PredictionRun:
    """Smooth every video of a run independently."""
    check_window(window)
    if window == 1:
        return run
    logits = np.concatenate([smooth_logits(s, window).logits for s in sequences(run)]) if len(run) else run.logits
    return run.with_logits(logits)


def binarize(logits, threshold: float = 0.0) -> np.ndarray:
    """1 where ``logit > threshold`` (strict), else 0."""
    if isinstance(logits, (LogitSequence, PredictionRun)):
        logits = logits.logits
    return (np.asarray(logits) > threshold).astype(np.int8)
