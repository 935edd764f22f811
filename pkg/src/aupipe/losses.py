"""Weighted binary cross-entropy, multi-label loss and their sum.

All losses take raw logits ``x`` of shape ``(batch, n_labels)``, targets ``y``
in ``[0, 1]`` and a boolean ``mask`` (True = annotated). Per-element losses
use the stable form ``max(x, 0) - x*y + log1p(exp(-|x|))``. Values are summed
over labels and then averaged (or summed) over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .core import INVALID, N_AUS
from .errors import ConfigError, ShapeError

AU_LOSS_WEIGHTS = (1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 6.0, 6.0, 5.0, 1.0, 5.0)


class Components(str, Enum):
    BCE_ONLY = "bce"
    MLL_ONLY = "mll"
    SUM = "sum"


class Reduction(str, Enum):
    MEAN = "mean"
    SUM = "sum"


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    weights: tuple[float, ...] = AU_LOSS_WEIGHTS
    label_smoothing: bool = False
    label_smooth_eps: float = Field(0.1, ge=0.0, lt=0.5)
    components: Components = Components.SUM
    batch_reduction: Reduction = Reduction.MEAN
    # scalar w_n multiplying each sample's summed multi-label loss
    mll_weight: float = Field(1.0, gt=0.0)

    @field_validator("weights")
    @classmethod
    def _weights(cls, v):
        if len(v) != N_AUS:
            raise ValueError(f"weights needs {N_AUS} entries, got {len(v)}")
        if not all(w > 0 for w in v):
            raise ValueError("loss weights must be positive")
        return v

    @property
    def effective_eps(self) -> float:
        return self.label_smooth_eps if self.label_smoothing else 0.0


@dataclass(frozen=True)
class LossOutput:
    value: float
    per_element: np.ndarray
    grad_x: np.ndarray


def sigmoid(x):
    """Logistic function, split on sign so ``exp`` never overflows."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def _check(x, y, mask):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if x.ndim != 2 or y.shape != x.shape or mask.shape != x.shape:
        raise ShapeError(f"logits {x.shape}, targets {y.shape} and mask {mask.shape} must share a 2-D shape")
    valid_y = y[mask]
    if valid_y.size and (valid_y.min() < 0.0 or valid_y.max() > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    return x, np.where(mask, y, 0.0), mask


def _elementwise_bce(x, y):
    return np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))


def _weighted(x, y, mask, scale, reduction: Reduction) -> LossOutput:
    # shared by both losses so unit weights give bit-identical results
    per_element = np.where(mask, scale * _elementwise_bce(x, y), 0.0)
    per_sample = per_element.sum(axis=1)
    factor = 1.0 / x.shape[0] if reduction is Reduction.MEAN and x.shape[0] else 1.0
    value = per_sample.sum() * factor
    grad = np.where(mask, scale * (sigmoid(x) - y), 0.0) * factor
    return LossOutput(float(value), per_element, grad)


def bce_loss(x, y, mask, cfg: LossConfig) -> LossOutput:
    x, y, mask = _check(x, y, mask)
    w = np.asarray(cfg.weights, dtype=np.float64)
    if w.shape[0] != x.shape[1]:
        raise ShapeError(f"{w.shape[0]} weights for {x.shape[1]} labels")
    return _weighted(x, y, mask, np.broadcast_to(w, x.shape), Reduction(cfg.batch_reduction))


def multi_label_loss(x, y, mask, cfg: LossConfig) -> LossOutput:
    x, y, mask = _check(x, y, mask)
    scale = np.full(x.shape, cfg.mll_weight)
    return _weighted(x, y, mask, scale, Reduction(cfg.batch_reduction))


def total_loss(x, y, mask, cfg: LossConfig) -> LossOutput:
    comp = Components(cfg.components)
    if comp is Components.BCE_ONLY:
        return bce_loss(x, y, mask, cfg)
    if comp is Components.MLL_ONLY:
        return multi_label_loss(x, y, mask, cfg)
    a = bce_loss(x, y, mask, cfg)
    b = multi_label_loss(x, y, mask, cfg)
    return LossOutput(a.value + b.value, a.per_element + b.per_element, a.grad_x + b.grad_x)


def smooth_labels(y, eps: float, *, already_smoothed: bool = False) -> np.ndarray:
    """Map targets to ``y * (1 - eps) + eps / 2``; INVALID (-1) entries pass through.

    Smoothing is not idempotent, so soft inputs are rejected unless
    ``already_smoothed`` acknowledges a second application.
    """
    if not 0.0 <= eps < 0.5:
        raise ConfigError(f"label smoothing eps must lie in [0, 0.5), got {eps}")
    y = np.asarray(y, dtype=np.float64)
    invalid = y == INVALID
    valid = y[~invalid]
    if valid.size and (valid.min() < 0.0 or valid.max() > 1.0):
        raise ValueError("targets must lie in [0, 1] or be INVALID")
    if not already_smoothed and not np.isin(valid, (0.0, 1.0)).all():
        raise ValueError("targets are not binary; pass already_smoothed=True to smooth them again")
    return np.where(invalid, y, y * (1.0 - eps) + eps / 2.0)
