"""Feed-forward AU head, SGD with momentum and stepped learning rate, training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .core import N_AUS, LabelledDataset, PredictionRun
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .evaluate import confusion_from_arrays, f1
from .imbalance import balanced_batches, build_batch_plan, epoch_batches
from .losses import LossConfig, smooth_labels, total_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AUPIPE-CKPT-v1\n"


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: Optional[int] = Field(None, ge=1)
    hidden_dims: tuple[int, ...] = (64, 64)
    output_dim: int = N_AUS
    dropout_p: float = Field(0.6, ge=0.0, lt=1.0)
    init_seed: int = Field(0, ge=0)

    @field_validator("output_dim")
    @classmethod
    def _out(cls, v):
        if v != N_AUS:
            raise ValueError(f"output_dim is fixed to {N_AUS}")
        return v

    @field_validator("hidden_dims")
    @classmethod
    def _hidden(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be positive")
        return v


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr0: float = Field(0.001, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(15, ge=1)
    lr_drop_epochs: tuple[int, ...] = (4, 6, 8)
    lr_drop_factor: float = Field(10.0, gt=0.0)


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class Sampler(str, Enum):
    BALANCED = "balanced"
    SHUFFLE = "shuffle"


@dataclass
class Model:
    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class OptimState:
    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: Model) -> "OptimState":
        return cls([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])


def init_model(cfg: ModelConfig) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if cfg.input_dim is None:
        raise ConfigError("ModelConfig.input_dim must be set before initialising a model")
    rng = np.random.default_rng(cfg.init_seed)
    dims = [cfg.input_dim, *cfg.hidden_dims, cfg.output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Model(cfg, weights, biases)


@dataclass
class _Cache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each hidden layer
    drop: list[Optional[np.ndarray]]  # scaled dropout masks


def forward(model: Model, features, mode: Mode | str = Mode.EVAL, dropout_seed=None, *, return_cache=False):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected features of shape (batch, {model.input_dim}), got {x.shape}")
    mode = Mode(mode)
    p = model.config.dropout_p
    rng = np.random.default_rng(dropout_seed) if mode is Mode.TRAIN and p > 0 else None
    cache = _Cache([], [], [])
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        if i == last:
            return (z, cache) if return_cache else z
        cache.pre.append(z)
        h = np.maximum(z, 0.0)
        if rng is not None:
            keep = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * keep
            cache.drop.append(keep)
        else:
            cache.drop.append(None)


def backward(model: Model, cache: _Cache, grad_logits: np.ndarray) -> Gradients:
    """Backpropagate d(loss)/d(logits) through the cached forward pass."""
    n_layers = len(model.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = grad_logits
    for i in range(n_layers - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i].T
        if cache.drop[i - 1] is not None:
            delta = delta * cache.drop[i - 1]
        delta = delta * (cache.pre[i - 1] > 0)
    return Gradients(gw, gb)


def lr_at(cfg: OptimConfig, epoch: int) -> float:
    """Learning rate for a 0-indexed epoch: one division per drop epoch already reached."""
    drops = sum(1 for d in cfg.lr_drop_epochs if d <= epoch)
    return cfg.lr0 / cfg.lr_drop_factor ** drops


def sgd_step(model: Model, grads: Gradients, state: OptimState, lr: float, cfg: OptimConfig, *, where=None):
    """In-place SGD update; weight decay is added to weight gradients only."""
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            epoch, batch = where if where is not None else (None, None)
            raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {batch}, layer {i}")
    for i in range(len(model.weights)):
        vw = state.velocity_w[i]
        vw *= cfg.momentum
        vw += grads.weights[i] + cfg.weight_decay * model.weights[i]
        vb = state.velocity_b[i]
        vb *= cfg.momentum
        vb += grads.biases[i]
        model.weights[i] -= lr * vw
        model.biases[i] -= lr * vb
    return model, state


def loss_and_grads(model: Model, features, labels, loss_cfg: LossConfig, mode=Mode.EVAL, dropout_seed=None):
    """Total loss of one batch and its exact gradient with respect to every parameter."""
    labels = np.asarray(labels)
    mask = labels != -1
    targets = smooth_labels(np.where(mask, labels, 0), loss_cfg.effective_eps)
    logits, cache = forward(model, features, mode, dropout_seed, return_cache=True)
    out = total_loss(logits, targets, mask, loss_cfg)
    return out.value, backward(model, cache, out.grad_x)


# ---------------------------------------------------------------------------
# History and checkpoints


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_per_au_f1: Optional[list[float]] = None
    val_macro_f1: Optional[float] = None


def _config_blob(model_cfg: ModelConfig, optim_cfg: OptimConfig, loss_cfg: LossConfig) -> dict:
    return {
        "model": model_cfg.model_dump(mode="json"),
        "optim": optim_cfg.model_dump(mode="json"),
        "loss": loss_cfg.model_dump(mode="json"),
    }


def config_fingerprint(model_cfg: ModelConfig, optim_cfg: OptimConfig, loss_cfg: LossConfig) -> str:
    blob = json.dumps(_config_blob(model_cfg, optim_cfg, loss_cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    model: Model
    optim_state: OptimState
    epoch: int
    seed: int
    sampler: Sampler
    optim_config: OptimConfig
    loss_config: LossConfig
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.model.config, self.optim_config, self.loss_config)

    def save(self, path: str | Path) -> Path:
        arrays = []
        for i, (w, b) in enumerate(zip(self.model.weights, self.model.biases)):
            arrays += [(f"W{i}", w), (f"b{i}", b)]
        for i, (vw, vb) in enumerate(zip(self.optim_state.velocity_w, self.optim_state.velocity_b)):
            arrays += [(f"vW{i}", vw), (f"vb{i}", vb)]
        header = {
            "fingerprint": self.fingerprint,
            "epoch": self.epoch,
            "rng": {"seed": self.seed, "next_epoch": self.epoch + 1},
            "sampler": Sampler(self.sampler).value,
            "config": _config_blob(self.model.config, self.optim_config, self.loss_config),
            "history": [vars(r) for r in self.history],
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        }
        head = json.dumps(header, sort_keys=True).encode()
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
        path = Path(path)
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise DataError(f"{path}: not an AUPIPE-CKPT-v1 checkpoint")
        off = len(CHECKPOINT_MAGIC)
        (n_head,) = struct.unpack_from("<Q", raw, off)
        off += 8
        header = json.loads(raw[off:off + n_head])
        off += n_head
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"], dtype=np.int64))
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(spec["shape"]).astype(np.float64)
            off += 8 * count
        cfg = header["config"]
        model_cfg = ModelConfig(**cfg["model"])
        n_layers = len(model_cfg.hidden_dims) + 1
        model = Model(model_cfg, [arrays[f"W{i}"] for i in range(n_layers)], [arrays[f"b{i}"] for i in range(n_layers)])
        state = OptimState([arrays[f"vW{i}"] for i in range(n_layers)], [arrays[f"vb{i}"] for i in range(n_layers)])
        ckpt = cls(
            model,
            state,
            header["epoch"],
            header["rng"]["seed"],
            Sampler(header["sampler"]),
            OptimConfig(**cfg["optim"]),
            LossConfig(**cfg["loss"]),
            [EpochRecord(**r) for r in header["history"]],
        )
        if ckpt.fingerprint != header["fingerprint"]:
            raise DataError(f"{path}: config fingerprint mismatch, file is corrupt")
        return ckpt


@dataclass
class TrainResult:
    final: Checkpoint
    checkpoints: list[Checkpoint]
    history: list[EpochRecord]


def _epoch_index_batches(train_ds, optim_cfg, sampler, seed, epoch, plan):
    rng_seed = [seed, epoch, 1]
    if sampler is Sampler.BALANCED:
        n_batches = epoch_batches(len(train_ds), optim_cfg.batch_size)
        return list(balanced_batches(plan, n_batches, rng_seed, log_gaps=(epoch == 0)))
    perm = np.random.default_rng(rng_seed).permutation(len(train_ds))
    return [perm[i:i + optim_cfg.batch_size] for i in range(0, len(perm), optim_cfg.batch_size)]


def evaluate_logits(logits: np.ndarray, labels: np.ndarray, threshold: float = 0.0):
    preds = (logits > threshold).astype(np.int8)
    return f1(confusion_from_arrays(preds, labels))


def train(
    train_ds: LabelledDataset,
    val_ds: Optional[LabelledDataset],
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    loss_cfg: LossConfig,
    sampler: Sampler | str = Sampler.BALANCED,
    seed: int = 0,
    *,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainResult:
    """Train a model and return the final checkpoint, one per epoch and the history.

    Every random draw is keyed by ``(seed, epoch, ...)``, so a run resumed
    from a checkpoint continues exactly as the uninterrupted run would.
    """
    sampler = Sampler(sampler)
    if len(train_ds) == 0:
        raise DataError("training set is empty")
    if train_ds.feature_dim == 0:
        raise DataError("training set has no feature columns")
    if model_cfg.input_dim is None:
        model_cfg = model_cfg.model_copy(update={"input_dim": train_ds.feature_dim})
    if model_cfg.input_dim != train_ds.feature_dim:
        raise ShapeError(f"model expects {model_cfg.input_dim} features, data has {train_ds.feature_dim}")
    if val_ds is not None and len(val_ds) and val_ds.feature_dim != train_ds.feature_dim:
        raise ShapeError("train and val feature dimensions differ")

    if resume is not None:
        if resume.fingerprint != config_fingerprint(model_cfg, optim_cfg, loss_cfg):
            raise ConfigError("checkpoint was produced with a different configuration")
        model, state = resume.model.copy(), copy.deepcopy(resume.optim_state)
        history = list(resume.history)
        seed, sampler = resume.seed, resume.sampler
        start = resume.epoch + 1
    else:
        model = init_model(model_cfg)
        state = OptimState.zeros_like(model)
        history, start = [], 0

    plan = build_batch_plan(train_ds, optim_cfg.batch_size) if sampler is Sampler.BALANCED else None
    feats, labels = train_ds.features, train_ds.labels
    checkpoints: list[Checkpoint] = []
    for epoch in range(start, optim_cfg.epochs):
        lr = lr_at(optim_cfg, epoch)
        losses = []
        for b, idx in enumerate(_epoch_index_batches(train_ds, optim_cfg, sampler, seed, epoch, plan)):
            value, grads = loss_and_grads(
                model, feats[idx], labels[idx], loss_cfg, Mode.TRAIN, dropout_seed=[seed, epoch, 2, b]
            )
            sgd_step(model, grads, state, lr, optim_cfg, where=(epoch, b))
            losses.append(value)
        record = EpochRecord(epoch, lr, float(np.mean(losses)))
        if val_ds is not None and len(val_ds):
            report = evaluate_logits(forward(model, val_ds.features), val_ds.labels)
            record.val_per_au_f1 = [float(v) for v in report.per_au_f1]
            record.val_macro_f1 = float(report.macro_f1)
        history.append(record)
        logger.info(
            "epoch %d lr %.3g loss %.5f val macro F1 %s",
            epoch, lr, record.train_loss,
            "n/a" if record.val_macro_f1 is None else f"{record.val_macro_f1:.4f}",
        )
        ckpt = Checkpoint(model.copy(), copy.deepcopy(state), epoch, seed, sampler, optim_cfg, loss_cfg, list(history))
        checkpoints.append(ckpt)
        if on_epoch is not None:
            on_epoch(ckpt)

    if not checkpoints:
        if resume is None:
            raise ConfigError("no epochs to run")
        final = resume
    else:
        final = checkpoints[-1]
    return TrainResult(final, checkpoints, history)


def predict(model: Model | Checkpoint, ds: LabelledDataset) -> PredictionRun:
    if isinstance(model, Checkpoint):
        model = model.model
    return PredictionRun(ds.video_ids, ds.frames, forward(model, ds.features, Mode.EVAL))
