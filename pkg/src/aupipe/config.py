"""Pipeline configuration and seed derivation."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .core import SynthConfig
from .errors import ConfigError
from .imbalance import ResampleConfig
from .losses import LossConfig
from .postprocess import DEFAULT_WINDOW
from .trainer import ModelConfig, OptimConfig, Sampler


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    out_dir: str = "aupipe-out"


class PipelineConfig(BaseModel):
    """Everything one ``repro`` run needs.

    Section defaults are the published reference hyperparameters.
    In ``repro`` the per-section seeds are replaced by values derived from
    the global ``seed``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(0, ge=0)
    synth: SynthConfig = SynthConfig()
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    loss: LossConfig = LossConfig()
    resample: ResampleConfig = ResampleConfig()
    sampler: Sampler = Sampler.BALANCED
    val_fraction: float = Field(0.3, gt=0.0, lt=1.0)
    smooth_window: int = DEFAULT_WINDOW
    threshold: float = 0.0
    n_models: int = Field(3, ge=1)
    smooth_before_ensemble: bool = True
    # also offer unsmoothed runs to the per-AU selection
    ensemble_include_raw: bool = True
    paths: PathsConfig = PathsConfig()

    @field_validator("smooth_window")
    @classmethod
    def _window(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("window must be odd and >= 1")
        return v


def stage_seed(seed: int, stage: str) -> int:
    """Derive a stable 63-bit seed for a named stage from the global seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def parse_config(text: str) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from None


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a JSON config file; ``None`` loads the packaged desk-scale default."""
    if path is None:
        return parse_config(default_config_text())
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def default_config_text() -> str:
    return resources.files("aupipe").joinpath("configs/default.json").read_text()


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n"
