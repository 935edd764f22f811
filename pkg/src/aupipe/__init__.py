"""Imbalance-aware multi-label action-unit pipeline on feature vectors."""

from .core import AU_NAMES, INVALID, LabelledDataset, PredictionRun, SynthConfig, generate_synthetic

__all__ = ["AU_NAMES", "INVALID", "LabelledDataset", "PredictionRun", "SynthConfig", "generate_synthetic"]
__version__ = "0.1.0"
