"""Integrated Gradients baselines, maximum-entropy references, and
entropy-conserving ablation evaluation on a small float64 network stack."""

from . import attribution, baselines, data, evaluation, nn
from .errors import DimensionError, FormatError, NumericError, TrainingError

__version__ = "0.1.0"

__all__ = [
    "attribution",
    "baselines",
    "data",
    "evaluation",
    "nn",
    "DimensionError",
    "FormatError",
    "NumericError",
    "TrainingError",
]
