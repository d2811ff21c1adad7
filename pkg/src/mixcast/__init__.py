"""Probabilistic forecasting on multi-source time series with an adaptive
neural mixture model: per-source encoders, softmax mixture weights, phased
(impartial then collective) training, closed-form uncertainty decomposition,
and quantile inference, plus the market-data featurization pipeline."""

from .distributions import DistKind, DistParams
from .model import MixtureOutput, ModelConfig, ModelParams
from .training import PhasedSchedule, TrainDiagnostics

__version__ = "0.1.0"

__all__ = [
    "DistKind",
    "DistParams",
    "MixtureOutput",
    "ModelConfig",
    "ModelParams",
    "PhasedSchedule",
    "TrainDiagnostics",
    "__version__",
]
