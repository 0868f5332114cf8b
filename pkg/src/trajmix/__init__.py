"""Uncertainty-aware mixture-of-experts trajectory prediction toolkit."""

__version__ = "0.1.0"

from .basis import BasisSpec, CoeffVector, TrajectorySegment, project, reconstruct
from .confidence import ConfidenceModel, ConfidencePolySet, train_confidence
from .gmm import GmmParams, RegularizerWeights
from .mixture import MixtureDecision, MixtureModels, ThresholdConfig, mixture_predict
from .net import LayerSpec, TrainConfig
from .predictors import (
    InputFeatures,
    PredictorId,
    VariationalModel,
    odometry_predict,
    train_variational,
    variational_predict,
)
from .simgen import Sample, ScenarioConfig, generate

__all__ = [
    "BasisSpec",
    "CoeffVector",
    "TrajectorySegment",
    "project",
    "reconstruct",
    "GmmParams",
    "RegularizerWeights",
    "LayerSpec",
    "TrainConfig",
    "InputFeatures",
    "PredictorId",
    "VariationalModel",
    "variational_predict",
    "train_variational",
    "odometry_predict",
    "ConfidenceModel",
    "ConfidencePolySet",
    "train_confidence",
    "MixtureModels",
    "MixtureDecision",
    "ThresholdConfig",
    "mixture_predict",
    "Sample",
    "ScenarioConfig",
    "generate",
    "__version__",
]
