"""Mixture-of-experts arbitration among the candidate predictors.

The arbitrator evaluates each candidate's confidence polynomial at the
decision horizon, picks the candidate with the lowest estimated error (ties
go to the physics expert as the safer default), and raises a warning flag
when every estimate exceeds the uncertainty threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .confidence import ConfidenceModel, ConfidencePolySet, evaluate_confidence, predict_confidence
from .gmm import GmmParams
from .predictors import (
    PREDICTOR_REGISTRY,
    InputFeatures,
    PredictorId,
    VariationalModel,
    odometry_as_gmm,
    variational_predict,
)


@dataclass(frozen=True)
class ThresholdConfig:
    """Decision thresholds [m] and the arbitration horizon [s]."""

    uncertain_threshold: float = 2.54
    hard_threshold: float = 5.0
    decision_horizon: float = 3.0

    def __post_init__(self):
        if self.uncertain_threshold <= 0 or self.hard_threshold <= 0:
            raise ValueError("thresholds must be > 0")
        if self.decision_horizon <= 0:
            raise ValueError("decision_horizon must be > 0")


@dataclass(frozen=True)
class MixtureDecision:
    """Outcome of one arbitration."""

    chosen: PredictorId
    estimated_scores: dict[PredictorId, float]  # meters at the decision horizon
    warning: bool
    decision_horizon: float


def _argmin_with_tie_rule(scores: dict[PredictorId, float]) -> PredictorId:
    """Lowest estimated score; exact ties resolve to the physics expert."""
    best = min(scores.values())
    tied = [pid for pid, s in scores.items() if s == best]
    if PredictorId.ODOMETRY in tied:
        return PredictorId.ODOMETRY
    return tied[0]


def arbitrate(polys: ConfidencePolySet, cfg: ThresholdConfig) -> MixtureDecision:
    """Pick the candidate with the lowest estimated error at the horizon."""
    scores = {
        pid: evaluate_confidence(polys, pid, cfg.decision_horizon)
        for pid in polys.polys
    }
    chosen = _argmin_with_tie_rule(scores)
    warning = all(s > cfg.uncertain_threshold for s in scores.values())
    return MixtureDecision(
        chosen=chosen,
        estimated_scores=scores,
        warning=warning,
        decision_horizon=cfg.decision_horizon,
    )


@dataclass
class MixtureModels:
    """The loaded model bundle the mixture predictor runs on."""

    variational: VariationalModel
    confidence: ConfidenceModel


def mixture_predict(
    models: MixtureModels, x: InputFeatures, cfg: ThresholdConfig
) -> tuple[GmmParams, MixtureDecision]:
    """Arbitrated prediction: the chosen candidate's mixture plus the decision."""
    polys = predict_confidence(models.confidence, x)
    decision = arbitrate(polys, cfg)
    if decision.chosen is PredictorId.VARIATIONAL:
        prediction = variational_predict(models.variational, x)
    else:
        prediction = odometry_as_gmm(x, models.variational.basis)
    return prediction, decision


def oracle_choice(realized: dict[PredictorId, float]) -> PredictorId:
    """The hindsight-optimal pick given realized errors (same tie rule)."""
    if not realized:
        raise ValueError("need realized scores for at least one predictor")
    return _argmin_with_tie_rule(realized)


def regret(mixture_errors, oracle_errors) -> float:
    """Mean realized-error gap between the mixture and the oracle, >= 0."""
    mix = np.asarray(mixture_errors, dtype=float)
    orc = np.asarray(oracle_errors, dtype=float)
    if mix.shape != orc.shape:
        raise ValueError(
            f"mixture and oracle error lists differ in length: {mix.shape} vs {orc.shape}"
        )
    return float(np.mean(mix) - np.mean(orc))


__all__ = [
    "ThresholdConfig",
    "MixtureDecision",
    "MixtureModels",
    "arbitrate",
    "mixture_predict",
    "oracle_choice",
    "regret",
    "PREDICTOR_REGISTRY",
]
