"""Learned confidence estimation for the candidate predictors.

A network with the same children/trunk layout as the variational predictor
maps input features to one second-order polynomial per candidate; evaluating
a polynomial at a horizon yields the estimated L2 prediction error in meters
at that horizon. Training targets are realized errors measured on a data
split disjoint from the predictor's training split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gmm as gmm_mod
from .basis import BasisSpec, TrajectorySegment
from .errors import (
    EmptyDatasetError,
    HorizonOutOfRangeError,
    ShapeMismatchError,
)
from .gmm import GmmParams
from .net import TrainConfig
from .predictors import (
    BLOCK_DROPOUT_P,
    CHILD_ORDER,
    PREDICTOR_REGISTRY,
    CompositeNet,
    InputFeatures,
    Normalizer,
    PredictorId,
    VariationalModel,
    _fit_composite,
    feature_vector,
    odometry_predict,
    variational_predict,
)

# Horizons [s] at which realized errors are fitted during training.
TRAIN_HORIZON_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass(frozen=True)
class ConfidencePolySet:
    """Per-predictor quadratic horizon -> estimated error [m] maps.

    Each entry is (a, b, c0) with score(t) = max(0, a t^2 + b t + c0).
    """

    polys: dict[PredictorId, tuple[float, float, float]]

    def __post_init__(self):
        for pid, triple in self.polys.items():
            if len(triple) != 3:
                raise ValueError(f"poly for {pid} must be a coefficient triple")


def evaluate_confidence(
    polys: ConfidencePolySet, predictor: PredictorId, t: float
) -> float:
    """Estimated error at horizon t, clamped below at zero."""
    if predictor not in polys.polys:
        raise KeyError(f"unknown predictor {predictor!r}")
    a, b, c0 = polys.polys[predictor]
    return max(0.0, a * t * t + b * t + c0)


def dominant_mean_trajectory(
    prediction: GmmParams, spec: BasisSpec, times
) -> TrajectorySegment:
    """Point prediction of a mixture: the dominant-weight component's mean."""
    return gmm_mod.mean_trajectory(prediction, prediction.dominant_component(), times, spec)


def realized_scores(
    prediction: GmmParams | TrajectorySegment,
    groundtruth: TrajectorySegment,
    horizons,
    spec: BasisSpec | None = None,
) -> np.ndarray:
    """Realized L2 error [m] between prediction and groundtruth per horizon.

    Mixture predictions are reduced to the dominant component's mean
    trajectory (which needs the basis `spec`); trajectory predictions must
    contain every horizon on their sampling grid.
    """
    horizons = np.asarray(horizons, dtype=float)
    if isinstance(prediction, GmmParams):
        if spec is None:
            raise ValueError("scoring a mixture requires the basis spec")
        pred = dominant_mean_trajectory(prediction, spec, horizons)
        px, py = pred.xs, pred.ys
    else:
        try:
            pts = [prediction.position_at(t) for t in horizons]
        except KeyError as e:
            raise HorizonOutOfRangeError(str(e)) from None
        px = np.array([p[0] for p in pts])
        py = np.array([p[1] for p in pts])
    try:
        gt = [groundtruth.position_at(t) for t in horizons]
    except KeyError as e:
        raise HorizonOutOfRangeError(str(e)) from None
    gx = np.array([p[0] for p in gt])
    gy = np.array([p[1] for p in gt])
    return np.hypot(px - gx, py - gy)


@dataclass
class ConfidenceModel:
    """Trained confidence estimator for the registered predictor set."""

    net: CompositeNet
    normalizer: Normalizer
    registry: tuple[PredictorId, ...] = PREDICTOR_REGISTRY
    horizon: float = 3.0

    def to_dict(self) -> dict:
        return {
            "kind": "confidence",
            "net": self.net.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "registry": [p.value for p in self.registry],
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceModel":
        return cls(
            net=CompositeNet.from_dict(d["net"]),
            normalizer=Normalizer.from_dict(d["normalizer"]),
            registry=tuple(PredictorId(p) for p in d["registry"]),
            horizon=float(d["horizon"]),
        )


def poly_set_from_raw(
    raw: np.ndarray, registry: tuple[PredictorId, ...]
) -> ConfidencePolySet:
    """Decode a raw output vector (3 per predictor, registry order)."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (3 * len(registry),):
        raise ShapeMismatchError(
            f"confidence output must have length {3 * len(registry)}"
        )
    polys = {
        pid: (float(raw[3 * i]), float(raw[3 * i + 1]), float(raw[3 * i + 2]))
        for i, pid in enumerate(registry)
    }
    return ConfidencePolySet(polys=polys)


def predict_confidence(model: ConfidenceModel, x: InputFeatures) -> ConfidencePolySet:
    """Per-predictor confidence polynomials for one input."""
    feats = model.normalizer.apply(feature_vector(x))
    raw, _ = model.net.forward(feats, mode="eval")
    return poly_set_from_raw(raw, model.registry)


def predict_confidence_batch(
    model: ConfidenceModel, features: np.ndarray
) -> list[ConfidencePolySet]:
    raw, _ = model.net.forward(model.normalizer.apply(features), mode="eval")
    return [poly_set_from_raw(r, model.registry) for r in np.atleast_2d(raw)]


@dataclass(frozen=True)
class ScoredSample:
    """Training record: input features plus realized scores (P, G)."""

    features: InputFeatures
    scores: np.ndarray  # (n_predictors, n_grid)


def build_confidence_dataset(
    samples,
    model: VariationalModel,
    horizon_grid=TRAIN_HORIZON_GRID,
    registry: tuple[PredictorId, ...] = PREDICTOR_REGISTRY,
) -> list[ScoredSample]:
    """Measure realized errors of every registered predictor on `samples`."""
    grid = np.asarray(horizon_grid, dtype=float)
    out = []
    for s in samples:
        rows = []
        for pid in registry:
            if pid is PredictorId.VARIATIONAL:
                pred = variational_predict(model, s.features)
                rows.append(
                    realized_scores(pred, s.groundtruth_future, grid, model.basis)
                )
            elif pid is PredictorId.ODOMETRY:
                traj = odometry_predict(s.features, grid)
                rows.append(realized_scores(traj, s.groundtruth_future, grid))
            else:  # pragma: no cover - registry is closed
                raise KeyError(f"no scorer for predictor {pid!r}")
        out.append(ScoredSample(features=s.features, scores=np.stack(rows)))
    return out


def mse_loss_and_grad(
    raw: np.ndarray, targets: np.ndarray, grid: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared polynomial-fit error over predictors and the horizon grid.

    raw: (N, 3P) coefficient triples; targets: (N, P, G) realized scores.
    The polynomial is evaluated unclamped here; the zero clamp is an
    inference-time guard.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    n, p, g = targets.shape
    coeffs = raw.reshape(n, p, 3)
    tt = np.stack([grid**2, grid, np.ones_like(grid)])  # (3, G)
    pred = coeffs @ tt  # (N, P, G)
    err = pred - targets
    loss = float(np.mean(err**2))
    g_coeffs = 2.0 * (err @ tt.T) / err.size  # (N, P, 3)
    return loss, g_coeffs.reshape(n, 3 * p)


def train_confidence(
    dataset,
    config: TrainConfig,
    *,
    horizon_grid=TRAIN_HORIZON_GRID,
    registry: tuple[PredictorId, ...] = PREDICTOR_REGISTRY,
    children: tuple[str, ...] = CHILD_ORDER,
    block_dropout_p: float = BLOCK_DROPOUT_P,
) -> tuple[ConfidenceModel, list[float]]:
    """Fit the confidence network on ScoredSample records."""
    samples = list(dataset)
    if not samples:
        raise EmptyDatasetError("cannot train on an empty dataset")
    grid = np.asarray(horizon_grid, dtype=float)
    feats = np.stack([feature_vector(s.features) for s in samples])
    targets = np.stack([np.asarray(s.scores, dtype=float) for s in samples])
    if targets.shape[1:] != (len(registry), len(grid)):
        raise ShapeMismatchError(
            f"scores must be (n_predictors={len(registry)}, n_grid={len(grid)})"
        )

    rng = np.random.default_rng(config.seed)
    normalizer = Normalizer.fit(feats)
    feats_n = normalizer.apply(feats)
    degree = samples[0].features.past_coeffs.basis.degree
    net = CompositeNet.build(
        children,
        feats.shape[1],
        3 * len(registry),
        degree,
        rng,
        block_dropout_p=block_dropout_p,
    )

    def loss_grad(raw, idx):
        return mse_loss_and_grad(raw, targets[idx], grid)

    history = _fit_composite(net, feats_n, loss_grad, config, rng)
    model = ConfidenceModel(
        net=net,
        normalizer=normalizer,
        registry=registry,
        horizon=float(grid.max()),
    )
    return model, history


def oracle_poly_set(
    scores_at_horizon: dict[PredictorId, float]
) -> ConfidencePolySet:
    """Constant polynomials pinned to realized scores (the perfect estimator)."""
    return ConfidencePolySet(
        polys={pid: (0.0, 0.0, float(s)) for pid, s in scores_at_horizon.items()}
    )
