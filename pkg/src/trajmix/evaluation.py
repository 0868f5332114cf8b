"""Quantitative evaluation of the candidate predictors and the mixture.

Covers RMSE along the trajectory, L2 error at a horizon, hard-case rates,
per-channel information gain from paired ablation trainings, arbitration
accuracy against the hindsight oracle, uncertainty-detection rates, and
per-horizon sweeps. Every mean metric carries a bootstrap confidence
interval; reports serialize to JSON plus CSV curves.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import gmm as gmm_mod
from .basis import TrajectorySegment
from .confidence import (
    ConfidenceModel,
    evaluate_confidence,
    predict_confidence_batch,
    realized_scores,
)
from .errors import (
    EmptyDatasetError,
    HorizonOutOfRangeError,
    MismatchedChildSetsError,
    ShapeMismatchError,
)
from .mixture import MixtureModels, ThresholdConfig, arbitrate, oracle_choice
from .predictors import (
    PREDICTOR_REGISTRY,
    PredictorId,
    VariationalModel,
    feature_vector,
    odometry_as_gmm,
    odometry_predict,
    variational_predict_batch,
)

DEFAULT_HORIZONS = np.round(np.arange(1, 31) * 0.1, 10)


def rmse(prediction: TrajectorySegment, groundtruth: TrajectorySegment) -> float:
    """Root mean squared Euclidean distance over a common sampling grid."""
    if len(prediction) != len(groundtruth) or not np.allclose(
        prediction.times, groundtruth.times, atol=1e-9
    ):
        raise ShapeMismatchError("prediction and groundtruth grids differ")
    d2 = (prediction.xs - groundtruth.xs) ** 2 + (prediction.ys - groundtruth.ys) ** 2
    return float(np.sqrt(np.mean(d2)))


def l2_at(prediction: TrajectorySegment, groundtruth: TrajectorySegment, t: float) -> float:
    """Euclidean distance between the trajectories at horizon t."""
    try:
        px, py = prediction.position_at(t)
        gx, gy = groundtruth.position_at(t)
    except KeyError as e:
        raise HorizonOutOfRangeError(str(e)) from None
    return float(np.hypot(px - gx, py - gy))


def hard_case_fraction(errors, threshold: float) -> float:
    """Fraction of errors strictly greater than the threshold."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptyDatasetError("hard_case_fraction needs at least one error")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return float(np.mean(errors > threshold))


def information_gain_samples(
    dataset, model_with: VariationalModel, model_without: VariationalModel
) -> np.ndarray:
    """Per-sample log-probability differences (without minus with), in nats."""
    with_children = set(model_with.net.child_names)
    without_children = set(model_without.net.child_names)
    if len(with_children ^ without_children) > 1:
        raise MismatchedChildSetsError(
            f"child sets differ in more than one child: "
            f"{sorted(with_children)} vs {sorted(without_children)}"
        )
    samples = list(dataset)
    if not samples:
        raise EmptyDatasetError("information gain needs a non-empty dataset")
    feats = np.stack([feature_vector(s.features) for s in samples])
    targets = np.stack([s.groundtruth_coeffs.flat() for s in samples])

    def mean_nlls(model):
        preds = variational_predict_batch(model, feats)
        return np.array([gmm_mod.nll(p, c) for p, c in zip(preds, targets)])

    return mean_nlls(model_without) - mean_nlls(model_with)


def information_gain(
    dataset, model_with: VariationalModel, model_without: VariationalModel
) -> float:
    """Mean reduction in test NLL from the extra input channel, in nats."""
    return float(np.mean(information_gain_samples(dataset, model_with, model_without)))


def arbitration_accuracy(chosen, realized: dict[PredictorId, np.ndarray]) -> float:
    """Fraction of samples whose arbitration matches the hindsight oracle."""
    chosen = list(chosen)
    lengths = {len(v) for v in realized.values()}
    if lengths != {len(chosen)}:
        raise ValueError("decisions and realized scores must have equal length")
    correct = 0
    for i, pick in enumerate(chosen):
        oracle = oracle_choice({pid: float(v[i]) for pid, v in realized.items()})
        correct += pick == oracle
    return correct / len(chosen)


def uncertainty_detection(
    chosen_estimated,
    realized: dict[PredictorId, np.ndarray],
    cfg: ThresholdConfig,
) -> tuple[float, float]:
    """(underestimated fraction of uncertain cases, overshoot fraction of certain cases).

    A sample is uncertain when every candidate's realized error exceeds the
    threshold; it is underestimated when the chosen candidate's estimated
    score nevertheless stayed at or below the threshold. The overshoot
    fraction is the symmetric rate on certain samples (estimate above the
    threshold although some candidate was actually fine).
    """
    est = np.asarray(chosen_estimated, dtype=float)
    mat = np.stack([np.asarray(v, dtype=float) for v in realized.values()])
    if mat.shape[1] != est.shape[0]:
        raise ValueError("estimated and realized score lengths differ")
    thr = cfg.uncertain_threshold
    uncertain = np.all(mat > thr, axis=0)
    underestimated = float(np.mean(est[uncertain] <= thr)) if uncertain.any() else 0.0
    certain = ~uncertain
    overshoot = float(np.mean(est[certain] > thr)) if certain.any() else 0.0
    return underestimated, overshoot


def bootstrap_mean_ci(
    values, n_boot: int = 1000, seed: int = 0, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return (
        float(np.quantile(means, alpha)),
        float(np.quantile(means, 1.0 - alpha)),
    )


@dataclass
class EvalRun:
    """Per-sample measurements the report metrics are assembled from."""

    horizons: np.ndarray  # (H,)
    errors: dict[PredictorId, np.ndarray]  # (N, H) realized L2 curves
    estimated: dict[PredictorId, np.ndarray]  # (N, H) estimated score curves
    nll: dict[PredictorId, np.ndarray]  # (N,)
    chosen: list[PredictorId]  # decision at the decision horizon
    warning: np.ndarray  # (N,) bool
    sample_ids: list[int]
    maneuvers: list[str]
    cfg: ThresholdConfig

    def _h_index(self, t: float) -> int:
        idx = np.nonzero(np.isclose(self.horizons, t, atol=1e-9))[0]
        if len(idx) == 0:
            raise HorizonOutOfRangeError(f"horizon {t} not on the evaluation grid")
        return int(idx[0])

    def errors_at(self, pid: PredictorId, t: float) -> np.ndarray:
        return self.errors[pid][:, self._h_index(t)]

    def estimated_at(self, pid: PredictorId, t: float) -> np.ndarray:
        return self.estimated[pid][:, self._h_index(t)]

    def mixture_errors_at(self, t: float) -> np.ndarray:
        """Realized error of the chosen candidate per sample (no blending)."""
        j = self._h_index(t)
        return np.array(
            [self.errors[pick][i, j] for i, pick in enumerate(self.chosen)]
        )

    def chosen_estimated_at(self, t: float) -> np.ndarray:
        j = self._h_index(t)
        return np.array(
            [self.estimated[pick][i, j] for i, pick in enumerate(self.chosen)]
        )

    def oracle_errors_at(self, t: float) -> np.ndarray:
        j = self._h_index(t)
        mat = np.stack([self.errors[pid][:, j] for pid in self.errors])
        return mat.min(axis=0)


def run_evaluation(
    models: MixtureModels,
    samples,
    cfg: ThresholdConfig,
    horizons=DEFAULT_HORIZONS,
) -> EvalRun:
    """Measure realized and estimated error curves plus decisions on a test set."""
    samples = list(samples)
    if not samples:
        raise EmptyDatasetError("evaluation needs a non-empty test set")
    horizons = np.asarray(horizons, dtype=float)
    feats = np.stack([feature_vector(s.features) for s in samples])
    var_preds = variational_predict_batch(models.variational, feats)
    poly_sets = predict_confidence_batch(models.confidence, feats)
    spec = models.variational.basis

    n = len(samples)
    errors = {pid: np.empty((n, len(horizons))) for pid in PREDICTOR_REGISTRY}
    estimated = {pid: np.empty((n, len(horizons))) for pid in PREDICTOR_REGISTRY}
    nll = {pid: np.empty(n) for pid in PREDICTOR_REGISTRY}
    chosen, warning = [], np.zeros(n, dtype=bool)
    for i, s in enumerate(samples):
        target = s.groundtruth_coeffs.flat()
        gmm_by_pid = {
            PredictorId.VARIATIONAL: var_preds[i],
            PredictorId.ODOMETRY: odometry_as_gmm(s.features, spec),
        }
        errors[PredictorId.VARIATIONAL][i] = realized_scores(
            var_preds[i], s.groundtruth_future, horizons, spec
        )
        odo_traj = odometry_predict(s.features, horizons)
        errors[PredictorId.ODOMETRY][i] = realized_scores(
            odo_traj, s.groundtruth_future, horizons
        )
        for pid in PREDICTOR_REGISTRY:
            nll[pid][i] = gmm_mod.nll(gmm_by_pid[pid], target)
            estimated[pid][i] = [
                evaluate_confidence(poly_sets[i], pid, t) for t in horizons
            ]
        decision = arbitrate(poly_sets[i], cfg)
        chosen.append(decision.chosen)
        warning[i] = decision.warning
    return EvalRun(
        horizons=horizons,
        errors=errors,
        estimated=estimated,
        nll=nll,
        chosen=chosen,
        warning=warning,
        sample_ids=[s.id for s in samples],
        maneuvers=[s.maneuver for s in samples],
        cfg=cfg,
    )


def temporal_sweep(run: EvalRun) -> dict:
    """Per-horizon mean error curves with per-horizon arbitration.

    At each horizon the arbitrated pick is the candidate with the lowest
    estimated score at that horizon; the oracle picks by realized score.
    """
    h = run.horizons
    curves: dict[str, np.ndarray] = {"horizon": h}
    err_mat = np.stack([run.errors[pid] for pid in PREDICTOR_REGISTRY])  # (P, N, H)
    est_mat = np.stack([run.estimated[pid] for pid in PREDICTOR_REGISTRY])
    for k, pid in enumerate(PREDICTOR_REGISTRY):
        curves[f"l2_{pid.value}"] = err_mat[k].mean(axis=0)
    # Ties go to the later registry entry (the physics expert) via argmin on
    # reversed order.
    pick = est_mat.shape[0] - 1 - np.argmin(est_mat[::-1], axis=0)  # (N, H)
    mix_err = np.take_along_axis(
        err_mat, pick[None, :, :], axis=0
    )[0]
    curves["l2_mixture"] = mix_err.mean(axis=0)
    curves["l2_oracle"] = err_mat.min(axis=0).mean(axis=0)
    thr = run.cfg.uncertain_threshold
    uncertain = np.all(err_mat > thr, axis=0)  # (N, H)
    chosen_est = np.take_along_axis(est_mat, pick[None, :, :], axis=0)[0]
    under = uncertain & (chosen_est <= thr)
    curves["uncertain_fraction"] = uncertain.mean(axis=0)
    curves["underestimated_fraction"] = under.mean(axis=0)
    return curves


@dataclass
class MetricReport:
    """Aggregated evaluation results for one test split."""

    n_samples: int
    decision_horizon: float
    uncertain_threshold: float
    hard_threshold: float
    per_predictor: dict[str, dict] = field(default_factory=dict)
    mixture: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "n_samples": self.n_samples,
            "decision_horizon_s": self.decision_horizon,
            "uncertain_threshold_m": self.uncertain_threshold,
            "hard_threshold_m": self.hard_threshold,
            "per_predictor": self.per_predictor,
            "mixture": self.mixture,
            "oracle": self.oracle,
        }
        return json.dumps(d, sort_keys=True, indent=2)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        keys = list(self.curves)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        for row in zip(*(self.curves[k] for k in keys)):
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def build_report(run: EvalRun, bootstrap_seed: int = 0) -> MetricReport:
    """Assemble the metric report from one evaluation run."""
    t_dec = run.cfg.decision_horizon
    report = MetricReport(
        n_samples=len(run.sample_ids),
        decision_horizon=t_dec,
        uncertain_threshold=run.cfg.uncertain_threshold,
        hard_threshold=run.cfg.hard_threshold,
    )
    for pid in PREDICTOR_REGISTRY:
        curve = run.errors[pid]
        rmse_vals = np.sqrt(np.mean(curve**2, axis=1))
        l2_vals = run.errors_at(pid, t_dec)
        max_over_horizon = curve.max(axis=1)
        report.per_predictor[pid.value] = {
            "rmse_mean_m": float(rmse_vals.mean()),
            "rmse_ci95_m": list(bootstrap_mean_ci(rmse_vals, seed=bootstrap_seed)),
            "l2_at_decision_mean_m": float(l2_vals.mean()),
            "l2_at_decision_ci95_m": list(
                bootstrap_mean_ci(l2_vals, seed=bootstrap_seed + 1)
            ),
            "hard_fraction": hard_case_fraction(max_over_horizon, run.cfg.hard_threshold),
            "hard_fraction_at_decision": hard_case_fraction(
                l2_vals, run.cfg.hard_threshold
            ),
            "nll_mean_nats": float(run.nll[pid].mean()),
        }
    mix_err = run.mixture_errors_at(t_dec)
    oracle_err = run.oracle_errors_at(t_dec)
    realized = {pid: run.errors_at(pid, t_dec) for pid in PREDICTOR_REGISTRY}
    under, overshoot = uncertainty_detection(
        run.chosen_estimated_at(t_dec), realized, run.cfg
    )
    uncertain = np.all(
        np.stack([realized[pid] for pid in PREDICTOR_REGISTRY]) > run.cfg.uncertain_threshold,
        axis=0,
    )
    report.mixture = {
        "l2_at_decision_mean_m": float(mix_err.mean()),
        "l2_at_decision_ci95_m": list(bootstrap_mean_ci(mix_err, seed=bootstrap_seed + 2)),
        "regret_m": float(mix_err.mean() - oracle_err.mean()),
        "arbitration_accuracy": arbitration_accuracy(run.chosen, realized),
        "underestimated_uncertain_fraction": under,
        "certain_overshoot_fraction": overshoot,
        "uncertain_fraction": float(uncertain.mean()),
        "warning_fraction": float(run.warning.mean()),
    }
    report.oracle = {"l2_at_decision_mean_m": float(oracle_err.mean())}
    report.curves = {
        k: (v.tolist() if isinstance(v, np.ndarray) else v)
        for k, v in temporal_sweep(run).items()
    }
    return report


def decision_log_lines(run: EvalRun) -> list[str]:
    """One JSON record per sample: decision, scores, warning, oracle pick."""
    t_dec = run.cfg.decision_horizon
    lines = []
    for i, sid in enumerate(run.sample_ids):
        realized = {
            pid.value: float(run.errors_at(pid, t_dec)[i]) for pid in PREDICTOR_REGISTRY
        }
        estimated = {
            pid.value: float(run.estimated_at(pid, t_dec)[i])
            for pid in PREDICTOR_REGISTRY
        }
        oracle = oracle_choice(
            {pid: float(run.errors_at(pid, t_dec)[i]) for pid in PREDICTOR_REGISTRY}
        )
        lines.append(
            json.dumps(
                {
                    "id": sid,
                    "maneuver": run.maneuvers[i],
                    "chosen": run.chosen[i].value,
                    "oracle": oracle.value,
                    "estimated_m": estimated,
                    "realized_m": realized,
                    "warning": bool(run.warning[i]),
                },
                sort_keys=True,
            )
        )
    return lines
