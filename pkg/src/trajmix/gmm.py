"""Diagonal Gaussian mixtures over flattened trajectory coefficients.

Provides the mixture negative log-likelihood (via log-sum-exp), the three
training regularizers (squared weight-sum deviation, sqrt-norm weight
sparsity, squared standard deviations), ancestral sampling, and the link
functions that map unconstrained network outputs to valid mixture
parameters together with the analytic loss gradient used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis as basis_mod
from .basis import BasisSpec, TrajectorySegment, coeffs_from_flat
from .errors import ShapeMismatchError

LOG_2PI = float(np.log(2.0 * np.pi))

# Lower clamp on standard deviations in coefficient units; prevents
# likelihood blow-up when the std regularizer pushes sigma toward zero.
STD_FLOOR = 1e-3


@dataclass(frozen=True)
class GmmParams:
    """Mixture weights, means, and diagonal stds over coefficient space."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dim)
    stds: np.ndarray  # (K, dim)

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=float))
        k = len(self.weights)
        if self.means.shape != self.stds.shape or self.means.ndim != 2:
            raise ShapeMismatchError("means and stds must both have shape (K, dim)")
        if self.means.shape[0] != k:
            raise ShapeMismatchError("weights length must match means rows")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError("weights must be non-negative and sum to 1 within 1e-6")
        if np.any(self.stds <= 0):
            raise ValueError("all stds must be > 0")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def dominant_component(self) -> int:
        """Index of the highest-weight component (first on ties)."""
        return int(np.argmax(self.weights))


@dataclass(frozen=True)
class RegularizerWeights:
    """Multipliers for the three training regularizers."""

    lambda_wsum: float = 1.0
    lambda_wsparse: float = 0.01
    lambda_std: float = 0.001

    def __post_init__(self):
        for name in ("lambda_wsum", "lambda_wsparse", "lambda_std"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def component_log_prob(mean, std, c) -> float:
    """Diagonal-Gaussian log density: 0.5 * sum_d[-log(2 pi s_d^2) - (c_d - m_d)^2 / s_d^2]."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    c = np.asarray(c, dtype=float)
    if mean.shape != std.shape or mean.shape != c.shape:
        raise ShapeMismatchError("mean, std, c must share one shape")
    if np.any(std <= 0):
        raise ValueError("std must be > 0 elementwise")
    return float(
        0.5 * np.sum(-(LOG_2PI + 2.0 * np.log(std)) - ((c - mean) / std) ** 2)
    )


def component_log_probs(params: GmmParams, c: np.ndarray) -> np.ndarray:
    """Log density of `c` under each component, shape (K,)."""
    c = np.asarray(c, dtype=float)
    if c.shape != (params.dim,):
        raise ShapeMismatchError(f"expected coefficient vector of length {params.dim}")
    z = (c[None, :] - params.means) / params.stds
    return 0.5 * np.sum(-(LOG_2PI + 2.0 * np.log(params.stds)) - z**2, axis=1)


def nll(params: GmmParams, c) -> float:
    """Mixture negative log-likelihood -log sum_i w_i exp(LP_i(c)), stabilized."""
    lp = component_log_probs(params, np.asarray(c, dtype=float))
    # log(w) with w == 0 handled by masking the component out entirely.
    with np.errstate(divide="ignore"):
        a = np.log(params.weights) + lp
    m = np.max(a)
    return float(-(m + np.log(np.sum(np.exp(a - m)))))


def regularizer_terms(
    params: GmmParams, rw: RegularizerWeights
) -> tuple[float, float, float]:
    """The three regularizer terms (weight-sum, sparsity, std) separately."""
    w = params.weights
    wsum = rw.lambda_wsum * (w.sum() - 1.0) ** 2
    wsparse = rw.lambda_wsparse * float(np.sum(np.sqrt(np.abs(w))))
    std = rw.lambda_std * float(np.sum(params.stds**2))
    return float(wsum), wsparse, std


def regularizer_loss(params: GmmParams, rw: RegularizerWeights) -> float:
    """Sum of the three regularizer terms."""
    return float(sum(regularizer_terms(params, rw)))


def sample(params: GmmParams, n: int, rng_seed: int) -> np.ndarray:
    """Ancestral samples from the mixture, shape (n, dim); deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    comps = rng.choice(params.n_components, size=n, p=params.weights)
    eps = rng.standard_normal((n, params.dim))
    return params.means[comps] + params.stds[comps] * eps


def mean_trajectory(params: GmmParams, component: int, times, spec: BasisSpec) -> TrajectorySegment:
    """Trajectory reconstructed from one component's mean coefficients."""
    if not 0 <= component < params.n_components:
        raise IndexError(
            f"component {component} out of range for K={params.n_components}"
        )
    if params.dim != 2 * spec.n_coeffs:
        raise ShapeMismatchError(
            f"mixture dim {params.dim} does not match basis 2*(degree+1)={2 * spec.n_coeffs}"
        )
    c = coeffs_from_flat(params.means[component], spec)
    return basis_mod.reconstruct(c, times)


# ---------------------------------------------------------------------------
# Link functions and training loss over raw (unconstrained) outputs.
#
# Raw layout per sample: [K weight logits | K*dim means | K*dim log-stds].
# Links: softmax -> weights, identity -> means, exp (clamped below at
# std_floor) -> stds.
# ---------------------------------------------------------------------------


def raw_param_count(k: int, dim: int) -> int:
    """Length of the raw parameter vector: K * (1 + 2 * dim)."""
    return k * (1 + 2 * dim)


def split_raw(raw: np.ndarray, k: int, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split raw batch (N, K(1+2*dim)) into logits (N,K), means and log-stds (N,K,dim)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if raw.shape[1] != raw_param_count(k, dim):
        raise ShapeMismatchError(
            f"raw vector length {raw.shape[1]} != K*(1+2*dim) = {raw_param_count(k, dim)}"
        )
    n = raw.shape[0]
    logits = raw[:, :k]
    means = raw[:, k : k + k * dim].reshape(n, k, dim)
    log_stds = raw[:, k + k * dim :].reshape(n, k, dim)
    return logits, means, log_stds


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gmm_from_raw(raw: np.ndarray, k: int, dim: int, std_floor: float = STD_FLOOR) -> GmmParams:
    """Map one raw output vector to valid mixture parameters."""
    logits, means, log_stds = split_raw(np.asarray(raw, dtype=float)[None, :], k, dim)
    weights = _softmax(logits)[0]
    stds = np.maximum(np.exp(log_stds[0]), std_floor)
    return GmmParams(weights=weights, means=means[0], stds=stds)


def nll_loss_and_grad(
    raw: np.ndarray,
    targets: np.ndarray,
    k: int,
    dim: int,
    rw: RegularizerWeights,
    std_floor: float | np.ndarray = STD_FLOOR,
) -> tuple[float, np.ndarray]:
    """Mean (NLL + regularizer) over a batch and its gradient w.r.t. raw outputs.

    raw: (N, K(1+2*dim)) unconstrained network outputs.
    targets: (N, dim) groundtruth flattened coefficients.
    std_floor may be a per-dimension vector (used when training on
    standardized targets so the floor stays fixed in original units).
    Returns (loss, grad) with grad shaped like raw.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = raw.shape[0]
    if targets.shape != (n, dim):
        raise ShapeMismatchError(f"targets must be (N, {dim})")

    logits, means, log_stds = split_raw(raw, k, dim)
    # Divergent training can overflow here; the caller checks the loss for
    # finiteness, so inf/nan propagation is intentional.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        w = _softmax(logits)  # (N, K)
        sig_raw = np.exp(log_stds)
        clamped = sig_raw < std_floor
        sig = np.maximum(sig_raw, std_floor)  # (N, K, dim)

        diff = targets[:, None, :] - means  # (N, K, dim)
        z = diff / sig
        lp = 0.5 * np.sum(-(LOG_2PI + 2.0 * np.log(sig)) - z**2, axis=2)  # (N, K)

        a = np.log(w) + lp
        m = a.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(a - m), axis=1))
        nll_per = -lse  # (N,)
        resp = np.exp(a - lse[:, None])  # responsibilities, rows sum to 1

        # Regularizers on post-link parameters (weight-sum term vanishes
        # under softmax but is kept for generality).
        wsum_dev = w.sum(axis=1) - 1.0
        reg_per = (
            rw.lambda_wsum * wsum_dev**2
            + rw.lambda_wsparse * np.sum(np.sqrt(w), axis=1)
            + rw.lambda_std * np.sum(sig**2, axis=(1, 2))
        )
        loss = float(np.mean(nll_per + reg_per))

        # Gradients, all per-sample then scaled by 1/N.
        # d nll / d log w_k = -resp_k; through softmax: w_j - resp_j.
        g_logits_nll = w - resp
        # d reg / d w_k = 2*lambda_wsum*(sum w - 1)
        #               + lambda_wsparse * 0.5 / sqrt(w)
        dreg_dw = 2.0 * rw.lambda_wsum * wsum_dev[
            :, None
        ] + rw.lambda_wsparse * 0.5 / np.sqrt(np.maximum(w, 1e-300))
        # Softmax Jacobian: d w_k / d logit_j = w_k (delta_kj - w_j).
        g_logits_reg = w * (dreg_dw - np.sum(dreg_dw * w, axis=1, keepdims=True))
        g_logits = (g_logits_nll + g_logits_reg) / n

        g_means = (-resp[:, :, None] * (diff / sig**2)) / n

        # d nll / d log sigma = resp * (1 - z^2); clamp kills the gradient.
        g_log_stds_nll = resp[:, :, None] * (1.0 - z**2)
        g_log_stds_reg = rw.lambda_std * 2.0 * sig**2
        g_log_stds = np.where(clamped, 0.0, (g_log_stds_nll + g_log_stds_reg)) / n

    grad = np.concatenate(
        [g_logits, g_means.reshape(n, k * dim), g_log_stds.reshape(n, k * dim)], axis=1
    )
    return loss, grad
