"""Polynomial basis projection and reconstruction of planar trajectories.

Trajectories live in the local vehicle frame at prediction time: x along the
heading, y to the left, t = 0 at the prediction instant (past samples carry
negative times). A trajectory is compressed to one coefficient vector per
axis by least-squares projection onto a monomial basis [1, t, t^2, ...] and
recovered by evaluating the polynomial at arbitrary times.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankDeficientError

# Relative singular-value cutoff for the least-squares solve.
RANK_TOLERANCE = 1e-10

# Default sampling step for trajectory grids [s].
SAMPLE_STEP = 0.1


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis of `degree` over horizons up to `horizon` seconds."""

    degree: int = 2
    horizon: float = 3.0

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    @property
    def n_coeffs(self) -> int:
        return self.degree + 1


@dataclass(frozen=True)
class TrajectorySegment:
    """Timestamped 2D positions, times strictly increasing [s, m, m]."""

    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "xs", np.asarray(self.xs, dtype=float))
        object.__setattr__(self, "ys", np.asarray(self.ys, dtype=float))
        if not (len(self.times) == len(self.xs) == len(self.ys)):
            raise ValueError("times, xs, ys must have equal length")
        if len(self.times) == 0:
            raise ValueError("trajectory segment must be non-empty")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def position_at(self, t: float, atol: float = 1e-9) -> tuple[float, float]:
        """Position at sample time `t` (must be on the sampling grid)."""
        idx = np.nonzero(np.abs(self.times - t) <= atol)[0]
        if len(idx) == 0:
            raise KeyError(f"time {t} not in trajectory grid")
        i = int(idx[0])
        return float(self.xs[i]), float(self.ys[i])


@dataclass(frozen=True)
class CoeffVector:
    """Per-axis polynomial coefficients, lowest order first."""

    cx: np.ndarray
    cy: np.ndarray
    basis: BasisSpec = field(default_factory=BasisSpec)

    def __post_init__(self):
        object.__setattr__(self, "cx", np.asarray(self.cx, dtype=float))
        object.__setattr__(self, "cy", np.asarray(self.cy, dtype=float))
        n = self.basis.n_coeffs
        if len(self.cx) != n or len(self.cy) != n:
            raise ValueError(
                f"coefficient length must be degree+1 = {n}, "
                f"got cx={len(self.cx)}, cy={len(self.cy)}"
            )

    def flat(self) -> np.ndarray:
        """Concatenated (cx, cy) vector of length 2*(degree+1)."""
        return np.concatenate([self.cx, self.cy])


def coeffs_from_flat(flat: np.ndarray, basis: BasisSpec) -> CoeffVector:
    """Inverse of CoeffVector.flat()."""
    flat = np.asarray(flat, dtype=float)
    n = basis.n_coeffs
    if flat.shape != (2 * n,):
        raise ValueError(f"expected flat coefficient vector of length {2 * n}")
    return CoeffVector(cx=flat[:n], cy=flat[n:], basis=basis)


def build_basis_matrix(spec: BasisSpec, times) -> np.ndarray:
    """Vandermonde matrix with entry (i, j) = times[i]**j, shape (len(times), degree+1)."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("times must be non-empty")
    return np.vander(times, N=spec.n_coeffs, increasing=True)


def project(traj: TrajectorySegment, spec: BasisSpec) -> CoeffVector:
    """Least-squares fit of the trajectory onto the basis, one solve per axis.

    Raises RankDeficientError when the sample times cannot support the basis
    (fewer samples than coefficients, or numerically dependent columns).
    """
    n = spec.n_coeffs
    if len(traj) < n:
        raise RankDeficientError(
            f"need at least {n} samples to fit degree {spec.degree}, got {len(traj)}"
        )
    b = build_basis_matrix(spec, traj.times)
    targets = np.stack([traj.xs, traj.ys], axis=1)
    coeffs, _, rank, _ = np.linalg.lstsq(b, targets, rcond=RANK_TOLERANCE)
    if rank < n:
        raise RankDeficientError(
            f"basis matrix rank {rank} < {n}; degenerate sample times"
        )
    return CoeffVector(cx=coeffs[:, 0], cy=coeffs[:, 1], basis=spec)


def reconstruct(c: CoeffVector, times) -> TrajectorySegment:
    """Evaluate the coefficient polynomials at `times`."""
    b = build_basis_matrix(c.basis, times)
    return TrajectorySegment(times=np.asarray(times, dtype=float), xs=b @ c.cx, ys=b @ c.cy)


def to_local_frame(
    global_traj: TrajectorySegment, pose: tuple[float, float, float]
) -> TrajectorySegment:
    """Rigid transform of a trajectory into the frame anchored at `pose`.

    `pose` is (x, y, heading[rad]) in the source frame; it maps to the origin
    with zero heading.
    """
    px, py, heading = pose
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    dx = global_traj.xs - px
    dy = global_traj.ys - py
    return TrajectorySegment(
        times=global_traj.times,
        xs=cos_h * dx + sin_h * dy,
        ys=-sin_h * dx + cos_h * dy,
    )


def from_local_frame(
    local_traj: TrajectorySegment, pose: tuple[float, float, float]
) -> TrajectorySegment:
    """Inverse of to_local_frame."""
    px, py, heading = pose
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    return TrajectorySegment(
        times=local_traj.times,
        xs=px + cos_h * local_traj.xs - sin_h * local_traj.ys,
        ys=py + sin_h * local_traj.xs + cos_h * local_traj.ys,
    )


def sample_times(horizon: float, step: float = SAMPLE_STEP, include_zero: bool = False) -> np.ndarray:
    """Regular future grid (step, 2*step, ..., horizon], optionally with t=0."""
    n = int(round(horizon / step))
    times = (np.arange(1, n + 1)) * step
    if include_zero:
        times = np.concatenate([[0.0], times])
    return times
