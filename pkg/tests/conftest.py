import numpy as np
import pytest

from trajmix.basis import BasisSpec, CoeffVector, reconstruct
from trajmix.predictors import InputFeatures
from trajmix.simgen import Sample


def make_features(rng, past_coeffs=None, degree=2, **overrides):
    """Random but physically plausible input features."""
    past_basis = BasisSpec(degree=degree, horizon=2.0)
    if past_coeffs is None:
        past_coeffs = CoeffVector(
            cx=rng.normal(0, 1, size=degree + 1),
            cy=rng.normal(0, 0.3, size=degree + 1),
            basis=past_basis,
        )
    defaults = dict(
        steering_angle=float(rng.normal(0, 0.1)),
        pedal=float(rng.uniform(0, 1)),
        angular_velocity=float(rng.normal(0, 0.2)),
        linear_velocity=float(rng.uniform(0, 12)),
        scene_features=rng.normal(0, 1, size=8),
    )
    defaults.update(overrides)
    return InputFeatures(past_coeffs=past_coeffs, **defaults)


# Deterministic linear map from past to future coefficients, shaped like
# smooth driving: future velocity continues the past velocity plus an
# acceleration carry-over, future curvature terms stay small.
CONTINUATION_MAP = np.array(
    [
        # fx0   fx1   fx2   fy0   fy1   fy2      <- outputs; inputs are rows
        [0.10, 0.00, 0.00, 0.00, 0.02, 0.00],  # past cx0
        [0.02, 1.00, 0.00, 0.00, 0.00, 0.01],  # past cx1 (vx)
        [0.05, 1.20, 0.25, 0.00, 0.00, 0.00],  # past cx2 (ax)
        [0.00, 0.00, 0.01, 0.10, 0.00, 0.00],  # past cy0
        [0.00, 0.02, 0.00, 0.05, 1.00, 0.00],  # past cy1 (vy)
        [0.00, 0.00, 0.00, 0.00, 1.00, 0.30],  # past cy2 (ay)
    ]
).T


def linear_dynamics_dataset(n, seed, noise=0.0):
    """Samples whose future coefficients are a fixed linear map of the past.

    The only informative channel is the past-dynamics child; everything else
    is independent noise, so the mapping is exactly learnable.
    """
    rng = np.random.default_rng(seed)
    past_basis = BasisSpec(degree=2, horizon=2.0)
    future_basis = BasisSpec(degree=2, horizon=3.0)
    times = np.round(np.arange(31) * 0.1, 10)
    samples = []
    for i in range(n):
        past = CoeffVector(
            cx=[rng.normal(0, 0.1), rng.uniform(4, 10), rng.normal(0, 0.3)],
            cy=[rng.normal(0, 0.1), rng.normal(0, 0.4), rng.normal(0, 0.15)],
            basis=past_basis,
        )
        feats = make_features(rng, past_coeffs=past)
        target = CONTINUATION_MAP @ past.flat()
        if noise > 0:
            target = target + rng.normal(0, noise, size=6)
        coeffs = CoeffVector(cx=target[:3], cy=target[3:], basis=future_basis)
        samples.append(
            Sample(
                id=i,
                features=feats,
                groundtruth_future=reconstruct(coeffs, times),
                groundtruth_coeffs=coeffs,
                maneuver="synthetic",
            )
        )
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(0)
