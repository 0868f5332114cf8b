"""Candidate trajectory predictors behind one common interface.

Two candidates are registered: the learned variational predictor (per-sensor
children networks whose outputs are concatenated with block-dropout and fed
to a trunk network emitting mixture parameters) and the wheel-odometry
expert, which extrapolates the current measured velocity and turn rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import gmm as gmm_mod
from .basis import BasisSpec, CoeffVector, TrajectorySegment, project
from .errors import EmptyDatasetError, NaNLossError, ShapeMismatchError
from .gmm import GmmParams, RegularizerWeights
from .net import AdamState, LayerSpec, Mlp, TrainConfig, adam_step, block_dropout


class PredictorId(str, Enum):
    """The registered candidate predictors."""

    VARIATIONAL = "variational"
    ODOMETRY = "odometry"


# Registry order; confidence polynomials are position-coded by this.
PREDICTOR_REGISTRY: tuple[PredictorId, ...] = (
    PredictorId.VARIATIONAL,
    PredictorId.ODOMETRY,
)

# Children in feature-vector order.
CHILD_ORDER: tuple[str, ...] = ("dynamics", "canbus", "imu", "scene")

SCENE_DIM = 8

CHILD_HIDDEN = 10  # two hidden layers of this width per child
TRUNK_HIDDEN = (100, 100, 100, 50)

BLOCK_DROPOUT_P = 0.05

# Turn rates below this use the straight-line formula [rad/s]. Small enough
# that the two branches agree to < 1e-6 m over 3 s at urban speeds.
OMEGA_EPS = 1e-8

# Std assigned to each coefficient when the deterministic expert is wrapped
# as a one-component mixture.
ODOMETRY_STD = 0.5


@dataclass(frozen=True)
class InputFeatures:
    """One prediction-time input record (the model's conditioning variables)."""

    past_coeffs: CoeffVector
    steering_angle: float  # rad
    pedal: float  # gas pedal position in [0, 1]
    angular_velocity: float  # rad/s
    linear_velocity: float  # m/s
    scene_features: np.ndarray  # road-geometry summary, fixed length

    def __post_init__(self):
        object.__setattr__(
            self, "scene_features", np.asarray(self.scene_features, dtype=float)
        )
        scalars = (
            self.steering_angle,
            self.pedal,
            self.angular_velocity,
            self.linear_velocity,
        )
        if not all(math.isfinite(s) for s in scalars):
            raise ValueError("all scalar features must be finite")
        if not np.all(np.isfinite(self.scene_features)):
            raise ValueError("scene features must be finite")
        if self.linear_velocity < 0:
            raise ValueError("linear_velocity must be >= 0")


def feature_vector(x: InputFeatures) -> np.ndarray:
    """Flatten features in the fixed child order: past coeffs, CAN, IMU, scene."""
    return np.concatenate(
        [
            x.past_coeffs.flat(),
            [x.steering_angle, x.pedal],
            [x.angular_velocity, x.linear_velocity],
            x.scene_features,
        ]
    )


def child_slices(degree: int, scene_dim: int = SCENE_DIM) -> dict[str, slice]:
    """Index ranges of each child's input inside the full feature vector."""
    d2 = 2 * (degree + 1)
    return {
        "dynamics": slice(0, d2),
        "canbus": slice(d2, d2 + 2),
        "imu": slice(d2 + 2, d2 + 4),
        "scene": slice(d2 + 4, d2 + 4 + scene_dim),
    }


def _child_specs(in_dim: int) -> list[LayerSpec]:
    return [
        LayerSpec(in_dim, CHILD_HIDDEN, activation="relu", batch_norm=True),
        LayerSpec(CHILD_HIDDEN, CHILD_HIDDEN, activation="relu", batch_norm=True),
    ]


def _trunk_specs(in_dim: int, out_dim: int, dropout_p: float = 0.0) -> list[LayerSpec]:
    specs = []
    dims = (in_dim, *TRUNK_HIDDEN)
    for a, b in zip(dims, dims[1:]):
        specs.append(LayerSpec(a, b, activation="relu", dropout_p=dropout_p))
    specs.append(LayerSpec(dims[-1], out_dim, activation="identity"))
    return specs


@dataclass
class CompositeNet:
    """Children networks feeding a trunk through block-dropout concatenation."""

    children: dict[str, Mlp]
    trunk: Mlp
    slices: dict[str, slice]
    block_dropout_p: float = BLOCK_DROPOUT_P

    @classmethod
    def build(
        cls,
        child_names: tuple[str, ...],
        feature_dim: int,
        out_dim: int,
        degree: int,
        rng: np.random.Generator,
        scene_dim: int = SCENE_DIM,
        block_dropout_p: float = BLOCK_DROPOUT_P,
    ) -> "CompositeNet":
        slices = child_slices(degree, scene_dim)
        unknown = set(child_names) - set(slices)
        if unknown:
            raise ValueError(f"unknown children: {sorted(unknown)}")
        children = {
            name: Mlp.build(_child_specs(slices[name].stop - slices[name].start), rng)
            for name in child_names
        }
        concat_dim = CHILD_HIDDEN * len(children)
        trunk = Mlp.build(_trunk_specs(concat_dim, out_dim), rng)
        del feature_dim  # implied by degree/scene_dim; kept for call-site clarity
        return cls(children=children, trunk=trunk, slices=slices, block_dropout_p=block_dropout_p)

    @property
    def child_names(self) -> tuple[str, ...]:
        return tuple(self.children)

    def forward(
        self,
        features: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict]:
        """Raw trunk outputs for a feature batch (N, F) or vector (F,)."""
        x = np.asarray(features, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        child_outs, child_caches = [], {}
        for name, child in self.children.items():
            out, cache = child.forward(x[:, self.slices[name]], mode=mode, rng=rng)
            child_outs.append(out)
            child_caches[name] = cache
        concat, keep = block_dropout(child_outs, self.block_dropout_p, mode=mode, rng=rng)
        raw, trunk_cache = self.trunk.forward(concat, mode=mode, rng=rng)
        cache = {
            "children": child_caches,
            "trunk": trunk_cache,
            "keep": keep,
            "n": x.shape[0],
        }
        return (raw[0] if squeeze else raw), cache

    def backward(self, cache: dict, g_raw: np.ndarray) -> dict:
        """Gradients for all children and the trunk from dLoss/draw."""
        g = np.atleast_2d(np.asarray(g_raw, dtype=float))
        trunk_grads, g_concat = self.trunk.backward(cache["trunk"], g)
        keep = cache["keep"]
        scale = 1.0 / (1.0 - self.block_dropout_p) if self.block_dropout_p > 0 else 1.0
        grads = {"trunk": trunk_grads, "children": {}}
        offset = 0
        for j, (name, child) in enumerate(self.children.items()):
            width = child.out_dim
            g_child = g_concat[:, offset : offset + width]
            if keep is not None:
                g_child = g_child * keep[:, j : j + 1] * scale
            child_grads, _ = child.backward(cache["children"][name], g_child)
            grads["children"][name] = child_grads
            offset += width
        return grads

    def trainable(self) -> list[np.ndarray]:
        arrays = []
        for child in self.children.values():
            arrays.extend(child.trainable())
        arrays.extend(self.trunk.trainable())
        return arrays

    def grads_in_order(self, grads: dict) -> list[np.ndarray]:
        arrays = []
        for name, child in self.children.items():
            arrays.extend(child.grads_in_order(grads["children"][name]))
        arrays.extend(self.trunk.grads_in_order(grads["trunk"]))
        return arrays

    def to_dict(self) -> dict:
        return {
            "children": {n: c.to_dict() for n, c in self.children.items()},
            "trunk": self.trunk.to_dict(),
            "slices": {n: [s.start, s.stop] for n, s in self.slices.items()},
            "block_dropout_p": self.block_dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompositeNet":
        return cls(
            children={n: Mlp.from_dict(c) for n, c in d["children"].items()},
            trunk=Mlp.from_dict(d["trunk"]),
            slices={n: slice(a, b) for n, (a, b) in d["slices"].items()},
            block_dropout_p=float(d["block_dropout_p"]),
        )


@dataclass
class Normalizer:
    """Per-feature standardization fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        return cls(mean=mean, std=std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            mean=np.asarray(d["mean"], dtype=float),
            std=np.asarray(d["std"], dtype=float),
        )


@dataclass
class VariationalModel:
    """Trained variational predictor: composite net plus output links.

    The network regresses in standardized coefficient space (per-dimension
    z-scores of the training targets); emitted mixtures are mapped back to
    original coefficient units here.
    """

    net: CompositeNet
    normalizer: Normalizer
    target_normalizer: Normalizer
    basis: BasisSpec
    n_components: int
    std_floor: float = gmm_mod.STD_FLOOR

    @property
    def coeff_dim(self) -> int:
        return 2 * self.basis.n_coeffs

    def mixture_from_raw(self, raw: np.ndarray) -> GmmParams:
        """Decode one raw output vector into original-unit mixture params."""
        logits, means_n, log_stds_n = gmm_mod.split_raw(
            np.asarray(raw, dtype=float)[None, :], self.n_components, self.coeff_dim
        )
        scale = self.target_normalizer.std
        shift = self.target_normalizer.mean
        weights = np.exp(logits[0] - logits[0].max())
        weights = weights / weights.sum()
        means = means_n[0] * scale + shift
        stds = np.maximum(np.exp(log_stds_n[0]) * scale, self.std_floor)
        return GmmParams(weights=weights, means=means, stds=stds)

    def to_dict(self) -> dict:
        return {
            "kind": "variational",
            "net": self.net.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "target_normalizer": self.target_normalizer.to_dict(),
            "basis": {"degree": self.basis.degree, "horizon": self.basis.horizon},
            "n_components": self.n_components,
            "std_floor": self.std_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalModel":
        return cls(
            net=CompositeNet.from_dict(d["net"]),
            normalizer=Normalizer.from_dict(d["normalizer"]),
            target_normalizer=Normalizer.from_dict(d["target_normalizer"]),
            basis=BasisSpec(**d["basis"]),
            n_components=int(d["n_components"]),
            std_floor=float(d["std_floor"]),
        )


def variational_predict(
    model: VariationalModel,
    x: InputFeatures,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> GmmParams:
    """Mixture parameters over future coefficients for one input."""
    feats = model.normalizer.apply(feature_vector(x))
    raw, _ = model.net.forward(feats, mode=mode, rng=rng)
    return model.mixture_from_raw(raw)


def variational_predict_batch(
    model: VariationalModel, features: np.ndarray
) -> list[GmmParams]:
    """Eval-mode predictions for a stacked feature matrix (N, F)."""
    raw, _ = model.net.forward(model.normalizer.apply(features), mode="eval")
    return [model.mixture_from_raw(r) for r in np.atleast_2d(raw)]


def _epoch_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _fit_composite(
    net: CompositeNet,
    features: np.ndarray,
    loss_grad_fn,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Generic minibatch Adam loop; loss_grad_fn(raw, idx) -> (loss, draw)."""
    params = net.trainable()
    state = AdamState.for_arrays(params)
    history = []
    step = 0
    n = features.shape[0]
    for _ in range(config.epochs):
        total, seen = 0.0, 0
        for idx in _epoch_batches(n, config.batch_size, rng):
            raw, cache = net.forward(features[idx], mode="train", rng=rng)
            loss, g_raw = loss_grad_fn(np.atleast_2d(raw), idx)
            if not np.isfinite(loss):
                raise NaNLossError(f"non-finite training loss at step {step}")
            grads = net.backward(cache, g_raw)
            step += 1
            adam_step(params, net.grads_in_order(grads), state, config, step)
            total += loss * len(idx)
            seen += len(idx)
        history.append(total / seen)
    return history


def train_variational(
    dataset,
    config: TrainConfig,
    reg: RegularizerWeights,
    *,
    basis: BasisSpec | None = None,
    n_components: int = 3,
    children: tuple[str, ...] = CHILD_ORDER,
    block_dropout_p: float = BLOCK_DROPOUT_P,
    std_floor: float = gmm_mod.STD_FLOOR,
) -> tuple[VariationalModel, list[float]]:
    """Fit the variational predictor on (features, future-coefficient) pairs.

    `dataset` is a sequence of simgen Samples (anything exposing `.features`
    and `.groundtruth_coeffs`). Returns the trained model and the per-epoch
    mean training loss (NLL plus regularizers).
    """
    samples = list(dataset)
    if not samples:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if basis is None:
        basis = samples[0].groundtruth_coeffs.basis
    feats = np.stack([feature_vector(s.features) for s in samples])
    targets = np.stack([s.groundtruth_coeffs.flat() for s in samples])
    dim = 2 * basis.n_coeffs
    if targets.shape[1] != dim:
        raise ShapeMismatchError("groundtruth coefficients do not match basis")

    rng = np.random.default_rng(config.seed)
    normalizer = Normalizer.fit(feats)
    feats_n = normalizer.apply(feats)
    target_normalizer = Normalizer.fit(targets)
    targets_n = target_normalizer.apply(targets)
    # Clamp in normalized space where the original-unit floor lands.
    floor_n = std_floor / target_normalizer.std
    net = CompositeNet.build(
        children,
        feats.shape[1],
        gmm_mod.raw_param_count(n_components, dim),
        basis.degree,
        rng,
        block_dropout_p=block_dropout_p,
    )

    def loss_grad(raw, idx):
        return gmm_mod.nll_loss_and_grad(
            raw, targets_n[idx], n_components, dim, reg, floor_n
        )

    history = _fit_composite(net, feats_n, loss_grad, config, rng)
    model = VariationalModel(
        net=net,
        normalizer=normalizer,
        target_normalizer=target_normalizer,
        basis=basis,
        n_components=n_components,
        std_floor=std_floor,
    )
    return model, history


def odometry_predict(x: InputFeatures, times) -> TrajectorySegment:
    """Constant turn-rate and velocity extrapolation from measured state.

    x(t) = (v/w) sin(wt), y(t) = (v/w)(1 - cos(wt)); straight line below
    OMEGA_EPS where the closed form loses precision.
    """
    times = np.asarray(times, dtype=float)
    v = x.linear_velocity
    w = x.angular_velocity
    if abs(w) < OMEGA_EPS:
        xs = v * times
        ys = np.zeros_like(times)
    else:
        xs = (v / w) * np.sin(w * times)
        ys = (v / w) * (1.0 - np.cos(w * times))
    return TrajectorySegment(times=times, xs=xs, ys=ys)


def odometry_as_gmm(
    x: InputFeatures, spec: BasisSpec, std: float = ODOMETRY_STD
) -> GmmParams:
    """Wrap the deterministic expert as a one-component mixture.

    The mean is the basis projection of the extrapolated arc; the stds are a
    fixed constant so the expert can enter likelihood comparisons.
    """
    times = np.arange(1, int(round(spec.horizon / 0.1)) + 1) * 0.1
    traj = odometry_predict(x, times)
    coeffs = project(traj, spec)
    dim = 2 * spec.n_coeffs
    return GmmParams(
        weights=np.array([1.0]),
        means=coeffs.flat()[None, :],
        stds=np.full((1, dim), float(std)),
    )
