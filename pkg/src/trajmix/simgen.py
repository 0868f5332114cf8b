"""Synthetic urban-driving data generator.

Simulates a unicycle vehicle through randomized maneuvers with smooth
control profiles and emits labeled samples: prediction-time input features
plus the groundtruth future trajectory in the local frame at the prediction
instant. The maneuver set deliberately spans both regimes of interest:
constant-control segments where a constant turn-rate extrapolation is exact,
and time-varying turns, stops, and hidden-choice T-intersections where it
fails.

Maneuvers
---------
straight        constant speed on a straight road.
left_turn/right_turn
                constant speed; turn rate follows a trapezoidal ramp that
                begins after the prediction instant.
stop            triangular braking profile (hardest at onset, easing off),
                terminal speed zero.
roundabout      constant turn rate and speed through the whole window.
t_intersection  decelerating approach, then a +-90 degree corner whose
                direction is hidden (50/50) and not encoded in any feature,
                yielding a genuinely bimodal future.

Scene features are the route's tangent-heading change at 8 lookahead
distances; for T-intersections both outcomes share the unsigned magnitude
so left and right futures are indistinguishable from the inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .basis import BasisSpec, CoeffVector, TrajectorySegment, project, to_local_frame
from .errors import ConfigError, DatasetParseError
from .predictors import InputFeatures, SCENE_DIM

MANEUVERS = (
    "straight",
    "left_turn",
    "right_turn",
    "stop",
    "roundabout",
    "t_intersection",
)

PAST_WINDOW = 2.0  # seconds of history before the prediction instant
FUTURE_HORIZON = 3.0
SAMPLE_STEP = 0.1
SIM_STEP = 0.01

WHEELBASE = 2.7  # m, for the steering-angle channel
PEDAL_ACCEL_SCALE = 3.0  # m/s^2 mapped to full pedal

SCENE_LOOKAHEADS = np.array([5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0])

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ChannelNoise:
    """Per-channel sensor noise standard deviations."""

    steering: float = 0.01  # rad
    pedal: float = 0.02  # fraction
    angular_velocity: float = 0.005  # rad/s
    linear_velocity: float = 0.05  # m/s
    position: float = 0.02  # m, past trajectory points

    def scaled(self, factor: float) -> "ChannelNoise":
        return ChannelNoise(
            *(factor * v for v in (self.steering, self.pedal, self.angular_velocity,
                                   self.linear_velocity, self.position))
        )


def _default_mix() -> dict[str, float]:
    return {
        "straight": 0.25,
        "left_turn": 0.15,
        "right_turn": 0.15,
        "stop": 0.15,
        "roundabout": 0.10,
        "t_intersection": 0.20,
    }


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs for one generated dataset."""

    maneuver_mix: dict[str, float] = field(default_factory=_default_mix)
    speed_range: tuple[float, float] = (5.0, 10.0)
    noise: ChannelNoise = field(default_factory=ChannelNoise)
    n_samples: int = 1000
    seed: int = 0
    # Feature channels replaced by pure noise (ablation studies); any of
    # "dynamics", "canbus", "imu", "scene".
    noise_only_channels: tuple[str, ...] = ()

    def __post_init__(self):
        probs = self.maneuver_mix
        unknown = set(probs) - set(MANEUVERS)
        if unknown:
            raise ConfigError(f"unknown maneuvers in mix: {sorted(unknown)}")
        if any(p < 0 for p in probs.values()):
            raise ConfigError("maneuver probabilities must be >= 0")
        if abs(sum(probs.values()) - 1.0) > 1e-9:
            raise ConfigError(
                f"maneuver probabilities must sum to 1, got {sum(probs.values()):.6f}"
            )
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise ConfigError("speed_range must satisfy 0 < lo <= hi")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        bad = set(self.noise_only_channels) - {"dynamics", "canbus", "imu", "scene"}
        if bad:
            raise ConfigError(f"unknown noise-only channels: {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_range"] = list(self.speed_range)
        d["noise_only_channels"] = list(self.noise_only_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(
            maneuver_mix=dict(d["maneuver_mix"]),
            speed_range=tuple(d["speed_range"]),
            noise=ChannelNoise(**d["noise"]),
            n_samples=int(d["n_samples"]),
            seed=int(d["seed"]),
            noise_only_channels=tuple(d.get("noise_only_channels", ())),
        )


@dataclass(frozen=True)
class Sample:
    """One labeled prediction problem."""

    id: int
    features: InputFeatures
    groundtruth_future: TrajectorySegment
    groundtruth_coeffs: CoeffVector
    maneuver: str  # analysis label, never an input
    meta: dict = field(default_factory=dict)


@dataclass
class _Profile:
    """Analytic control profile for one sample over t in [-PAST_WINDOW, FUTURE_HORIZON]."""

    maneuver: str
    v_init: float  # speed at t = -PAST_WINDOW
    # Turn trapezoid (left/right/T): start, ramp, hold, signed peak rate.
    turn_start: float = 0.0
    turn_ramp: float = 0.0
    turn_hold: float = 0.0
    omega_max: float = 0.0
    # Constant turn rate (roundabout).
    omega_const: float = 0.0
    # Stop: triangular brake a(t) = a0 * (1 - (t - brake_start)/brake_len).
    brake_start: float = 0.0
    brake_len: float = 0.0
    # T-intersection: linear decel from decel_start to turn_start down to v_slow.
    decel_start: float = 0.0
    v_slow: float = 0.0

    def omega_at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.maneuver == "roundabout":
            return np.full_like(t, self.omega_const)
        if self.maneuver in ("left_turn", "right_turn", "t_intersection"):
            s = t - self.turn_start
            up = np.clip(s / self.turn_ramp, 0.0, 1.0)
            down = np.clip(
                (s - self.turn_ramp - self.turn_hold) / self.turn_ramp, 0.0, 1.0
            )
            return self.omega_max * (up - down)
        return np.zeros_like(t)

    def accel_at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.maneuver == "stop":
            s = (t - self.brake_start) / self.brake_len
            a0 = 2.0 * self.v_init / self.brake_len
            return np.where((s >= 0) & (s < 1.0), -a0 * (1.0 - s), 0.0)
        if self.maneuver == "t_intersection":
            dur = self.turn_start - self.decel_start
            rate = (self.v_slow - self.v_init) / dur
            inside = (t >= self.decel_start) & (t < self.turn_start)
            return np.where(inside, rate, 0.0)
        return np.zeros_like(t)

    def speed_at_zero(self) -> float:
        """Analytic speed at the prediction instant."""
        if self.maneuver == "stop":
            s = np.clip(-self.brake_start / self.brake_len, 0.0, 1.0)
            return self.v_init * (1.0 - s) ** 2
        if self.maneuver == "t_intersection":
            dur = self.turn_start - self.decel_start
            frac = np.clip(-self.decel_start / dur, 0.0, 1.0)
            return self.v_init + (self.v_slow - self.v_init) * frac
        return self.v_init

    def distance_to_turn(self) -> float:
        """Arc length from the prediction instant to the turn onset."""
        if self.maneuver == "t_intersection":
            dur = self.turn_start - self.decel_start
            frac = np.clip(-self.decel_start / dur, 0.0, 1.0)
            v0 = self.v_init + (self.v_slow - self.v_init) * frac
            # Remaining braking: linear speed drop from v0 to v_slow over the
            # remaining approach, then none (turn starts at v_slow).
            t_rem = self.turn_start
            return 0.5 * (v0 + self.v_slow) * t_rem
        return self.speed_at_zero() * self.turn_start

    def scene_features(self) -> np.ndarray:
        """Route tangent-heading change at the fixed lookahead distances."""
        d = SCENE_LOOKAHEADS
        if self.maneuver == "roundabout":
            kappa = self.omega_const / max(self.v_init, 0.1)
            return np.clip(d * kappa, -np.pi, np.pi)
        if self.maneuver in ("left_turn", "right_turn", "t_intersection"):
            if self.maneuver == "t_intersection":
                v_turn, total = self.v_slow, np.pi / 2.0  # unsigned: direction hidden
                kappa = abs(self.omega_max) / max(v_turn, 0.1)
            else:
                v_turn = self.v_init
                total = self.omega_max * (self.turn_ramp + self.turn_hold)
                kappa = self.omega_max / max(v_turn, 0.1)
            s_turn = self.distance_to_turn()
            change = np.clip((d - s_turn) * kappa, 0.0, None) if kappa >= 0 else np.clip(
                (d - s_turn) * kappa, None, 0.0
            )
            mag = np.minimum(np.abs(change), abs(total))
            return np.sign(kappa) * mag if self.maneuver != "t_intersection" else mag
        return np.zeros_like(d)


def _draw_profile(maneuver: str, cfg: ScenarioConfig, rng: np.random.Generator) -> _Profile:
    lo, hi = cfg.speed_range
    v = rng.uniform(lo, hi)
    if maneuver == "straight":
        return _Profile(maneuver, v_init=v)
    if maneuver in ("left_turn", "right_turn"):
        sign = 1.0 if maneuver == "left_turn" else -1.0
        v_turn = max(3.0, 0.65 * v)
        total = sign * rng.uniform(np.deg2rad(50), np.deg2rad(75))
        ramp = rng.uniform(0.35, 0.55)
        hold = rng.uniform(0.8, 1.4)
        return _Profile(
            maneuver,
            v_init=v_turn,
            turn_start=rng.uniform(0.3, 1.2),
            turn_ramp=ramp,
            turn_hold=hold,
            omega_max=total / (ramp + hold),
        )
    if maneuver == "stop":
        # Braking is always in progress at the prediction instant so the
        # stop is readable from the past window; only the T-intersection
        # carries genuinely hidden outcomes.
        return _Profile(
            maneuver,
            v_init=v,
            brake_start=rng.uniform(-0.6, -0.15),
            brake_len=rng.uniform(1.5, 2.3),
        )
    if maneuver == "roundabout":
        omega = rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.35)
        return _Profile(maneuver, v_init=min(v, 2.5 / abs(omega)), omega_const=omega)
    if maneuver == "t_intersection":
        v_slow = rng.uniform(2.5, 3.5)
        turn_start = rng.uniform(0.5, 1.0)
        decel_start = rng.uniform(-1.5, -0.6)
        # Cap the approach deceleration at 3.5 m/s^2.
        v0 = min(v, v_slow + 3.5 * (turn_start - decel_start))
        sign = 1.0 if rng.random() < 0.5 else -1.0  # hidden choice
        radius = rng.uniform(2.5, 3.5)
        omega_max = v_slow / radius
        span = (np.pi / 2.0) / omega_max  # ramp + hold
        ramp = rng.uniform(0.3, min(0.45, span / 2.0))
        return _Profile(
            maneuver,
            v_init=v0,
            turn_start=turn_start,
            turn_ramp=ramp,
            turn_hold=span - ramp,
            omega_max=sign * omega_max,
            decel_start=decel_start,
            v_slow=v_slow,
        )
    raise ConfigError(f"unknown maneuver {maneuver!r}")


class _ProfileArrays:
    """Vectorized view of a profile list for fast batched control lookup."""

    def __init__(self, profiles: list[_Profile]):
        def arr(get):
            return np.array([get(p) for p in profiles], dtype=float)

        man = np.array([p.maneuver for p in profiles])
        self.is_turn = np.isin(man, ("left_turn", "right_turn", "t_intersection"))
        self.is_stop = man == "stop"
        self.is_t = man == "t_intersection"
        self.v_init = arr(lambda p: p.v_init)
        self.turn_start = arr(lambda p: p.turn_start)
        self.turn_ramp = np.where(self.is_turn, arr(lambda p: p.turn_ramp), 1.0)
        self.turn_hold = arr(lambda p: p.turn_hold)
        self.omega_max = np.where(self.is_turn, arr(lambda p: p.omega_max), 0.0)
        self.omega_const = arr(lambda p: p.omega_const)
        self.brake_start = arr(lambda p: p.brake_start)
        self.brake_len = np.where(self.is_stop, arr(lambda p: p.brake_len), 1.0)
        self.brake_a0 = np.where(self.is_stop, 2.0 * self.v_init / self.brake_len, 0.0)
        self.decel_start = arr(lambda p: p.decel_start)
        dur = np.where(self.is_t, self.turn_start - self.decel_start, 1.0)
        self.decel_rate = np.where(
            self.is_t, (arr(lambda p: p.v_slow) - self.v_init) / dur, 0.0
        )

    def omega_at(self, t: float) -> np.ndarray:
        s = t - self.turn_start
        up = np.clip(s / self.turn_ramp, 0.0, 1.0)
        down = np.clip((s - self.turn_ramp - self.turn_hold) / self.turn_ramp, 0.0, 1.0)
        return self.omega_const + self.omega_max * (up - down)

    def accel_at(self, t: float) -> np.ndarray:
        s = (t - self.brake_start) / self.brake_len
        braking = np.where(
            self.is_stop & (s >= 0) & (s < 1.0), -self.brake_a0 * (1.0 - s), 0.0
        )
        decel = np.where(
            self.is_t & (t >= self.decel_start) & (t < self.turn_start),
            self.decel_rate,
            0.0,
        )
        return braking + decel

    def speed_at(self, t: float) -> np.ndarray:
        """Exact analytic speed: integrating the profiles adds no value here."""
        s = np.clip((t - self.brake_start) / self.brake_len, 0.0, 1.0)
        stopping = self.v_init * (1.0 - s) ** 2
        dur = np.where(self.is_t, self.turn_start - self.decel_start, 1.0)
        frac = np.clip((t - self.decel_start) / dur, 0.0, 1.0)
        slowing = self.v_init + self.decel_rate * dur * frac
        return np.where(self.is_stop, stopping, np.where(self.is_t, slowing, self.v_init))


def _simulate(profiles: list[_Profile]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Integrate all profiles over the full window on the fine grid.

    Returns (times, xs, ys, headings) with shapes (T,), (N, T), (N, T), (N, T).
    Per step the turn rate and acceleration are held constant, the heading
    advances exactly, and positions follow the exact circular arc at the
    step's mean speed, so constant-control profiles integrate exactly.
    """
    n = len(profiles)
    pa = _ProfileArrays(profiles)
    steps = int(round((PAST_WINDOW + FUTURE_HORIZON) / SIM_STEP))
    times = -PAST_WINDOW + SIM_STEP * np.arange(steps + 1)
    xs = np.zeros((n, steps + 1))
    ys = np.zeros((n, steps + 1))
    headings = np.zeros((n, steps + 1))
    x = np.zeros(n)
    y = np.zeros(n)
    th = np.zeros(n)
    for i in range(steps):
        t = times[i]
        omega = pa.omega_at(t)
        v_eff = 0.5 * (pa.speed_at(t) + pa.speed_at(t + SIM_STEP))
        dth = omega * SIM_STEP
        straight = np.abs(omega) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            radius = np.where(straight, 0.0, v_eff / np.where(straight, 1.0, omega))
        x = x + np.where(
            straight,
            v_eff * np.cos(th) * SIM_STEP,
            radius * (np.sin(th + dth) - np.sin(th)),
        )
        y = y + np.where(
            straight,
            v_eff * np.sin(th) * SIM_STEP,
            radius * (np.cos(th) - np.cos(th + dth)),
        )
        th = th + dth
        xs[:, i + 1] = x
        ys[:, i + 1] = y
        headings[:, i + 1] = th
    return times, xs, ys, headings


def generate(config: ScenarioConfig) -> list[Sample]:
    """Draw and simulate `config.n_samples` labeled samples, deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    names = [m for m in MANEUVERS if config.maneuver_mix.get(m, 0.0) > 0]
    probs = np.array([config.maneuver_mix[m] for m in names])
    probs = probs / probs.sum()
    picks = rng.choice(len(names), size=config.n_samples, p=probs)
    profiles = [_draw_profile(names[k], config, rng) for k in picks]

    times, xs, ys, headings = _simulate(profiles)
    zero_idx = int(round(PAST_WINDOW / SIM_STEP))
    stride = int(round(SAMPLE_STEP / SIM_STEP))
    past_idx = np.arange(0, zero_idx + 1, stride)
    future_idx = np.arange(zero_idx, len(times), stride)

    basis_past = BasisSpec(degree=2, horizon=PAST_WINDOW)
    basis_future = BasisSpec(degree=2, horizon=FUTURE_HORIZON)
    noise = config.noise
    samples = []
    for i, prof in enumerate(profiles):
        pose = (xs[i, zero_idx], ys[i, zero_idx], headings[i, zero_idx])
        past_global = TrajectorySegment(
            times=times[past_idx], xs=xs[i, past_idx], ys=ys[i, past_idx]
        )
        future_global = TrajectorySegment(
            times=times[future_idx], xs=xs[i, future_idx], ys=ys[i, future_idx]
        )
        past = to_local_frame(past_global, pose)
        future = to_local_frame(future_global, pose)

        # Localization noise on past points relative to the anchored pose;
        # the t = 0 point stays at the exact origin by construction. Noise
        # draws are consumed unconditionally so datasets sharing a seed have
        # identical geometry across noise settings.
        px = past.xs.copy()
        py = past.ys.copy()
        px[:-1] += noise.position * rng.standard_normal(len(px) - 1)
        py[:-1] += noise.position * rng.standard_normal(len(py) - 1)
        past_noisy = TrajectorySegment(times=past.times, xs=px, ys=py)
        past_coeffs = project(past_noisy, basis_past)

        v0 = prof.speed_at_zero()
        w0 = float(prof.omega_at(np.array([0.0]))[0])
        a0 = float(prof.accel_at(np.array([0.0]))[0])
        steering = float(
            np.arctan(WHEELBASE * w0 / max(v0, 0.5))
            + noise.steering * rng.standard_normal()
        )
        pedal = float(
            np.clip(
                np.clip(a0 / PEDAL_ACCEL_SCALE, 0.0, 1.0)
                + noise.pedal * rng.standard_normal(),
                0.0,
                1.0,
            )
        )
        ang_vel = float(w0 + noise.angular_velocity * rng.standard_normal())
        lin_vel = float(max(0.0, v0 + noise.linear_velocity * rng.standard_normal()))
        scene = prof.scene_features()

        if "dynamics" in config.noise_only_channels:
            past_coeffs = CoeffVector(
                cx=rng.standard_normal(3), cy=rng.standard_normal(3), basis=basis_past
            )
        if "canbus" in config.noise_only_channels:
            steering = float(rng.standard_normal())
            pedal = float(np.clip(0.5 + rng.standard_normal(), 0.0, 1.0))
        if "imu" in config.noise_only_channels:
            ang_vel = float(rng.standard_normal())
            lin_vel = float(abs(rng.standard_normal()))
        if "scene" in config.noise_only_channels:
            scene = rng.standard_normal(SCENE_DIM)

        features = InputFeatures(
            past_coeffs=past_coeffs,
            steering_angle=steering,
            pedal=pedal,
            angular_velocity=ang_vel,
            linear_velocity=lin_vel,
            scene_features=scene,
        )
        meta = {"v_at_zero": float(v0), "accel_at_zero": float(a0)}
        if prof.maneuver == "stop":
            t_rem = max(prof.brake_start + prof.brake_len, 0.0)
            meta["stop_time_s"] = float(t_rem)
            meta["mean_decel"] = float(v0 / t_rem) if t_rem > 0 else 0.0
        if prof.maneuver == "t_intersection":
            meta["hidden_turn_sign"] = float(np.sign(prof.omega_max))
        samples.append(
            Sample(
                id=i,
                features=features,
                groundtruth_future=future,
                groundtruth_coeffs=project(future, basis_future),
                maneuver=prof.maneuver,
                meta=meta,
            )
        )
    return samples


def split(dataset, fractions, seed: int):
    """Seeded shuffle split into len(fractions) disjoint covering parts."""
    fractions = list(fractions)
    if any(f <= 0 for f in fractions):
        raise ConfigError("split fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    samples = list(dataset)
    order = np.random.default_rng(seed).permutation(len(samples))
    bounds = np.round(np.cumsum(fractions) * len(samples)).astype(int)
    parts = []
    start = 0
    for b in bounds:
        parts.append([samples[j] for j in order[start:b]])
        start = b
    return tuple(parts)


# ---------------------------------------------------------------------------
# JSON Lines dataset serialization.
# ---------------------------------------------------------------------------


def _sample_to_dict(s: Sample) -> dict:
    f = s.features
    return {
        "id": s.id,
        "maneuver": s.maneuver,
        "features": {
            "past_cx": f.past_coeffs.cx.tolist(),
            "past_cy": f.past_coeffs.cy.tolist(),
            "past_basis": {
                "degree": f.past_coeffs.basis.degree,
                "horizon": f.past_coeffs.basis.horizon,
            },
            "steering_angle": f.steering_angle,
            "pedal": f.pedal,
            "angular_velocity": f.angular_velocity,
            "linear_velocity": f.linear_velocity,
            "scene_features": f.scene_features.tolist(),
        },
        "future": {
            "times": s.groundtruth_future.times.tolist(),
            "xs": s.groundtruth_future.xs.tolist(),
            "ys": s.groundtruth_future.ys.tolist(),
        },
        "coeffs": {
            "cx": s.groundtruth_coeffs.cx.tolist(),
            "cy": s.groundtruth_coeffs.cy.tolist(),
            "basis": {
                "degree": s.groundtruth_coeffs.basis.degree,
                "horizon": s.groundtruth_coeffs.basis.horizon,
            },
        },
        "meta": s.meta,
    }


def sample_from_dict(d: dict) -> Sample:
    f = d["features"]
    past_basis = BasisSpec(**f["past_basis"])
    features = InputFeatures(
        past_coeffs=CoeffVector(cx=f["past_cx"], cy=f["past_cy"], basis=past_basis),
        steering_angle=float(f["steering_angle"]),
        pedal=float(f["pedal"]),
        angular_velocity=float(f["angular_velocity"]),
        linear_velocity=float(f["linear_velocity"]),
        scene_features=np.asarray(f["scene_features"], dtype=float),
    )
    fut = d["future"]
    future = TrajectorySegment(times=fut["times"], xs=fut["xs"], ys=fut["ys"])
    c = d["coeffs"]
    coeffs = CoeffVector(cx=c["cx"], cy=c["cy"], basis=BasisSpec(**c["basis"]))
    return Sample(
        id=int(d["id"]),
        features=features,
        groundtruth_future=future,
        groundtruth_coeffs=coeffs,
        maneuver=str(d["maneuver"]),
        meta=dict(d.get("meta", {})),
    )


def save_dataset(path, samples: list[Sample], config: ScenarioConfig) -> None:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "trajmix-dataset",
        "scenario": config.to_dict(),
        "basis": {"degree": 2, "horizon": FUTURE_HORIZON},
        "n_samples": len(samples),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_to_dict(s), sort_keys=True) + "\n")


def load_dataset(path) -> tuple[list[Sample], dict]:
    samples = []
    with open(path) as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise DatasetParseError(f"invalid header: {e}", line=1) from None
        if header.get("kind") != "trajmix-dataset":
            raise DatasetParseError("not a trajmix dataset (bad header kind)", line=1)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetParseError(str(e), line=lineno) from None
    return samples, header
