"""Command-line pipeline: data generation, training, evaluation, prediction.

Subcommands: gen-data, train, evaluate, ablate-all, predict. All randomness
flows from one root seed expanded per stage by hashing the stage name, so
every command is reproducible in isolation. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.

The optional JSON config file uses unit-suffixed field names; flags override
file values. See README for the full schema.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .confidence import (
    ConfidenceModel,
    TRAIN_HORIZON_GRID,
    build_confidence_dataset,
    train_confidence,
)
from .errors import (
    ConfigError,
    DatasetError,
    DatasetParseError,
    MissingCheckpointError,
    NumericalError,
)
from .evaluation import (
    build_report,
    decision_log_lines,
    information_gain_samples,
    run_evaluation,
)
from .gmm import RegularizerWeights, sample as gmm_sample
from .mixture import MixtureModels, ThresholdConfig, mixture_predict
from .net import TrainConfig
from .predictors import CHILD_ORDER, VariationalModel, train_variational
from .simgen import (
    ChannelNoise,
    ScenarioConfig,
    generate,
    load_dataset,
    sample_from_dict,
    save_dataset,
    split,
)

CHECKPOINT_FORMAT_VERSION = 1

REPORT_DIR_ENV = "TRAJMIX_REPORT_DIR"


def derive_seed(root_seed: int, stage: str) -> int:
    """Stage seed = first 8 bytes of sha256("<root>:<stage>"), as an int."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Run configuration: defaults <- config file <- flags.
# ---------------------------------------------------------------------------


def _scenario_from_cfg(d: dict) -> ScenarioConfig:
    noise_d = d.get("noise", {})
    noise = ChannelNoise(
        steering=noise_d.get("steering_rad", 0.01),
        pedal=noise_d.get("pedal_frac", 0.02),
        angular_velocity=noise_d.get("angular_velocity_rps", 0.005),
        linear_velocity=noise_d.get("linear_velocity_mps", 0.05),
        position=noise_d.get("position_m", 0.02),
    )
    kwargs = {"noise": noise}
    if "maneuver_mix" in d:
        kwargs["maneuver_mix"] = dict(d["maneuver_mix"])
    if "speed_range_mps" in d:
        kwargs["speed_range"] = tuple(d["speed_range_mps"])
    if "n_samples" in d:
        kwargs["n_samples"] = int(d["n_samples"])
    if "noise_only_channels" in d:
        kwargs["noise_only_channels"] = tuple(d["noise_only_channels"])
    return ScenarioConfig(seed=0, **kwargs)


class RunConfig:
    """Resolved settings for one CLI invocation."""

    def __init__(self, file_cfg: dict, args: argparse.Namespace):
        self.seed = int(
            args.seed if args.seed is not None else file_cfg.get("seed", 0)
        )
        scenario = _scenario_from_cfg(file_cfg.get("scenario", {}))
        if getattr(args, "samples", None) is not None:
            scenario = ScenarioConfig(
                maneuver_mix=scenario.maneuver_mix,
                speed_range=scenario.speed_range,
                noise=scenario.noise,
                n_samples=args.samples,
                seed=0,
                noise_only_channels=scenario.noise_only_channels,
            )
        self.scenario = scenario

        t = file_cfg.get("train", {})
        self.train = TrainConfig(
            batch_size=int(t.get("batch_size", 64)),
            epochs=int(
                args.epochs if getattr(args, "epochs", None) is not None
                else t.get("epochs", 200)
            ),
            learning_rate=float(
                args.learning_rate
                if getattr(args, "learning_rate", None) is not None
                else t.get("learning_rate", 1e-4)
            ),
            adam_beta1=float(t.get("adam_beta1", 0.9)),
            adam_beta2=float(t.get("adam_beta2", 0.999)),
            adam_eps=float(t.get("adam_eps", 1e-8)),
            seed=0,
        )

        th = file_cfg.get("thresholds", {})
        self.thresholds = ThresholdConfig(
            uncertain_threshold=float(th.get("uncertain_threshold_m", 2.54)),
            hard_threshold=float(th.get("hard_threshold_m", 5.0)),
            decision_horizon=float(th.get("decision_horizon_s", 3.0)),
        )

        r = file_cfg.get("regularizers", {})
        self.regularizers = RegularizerWeights(
            lambda_wsum=float(r.get("lambda_wsum", 1.0)),
            lambda_wsparse=float(r.get("lambda_wsparse", 0.01)),
            lambda_std=float(r.get("lambda_std", 0.001)),
        )

        children = file_cfg.get("children", list(CHILD_ORDER))
        unknown = set(children) - set(CHILD_ORDER)
        if unknown:
            raise ConfigError(f"unknown children in config: {sorted(unknown)}")
        self.children = tuple(c for c in CHILD_ORDER if c in children)
        self.n_components = int(file_cfg.get("n_components", 3))
        fractions = file_cfg.get("split_fractions", [0.5, 0.25, 0.25])
        if len(fractions) != 3:
            raise ConfigError("split_fractions must have three entries")
        self.split_fractions = tuple(float(f) for f in fractions)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    file_cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
    try:
        return RunConfig(file_cfg, args)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# Checkpoint I/O.
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path, model, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tool_version": __version__,
        "model": model.to_dict(),
    }
    if extra:
        payload["manifest"] = extra
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: Path):
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
        model_d = payload["model"]
        kind = model_d.get("kind")
        if kind == "variational":
            return VariationalModel.from_dict(model_d)
        if kind == "confidence":
            return ConfidenceModel.from_dict(model_d)
        raise DatasetParseError(f"unknown checkpoint kind {kind!r}")
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetParseError(f"invalid checkpoint {path}: {e}") from None


def predictor_ckpt(ckpt_dir: Path, ablate: str | None = None) -> Path:
    name = "predictor.json" if ablate is None else f"predictor_wo_{ablate}.json"
    return ckpt_dir / name


def _split_dataset(samples, cfg: RunConfig):
    return split(samples, cfg.split_fractions, derive_seed(cfg.seed, "split"))


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    scenario = ScenarioConfig(
        maneuver_mix=cfg.scenario.maneuver_mix,
        speed_range=cfg.scenario.speed_range,
        noise=cfg.scenario.noise,
        n_samples=cfg.scenario.n_samples,
        seed=derive_seed(cfg.seed, "gen-data"),
        noise_only_channels=cfg.scenario.noise_only_channels,
    )
    samples = generate(scenario)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, samples, scenario)
    histogram: dict[str, int] = {}
    for s in samples:
        histogram[s.maneuver] = histogram.get(s.maneuver, 0) + 1
    print(f"wrote {len(samples)} samples to {out}")
    for name in sorted(histogram):
        print(f"  {name}: {histogram[name]}")
    return 0


def _train_predictor(cfg: RunConfig, train_split, ablate: str | None):
    children = tuple(c for c in cfg.children if c != ablate)
    if ablate is not None and len(children) == len(cfg.children):
        raise ConfigError(f"cannot ablate unknown or inactive child {ablate!r}")
    stage = "train-predictor" if ablate is None else f"train-predictor-wo-{ablate}"
    train_cfg = TrainConfig(
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        learning_rate=cfg.train.learning_rate,
        adam_beta1=cfg.train.adam_beta1,
        adam_beta2=cfg.train.adam_beta2,
        adam_eps=cfg.train.adam_eps,
        seed=derive_seed(cfg.seed, stage),
    )
    return train_variational(
        train_split,
        train_cfg,
        cfg.regularizers,
        n_components=cfg.n_components,
        children=children,
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    samples, _ = load_dataset(args.dataset)
    train_pred, train_conf, _ = _split_dataset(samples, cfg)
    ckpt_dir = Path(args.checkpoint_dir)

    if args.target == "predictor":
        model, history = _train_predictor(cfg, train_pred, args.ablate)
        path = predictor_ckpt(ckpt_dir, args.ablate)
        save_checkpoint(
            path,
            model,
            extra={
                "children": list(model.net.child_names),
                "trained_on": len(train_pred),
                "epochs": cfg.train.epochs,
            },
        )
    else:
        if args.ablate is not None:
            raise ConfigError("--ablate applies only to --target predictor")
        predictor = load_checkpoint(predictor_ckpt(ckpt_dir))
        scored = build_confidence_dataset(train_conf, predictor, TRAIN_HORIZON_GRID)
        train_cfg = TrainConfig(
            batch_size=cfg.train.batch_size,
            epochs=cfg.train.epochs,
            learning_rate=cfg.train.learning_rate,
            adam_beta1=cfg.train.adam_beta1,
            adam_beta2=cfg.train.adam_beta2,
            adam_eps=cfg.train.adam_eps,
            seed=derive_seed(cfg.seed, "train-confidence"),
        )
        model, history = train_confidence(
            scored, train_cfg, children=cfg.children
        )
        path = ckpt_dir / "confidence.json"
        save_checkpoint(
            path,
            model,
            extra={
                "registry": [p.value for p in model.registry],
                "horizon_grid_s": list(TRAIN_HORIZON_GRID),
                "trained_on": len(train_conf),
            },
        )
    for epoch, loss in enumerate(history, start=1):
        print(f"epoch {epoch}/{len(history)} loss={loss!r}")
    print(f"saved checkpoint to {path}")
    return 0


def _report_dir(args: argparse.Namespace) -> Path:
    env = os.environ.get(REPORT_DIR_ENV)
    d = Path(args.report_dir if args.report_dir else (env or "reports"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    samples, _ = load_dataset(args.dataset)
    _, _, test = _split_dataset(samples, cfg)
    ckpt_dir = Path(args.checkpoint_dir)
    models = MixtureModels(
        variational=load_checkpoint(predictor_ckpt(ckpt_dir)),
        confidence=load_checkpoint(ckpt_dir / "confidence.json"),
    )
    run = run_evaluation(models, test, cfg.thresholds)
    report = build_report(run, bootstrap_seed=derive_seed(cfg.seed, "eval-bootstrap") % 2**32)
    out = _report_dir(args)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "curves.csv").write_text(report.curves_csv())
    (out / "decisions.jsonl").write_text("\n".join(decision_log_lines(run)) + "\n")
    print(f"evaluated {report.n_samples} test samples")
    print(
        "mixture L2@{:.1f}s mean = {:.4f} m (oracle {:.4f} m)".format(
            cfg.thresholds.decision_horizon,
            report.mixture["l2_at_decision_mean_m"],
            report.oracle["l2_at_decision_mean_m"],
        )
    )
    print(f"reports written to {out}")
    return 0


def cmd_ablate_all(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    samples, _ = load_dataset(args.dataset)
    train_pred, _, test = _split_dataset(samples, cfg)
    ckpt_dir = Path(args.checkpoint_dir)

    full, _ = _train_predictor(cfg, train_pred, None)
    save_checkpoint(predictor_ckpt(ckpt_dir), full,
                    extra={"children": list(full.net.child_names)})
    rows = []
    run_rows = _ablation_metrics(full, None, test, cfg)
    rows.append(run_rows)
    for child in cfg.children:
        model, _ = _train_predictor(cfg, train_pred, child)
        save_checkpoint(predictor_ckpt(ckpt_dir, child), model,
                        extra={"children": list(model.net.child_names)})
        rows.append(_ablation_metrics(model, full, test, cfg, ablated=child))
    out = _report_dir(args)
    (out / "ablation.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    for row in rows:
        gain = row["information_gain_nats"]
        gain_str = "n/a" if gain is None else f"{gain:.4f}"
        print(
            f"{row['model']}: I={gain_str} rmse={row['rmse_mean_m']:.4f} "
            f"l2@3s={row['l2_at_decision_mean_m']:.4f} hard%={100 * row['hard_fraction']:.2f}"
        )
    return 0


def _ablation_metrics(model, full_model, test, cfg: RunConfig, ablated: str | None = None):
    from .confidence import realized_scores
    from .predictors import feature_vector, variational_predict_batch
    import numpy as _np

    feats = _np.stack([feature_vector(s.features) for s in test])
    preds = variational_predict_batch(model, feats)
    horizons = _np.round(_np.arange(1, 31) * 0.1, 10)
    t_dec = cfg.thresholds.decision_horizon
    curves = _np.stack(
        [
            realized_scores(p, s.groundtruth_future, horizons, model.basis)
            for p, s in zip(preds, test)
        ]
    )
    j = int(_np.argmin(_np.abs(horizons - t_dec)))
    gain = None
    if full_model is not None:
        gain = float(_np.mean(information_gain_samples(test, full_model, model)))
    return {
        "model": "variational" if ablated is None else f"w/o {ablated}",
        "information_gain_nats": gain,
        "rmse_mean_m": float(_np.sqrt(_np.mean(curves**2, axis=1)).mean()),
        "l2_at_decision_mean_m": float(curves[:, j].mean()),
        "hard_fraction": float(_np.mean(curves.max(axis=1) > cfg.thresholds.hard_threshold)),
    }


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    path = Path(args.input)
    if not path.exists():
        raise DatasetError(f"input file not found: {path}")
    record = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetParseError(str(e), line=lineno) from None
        if d.get("kind") == "trajmix-dataset":
            continue  # allow pointing at a dataset file; first sample wins
        try:
            record = sample_from_dict(d)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetParseError(str(e), line=lineno) from None
        break
    if record is None:
        raise DatasetError(f"no sample record found in {path}")

    ckpt_dir = Path(args.checkpoint_dir)
    models = MixtureModels(
        variational=load_checkpoint(predictor_ckpt(ckpt_dir)),
        confidence=load_checkpoint(ckpt_dir / "confidence.json"),
    )
    prediction, decision = mixture_predict(models, record.features, cfg.thresholds)
    times = np.round(np.arange(1, 31) * 0.1, 10)
    draws = gmm_sample(
        prediction, args.n_samples, derive_seed(cfg.seed, "predict-sample")
    )
    spec = models.variational.basis
    ncoef = spec.n_coeffs
    sampled = []
    for flat in draws:
        from .basis import CoeffVector, reconstruct

        traj = reconstruct(CoeffVector(cx=flat[:ncoef], cy=flat[ncoef:], basis=spec), times)
        sampled.append({"xs": traj.xs.tolist(), "ys": traj.ys.tolist()})
    out = {
        "id": record.id,
        "chosen": decision.chosen.value,
        "warning": decision.warning,
        "estimated_scores_m": {p.value: s for p, s in decision.estimated_scores.items()},
        "gmm": {
            "weights": prediction.weights.tolist(),
            "means": prediction.means.tolist(),
            "stds": prediction.stds.tolist(),
        },
        "sampled_trajectories": {"times_s": times.tolist(), "trajectories": sampled},
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajmix",
        description="Uncertainty-aware mixture-of-experts trajectory prediction.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="root seed override")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--samples", type=int, default=None, help="sample count override")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the predictor or confidence network")
    common(p)
    p.add_argument("--target", choices=("predictor", "confidence"), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--ablate", default=None, help="drop this child (predictor only)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run all metrics on the test split")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-all", help="train the full ablation matrix")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.set_defaults(func=cmd_ablate_all)

    p = sub.add_parser("predict", help="arbitrated prediction for one sample")
    common(p)
    p.add_argument("--input", required=True, help="JSON sample record or dataset file")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--n-samples", type=int, default=5, help="trajectories to sample")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DatasetError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
