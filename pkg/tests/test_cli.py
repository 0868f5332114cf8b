import hashlib
import json

import numpy as np
import pytest

from trajmix.cli import derive_seed, load_checkpoint, main, predictor_ckpt
from trajmix.predictors import feature_vector, variational_predict_batch


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny but complete pipeline run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    config = {
        "seed": 11,
        "scenario": {"n_samples": 400},
        "train": {"epochs": 4, "batch_size": 64, "learning_rate": 1e-3},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    dataset = root / "data.jsonl"
    ckpts = root / "ckpts"
    reports = root / "reports"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(dataset)]) == 0
    for target in ("predictor", "confidence"):
        code = main([
            "train", "--target", target, "--config", str(cfg_path),
            "--dataset", str(dataset), "--checkpoint-dir", str(ckpts),
        ])
        assert code == 0
    code = main([
        "evaluate", "--config", str(cfg_path), "--dataset", str(dataset),
        "--checkpoint-dir", str(ckpts), "--report-dir", str(reports),
    ])
    assert code == 0
    return {"root": root, "config": cfg_path, "dataset": dataset,
            "ckpts": ckpts, "reports": reports}


class TestSeedDerivation:
    def test_deterministic_and_stage_dependent(self):
        assert derive_seed(0, "gen-data") == derive_seed(0, "gen-data")
        assert derive_seed(0, "gen-data") != derive_seed(0, "split")
        assert derive_seed(0, "gen-data") != derive_seed(1, "gen-data")


class TestGenData:
    def test_line_count_is_samples_plus_header(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 0, "scenario": {"n_samples": 100}}))
        out = tmp_path / "d.jsonl"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 101

    def test_rerun_identical_hash(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 5, "scenario": {"n_samples": 50}}))
        hashes = []
        for name in ("a.jsonl", "b.jsonl"):
            out = tmp_path / name
            assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
            hashes.append(hashlib.sha256(out.read_bytes()).hexdigest())
        assert hashes[0] == hashes[1]

    def test_invalid_maneuver_mix_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(
            {"scenario": {"maneuver_mix": {"straight": 0.4, "stop": 0.4}}}
        ))
        out = tmp_path / "d.jsonl"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 2
        assert "sum to 1" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path):
        out = tmp_path / "d.jsonl"
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"),
                     "--out", str(out)]) == 2


class TestTrain:
    def test_checkpoint_reload_identical_outputs(self, workdir):
        from trajmix.simgen import load_dataset

        model = load_checkpoint(predictor_ckpt(workdir["ckpts"]))
        reloaded = load_checkpoint(predictor_ckpt(workdir["ckpts"]))
        samples, _ = load_dataset(workdir["dataset"])
        feats = np.stack([feature_vector(s.features) for s in samples[:10]])
        a = variational_predict_batch(model, feats)
        b = variational_predict_batch(reloaded, feats)
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.weights, q.weights)
            np.testing.assert_array_equal(p.means, q.means)
            np.testing.assert_array_equal(p.stds, q.stds)

    def test_ablate_writes_reduced_child_manifest(self, workdir):
        code = main([
            "train", "--target", "predictor", "--config", str(workdir["config"]),
            "--dataset", str(workdir["dataset"]),
            "--checkpoint-dir", str(workdir["ckpts"]),
            "--ablate", "scene", "--epochs", "2",
        ])
        assert code == 0
        path = predictor_ckpt(workdir["ckpts"], "scene")
        payload = json.loads(path.read_text())
        assert payload["manifest"]["children"] == ["dynamics", "canbus", "imu"]
        model = load_checkpoint(path)
        assert "scene" not in model.net.child_names

    def test_confidence_requires_predictor_checkpoint(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 0, "scenario": {"n_samples": 60},
                                   "train": {"epochs": 1}}))
        data = tmp_path / "d.jsonl"
        assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
        code = main([
            "train", "--target", "confidence", "--config", str(cfg),
            "--dataset", str(data), "--checkpoint-dir", str(tmp_path / "empty"),
        ])
        assert code == 3

    def test_divergent_learning_rate_exits_4(self, workdir, tmp_path, capsys):
        code = main([
            "train", "--target", "predictor", "--config", str(workdir["config"]),
            "--dataset", str(workdir["dataset"]),
            "--checkpoint-dir", str(tmp_path / "ck"),
            "--learning-rate", "1e6", "--epochs", "3",
        ])
        assert code == 4
        assert "loss" in capsys.readouterr().err


class TestEvaluate:
    def test_report_fractions_in_unit_interval(self, workdir):
        report = json.loads((workdir["reports"] / "report.json").read_text())
        m = report["mixture"]
        for key in ("arbitration_accuracy", "underestimated_uncertain_fraction",
                    "certain_overshoot_fraction", "uncertain_fraction",
                    "warning_fraction"):
            assert 0.0 <= m[key] <= 1.0
        for pred in report["per_predictor"].values():
            assert 0.0 <= pred["hard_fraction"] <= 1.0

    def test_oracle_never_beaten_by_mixture(self, workdir):
        report = json.loads((workdir["reports"] / "report.json").read_text())
        assert report["oracle"]["l2_at_decision_mean_m"] <= (
            report["mixture"]["l2_at_decision_mean_m"] + 1e-12
        )
        assert report["mixture"]["regret_m"] >= 0.0

    def test_rerun_byte_identical(self, workdir, tmp_path):
        other = tmp_path / "reports2"
        code = main([
            "evaluate", "--config", str(workdir["config"]),
            "--dataset", str(workdir["dataset"]),
            "--checkpoint-dir", str(workdir["ckpts"]),
            "--report-dir", str(other),
        ])
        assert code == 0
        for name in ("report.json", "curves.csv", "decisions.jsonl"):
            assert (other / name).read_bytes() == (workdir["reports"] / name).read_bytes()

    def test_missing_checkpoint_exits_3(self, workdir, tmp_path):
        code = main([
            "evaluate", "--config", str(workdir["config"]),
            "--dataset", str(workdir["dataset"]),
            "--checkpoint-dir", str(tmp_path / "none"),
            "--report-dir", str(tmp_path / "r"),
        ])
        assert code == 3

    def test_decision_log_one_line_per_test_sample(self, workdir):
        report = json.loads((workdir["reports"] / "report.json").read_text())
        lines = (workdir["reports"] / "decisions.jsonl").read_text().splitlines()
        assert len(lines) == report["n_samples"]
        rec = json.loads(lines[0])
        assert rec["chosen"] in ("variational", "odometry")
        assert rec["oracle"] in ("variational", "odometry")


class TestPredict:
    def test_prediction_record_structure(self, workdir, capsys):
        code = main([
            "predict", "--config", str(workdir["config"]),
            "--input", str(workdir["dataset"]),
            "--checkpoint-dir", str(workdir["ckpts"]),
            "--n-samples", "4",
        ])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert set(out["gmm"]) == {"weights", "means", "stds"}
        assert len(out["sampled_trajectories"]["trajectories"]) == 4
        assert abs(sum(out["gmm"]["weights"]) - 1.0) < 1e-9
        assert out["chosen"] in ("variational", "odometry")
        assert isinstance(out["warning"], bool)

    def test_warning_iff_all_estimates_exceed_threshold(self, workdir, capsys):
        code = main([
            "predict", "--config", str(workdir["config"]),
            "--input", str(workdir["dataset"]),
            "--checkpoint-dir", str(workdir["ckpts"]),
        ])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        expected = all(v > 2.54 for v in out["estimated_scores_m"].values())
        assert out["warning"] == expected

    def test_malformed_input_reports_line_number(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"id": 1, "maneuver": "straight"\n')
        code = main([
            "predict", "--config", str(workdir["config"]),
            "--input", str(bad),
            "--checkpoint-dir", str(workdir["ckpts"]),
        ])
        assert code == 3
        assert "line 1" in capsys.readouterr().err


class TestAblateAll:
    def test_matrix_written(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "seed": 1,
            "scenario": {"n_samples": 200},
            "train": {"epochs": 2, "batch_size": 64, "learning_rate": 1e-3},
        }))
        data = tmp_path / "d.jsonl"
        assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
        code = main([
            "ablate-all", "--config", str(cfg), "--dataset", str(data),
            "--checkpoint-dir", str(tmp_path / "ck"),
            "--report-dir", str(tmp_path / "rep"),
        ])
        assert code == 0
        rows = json.loads((tmp_path / "rep" / "ablation.json").read_text())
        assert len(rows) == 5  # full + one per child
        assert rows[0]["information_gain_nats"] is None
        for row in rows[1:]:
            assert row["information_gain_nats"] is not None
            assert row["model"].startswith("w/o ")
