"""Experiment configs, manifests, locks, reports, and the CLI surface."""

import json
import subprocess
import sys

import numpy as np
import pytest

from lorot.cli import main
from lorot.config import ExperimentConfig, output_lock
from lorot.datasets import load_packed, make_blobs, make_stripes, save_packed
from lorot.reports import load_scores, read_json_report, report_checksum, save_scores
from lorot.training import TrainingHistory


def minimal_config(tmp_path, **overrides):
    data = {
        "kind": "classify",
        "dataset": {"synthetic": "stripes", "n": 320, "num_classes": 10, "seed": 0},
        "eval_dataset": {"synthetic": "stripes", "n": 100, "num_classes": 10, "seed": 1, "split": "val"},
        "output_dir": str(tmp_path / "out"),
        "seeds": [0],
        "training": {"strategy": "mt", "variant": "lorot-i", "epochs": 2,
                     "batch_size": 64, "lr": 0.05, "model_widths": [4, 8]},
    }
    data.update(overrides)
    return data


class TestExperimentConfig:
    def test_roundtrip_and_hash_stability(self, tmp_path):
        data = minimal_config(tmp_path)
        a = ExperimentConfig.from_dict(data)
        b = ExperimentConfig.from_dict(json.loads(json.dumps(data)))
        assert a.config_hash() == b.config_hash()

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ValueError, match="unknown config key 'lamda'"):
            ExperimentConfig.from_dict(minimal_config(tmp_path, lamda=0.2))

    def test_unknown_training_key(self, tmp_path):
        data = minimal_config(tmp_path)
        data["training"]["learning_rate"] = 0.1
        with pytest.raises(ValueError, match="training.'learning_rate'"):
            ExperimentConfig.from_dict(data)

    def test_invalid_lam_names_field(self, tmp_path):
        data = minimal_config(tmp_path)
        data["training"]["lam"] = -1.0
        with pytest.raises(ValueError, match="training: lam"):
            ExperimentConfig.from_dict(data)

    def test_missing_required_key(self, tmp_path):
        data = minimal_config(tmp_path)
        del data["dataset"]
        with pytest.raises(ValueError, match="missing required config key 'dataset'"):
            ExperimentConfig.from_dict(data)

    def test_env_output_override(self, tmp_path, monkeypatch):
        config = ExperimentConfig.from_dict(minimal_config(tmp_path))
        monkeypatch.setenv("LOROT_OUTPUT_DIR", str(tmp_path / "elsewhere"))
        assert config.resolved_output_dir() == tmp_path / "elsewhere"

    def test_bad_json_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="not valid JSON"):
            ExperimentConfig.from_file(path)


class TestLockAndReports:
    def test_output_lock_exclusive(self, tmp_path):
        with output_lock(tmp_path / "run"):
            with pytest.raises(RuntimeError, match="locked"):
                with output_lock(tmp_path / "run"):
                    pass
        # released afterwards
        with output_lock(tmp_path / "run"):
            pass

    def test_report_checksum_ignores_timing(self):
        a = {"metrics": {"x": 1.0}, "created_at": "now", "nested": {"wall_time_s": 3.2, "y": 2}}
        b = {"metrics": {"x": 1.0}, "created_at": "later", "nested": {"wall_time_s": 9.9, "y": 2}}
        c = {"metrics": {"x": 1.5}, "created_at": "now", "nested": {"wall_time_s": 3.2, "y": 2}}
        assert report_checksum(a) == report_checksum(b)
        assert report_checksum(a) != report_checksum(c)

    def test_scores_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=37)
        save_scores(tmp_path / "s.csv", scores)
        assert np.array_equal(load_scores(tmp_path / "s.csv"), scores)


class TestCLI:
    def _write_config(self, tmp_path, **overrides):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(minimal_config(tmp_path, **overrides)))
        return path

    def test_train_writes_artifacts(self, tmp_path):
        config = self._write_config(tmp_path)
        assert main(["train", "--config", str(config)]) == 0
        out = tmp_path / "out"
        assert (out / "checkpoint_seed0.pt").exists()
        assert (out / "history_seed0.jsonl").exists()
        assert (out / "manifest.json").exists()
        report = read_json_report(out / "train_report.json")
        assert report["config_hash"]
        assert not (out / ".lorot-lock").exists()

    def test_train_rerun_reproduces_history_checksum(self, tmp_path):
        config = self._write_config(tmp_path)
        assert main(["train", "--config", str(config), "--output-dir", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", str(config), "--output-dir", str(tmp_path / "b")]) == 0
        ha = TrainingHistory.load(tmp_path / "a" / "history_seed0.jsonl").checksum()
        hb = TrainingHistory.load(tmp_path / "b" / "history_seed0.jsonl").checksum()
        assert ha == hb
        ra = read_json_report(tmp_path / "a" / "train_report.json")
        rb = read_json_report(tmp_path / "b" / "train_report.json")
        assert ra["report_checksum"] == rb["report_checksum"]

    def test_train_invalid_config_exit_code(self, tmp_path, capsys):
        data = minimal_config(tmp_path)
        data["training"]["lam"] = -1
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data))
        assert main(["train", "--config", str(path)]) == 2
        assert "lam" in capsys.readouterr().err

    def test_eval_affinity_identity_is_100(self, tmp_path):
        config = self._write_config(tmp_path)
        assert main(["train", "--config", str(config)]) == 0
        ckpt = tmp_path / "out" / "checkpoint_seed0.pt"
        out = tmp_path / "affinity-eval"
        code = main([
            "eval", "affinity", "--checkpoint", str(ckpt),
            "--data", json.dumps({"synthetic": "stripes", "n": 80, "seed": 5, "split": "val"}),
            "--transform", "identity", "--output", str(out),
        ])
        assert code == 0
        report = read_json_report(out / "report.json")
        assert report["metrics"]["affinity"] == 100.0

    def test_eval_ood_writes_scores_and_auroc(self, tmp_path):
        # a model trained on stripes separates blob images essentially
        # perfectly, so this doubles as the oracle-style AUROC check
        config = self._write_config(
            tmp_path,
            dataset={"synthetic": "stripes", "n": 2400, "num_classes": 10, "seed": 0},
            training={"strategy": "mt", "variant": "lorot-i", "epochs": 8,
                      "batch_size": 128, "lr": 0.05, "model_widths": [8, 16, 32]},
        )
        assert main(["train", "--config", str(config)]) == 0
        ckpt = tmp_path / "out" / "checkpoint_seed0.pt"
        out = tmp_path / "ood-eval"
        code = main([
            "eval", "ood", "--checkpoint", str(ckpt),
            "--data", json.dumps({"synthetic": "stripes", "n": 150, "seed": 7, "split": "test"}),
            "--ood-data", json.dumps({"synthetic": "blobs", "n": 150, "seed": 8, "split": "test"}),
            "--score", "kl", "--output", str(out),
        ])
        assert code == 0
        report = read_json_report(out / "report.json")
        assert report["metrics"]["auroc"] == 1.0
        assert len(load_scores(out / "scores_in.csv")) == 150
        assert len(load_scores(out / "scores_out.csv")) == 150

    def test_eval_adversarial_reports_both_accuracies(self, tmp_path):
        config = self._write_config(tmp_path)
        assert main(["train", "--config", str(config)]) == 0
        ckpt = tmp_path / "out" / "checkpoint_seed0.pt"
        out = tmp_path / "adv-eval"
        code = main([
            "eval", "adversarial", "--checkpoint", str(ckpt),
            "--data", json.dumps({"synthetic": "stripes", "n": 60, "seed": 9, "split": "test"}),
            "--steps", "20", "--output", str(out),
        ])
        assert code == 0
        metrics = read_json_report(out / "report.json")["metrics"]
        assert "clean_accuracy" in metrics and "robust_accuracy" in metrics
        assert metrics["robust_accuracy"] <= metrics["clean_accuracy"]

    def test_preview_writes_pairs(self, tmp_path):
        out = tmp_path / "preview"
        assert main(["preview", "--variant", "lorot-e", "--count", "3",
                     "--output", str(out)]) == 0
        files = sorted(p.name for p in out.iterdir())
        assert files == ["000_after.png", "000_before.png", "001_after.png",
                         "001_before.png", "002_after.png", "002_before.png"]

    def test_unknown_recipe_lists_available(self, tmp_path, capsys):
        assert main(["repro", "nope", "--output", str(tmp_path / "r")]) == 2
        err = capsys.readouterr().err
        assert "affinity-table2-desk" in err

    def test_repro_affinity_prints_references(self, tmp_path, capsys):
        out = tmp_path / "repro"
        assert main(["repro", "affinity-table2-desk", "--output", str(out), "--fast"]) == 0
        stdout = capsys.readouterr().out
        for token in ("identity", "rotation", "lorot-i", "lorot-e", "58.06", "93.78",
                      "90.15", "reference only, not a target"):
            assert token in stdout
        report = read_json_report(out / "report.json")
        assert report["affinity"]["identity"] == 100.0
        assert (out / "affinity.csv").exists()
        assert (out / "manifest.json").exists()

    def test_build_imbalanced_roundtrip(self, tmp_path):
        src = tmp_path / "src.lrpk"
        save_packed(make_stripes(100, num_classes=10, image_size=8, seed=3), src)
        src_bytes = src.read_bytes()
        out = tmp_path / "imb.lrpk"
        assert main(["build-imbalanced", "--data", str(src), "--mu", "0.1",
                     "--output", str(out)]) == 0
        built = load_packed(out)
        counts = built.class_counts()
        assert counts[0] == 10 and counts[-1] == 1
        assert src.read_bytes() == src_bytes  # input dataset never mutated

    def test_eval_confidence_writes_plot(self, tmp_path):
        config = self._write_config(tmp_path)
        assert main(["train", "--config", str(config)]) == 0
        ckpt = tmp_path / "out" / "checkpoint_seed0.pt"
        out = tmp_path / "conf-eval"
        code = main([
            "eval", "confidence", "--checkpoint", str(ckpt),
            "--data", json.dumps({"synthetic": "stripes", "n": 60, "seed": 11, "split": "test"}),
            "--ood-data", json.dumps({"synthetic": "blobs", "n": 40, "num_classes": 2,
                                      "seed": 12, "split": "test"}),
            "--output", str(out),
        ])
        assert code == 0
        assert (out / "confidence.png").exists()
        report = read_json_report(out / "report.json")
        assert len(report["metrics"]["in_class_means"]) == 10
        assert len(report["metrics"]["out_class_means"]) == 2

    def test_sweep_runs(self, tmp_path):
        config = self._write_config(tmp_path, lambdas=[0.1, 0.3])
        out = tmp_path / "sweep-out"
        assert main(["sweep", "--config", str(config), "--output-dir", str(out)]) == 0
        report = read_json_report(out / "report.json")
        assert set(report["per_lambda_accuracy"]) == {"0.1", "0.3"}
        assert (out / "lambda_sweep.csv").exists()

    def test_console_entry_point(self):
        result = subprocess.run(
            [sys.executable, "-m", "lorot.cli", "--help"], capture_output=True, text=True
        )
        assert result.returncode == 0
        assert "repro" in result.stdout
