import hashlib
import json
import os

import numpy as np
import pytest

from eegnet3d import cli
from eegnet3d.checkpoint import read_manifest


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def shards(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("shards"))
    assert run_cli("synth", "--out", out, "--seed", "7", "--n-per-class", "24") == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, shards):
    out = str(tmp_path_factory.mktemp("run"))
    code = run_cli(
        "train", "--data", shards, "--out", out, "--arch", "v1",
        "--seed", "3", "--set", "train.epochs=2", "--set", "model.width_factor=0.2",
        "--set", "model.out_neurons=16",
    )
    assert code == 0
    return out


class TestSynth:
    def test_deterministic_artifacts(self, tmp_path, shards):
        other = str(tmp_path / "again")
        assert run_cli("synth", "--out", other, "--seed", "7", "--n-per-class", "24") == 0
        for name in sorted(os.listdir(shards)):
            assert sha(os.path.join(shards, name)) == sha(os.path.join(other, name)), name

    def test_manifest_embeds_config_and_version(self, shards):
        m = json.load(open(os.path.join(shards, "manifest.json")))
        assert m["provenance"]["command"] == "synth"
        assert m["provenance"]["version"].startswith("eegnet3d ")
        assert m["config"]["window"] == 128
        assert m["count"] == 48


class TestTrain:
    def test_artifacts_present(self, trained):
        assert os.path.exists(os.path.join(trained, "checkpoint.ckpt"))
        assert os.path.exists(os.path.join(trained, "epoch_log.jsonl"))
        report = json.load(open(os.path.join(trained, "report.json")))
        assert report["real_params"] > 0
        assert report["memory_mbits"] > 0
        assert report["effective_config"]["train"]["epochs"] == 2

    def test_epoch_log_has_metric_fields(self, trained):
        lines = open(os.path.join(trained, "epoch_log.jsonl")).read().splitlines()
        assert len(lines) == 2
        entry = json.loads(lines[-1])
        for field in ("epoch", "lr", "train_loss", "val_loss", "val_accuracy",
                      "val_precision", "val_recall", "val_f1", "val_confusion"):
            assert field in entry, field

    def test_binary_train_smoke(self, tmp_path, shards):
        out = str(tmp_path / "bi")
        code = run_cli(
            "train", "--data", shards, "--out", out, "--arch", "v1", "--binary",
            "--label", "arousal", "--seed", "1", "--set", "train.epochs=1",
        )
        assert code == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["binary_params"] > 0
        assert report["effective_config"]["train"]["label_smoothing"] == 0.1
        m = read_manifest(os.path.join(out, "checkpoint.ckpt"))
        assert m["model_config"]["binary"] is True


class TestEvalInspectExport:
    def test_eval_writes_metrics(self, tmp_path, shards, trained):
        out = str(tmp_path / "metrics.json")
        ckpt = os.path.join(trained, "checkpoint.ckpt")
        assert run_cli("eval", "--ckpt", ckpt, "--data", shards, "--out", out) == 0
        payload = json.load(open(out))
        assert set(payload) >= {"accuracy", "precision", "recall", "f1", "confusion", "loss"}
        assert payload["count"] == 48

    def test_inspect_reports_counts(self, capsys, trained):
        ckpt = os.path.join(trained, "checkpoint.ckpt")
        assert run_cli("inspect", "--ckpt", ckpt) == 0
        out = capsys.readouterr().out
        assert "Mbits" in out and "stem.conv" in out

    def test_export_then_eval(self, tmp_path, shards, trained):
        ckpt = os.path.join(trained, "checkpoint.ckpt")
        deploy = str(tmp_path / "deploy.ckpt")
        assert run_cli("export", "--ckpt", ckpt, "--out", deploy) == 0
        assert read_manifest(deploy)["deploy"] is True
        assert run_cli("eval", "--ckpt", deploy, "--data", shards) == 0


class TestBenchCommand:
    def test_bench_writes_schema_valid_reports(self, tmp_path):
        import jsonschema

        from eegnet3d.bench import load_schema

        out = str(tmp_path / "bench")
        assert run_cli("bench", "--out", out, "--iterations", "10") == 0
        payload = json.load(open(os.path.join(out, "bench.json")))
        schema = load_schema()
        for row in payload["kernel_suite"]:
            jsonschema.validate(row["reference"], schema)
            jsonschema.validate(row["candidate"], schema)
            assert row["speedup"] > 0


class TestAblate:
    def test_ablation_table_structure(self, tmp_path, shards):
        out = str(tmp_path / "abl")
        code = run_cli(
            "ablate", "--data", shards, "--out", out, "--arch", "v1", "--binary",
            "--seed", "2", "--set", "train.epochs=1",
            "--set", "model.width_factor=0.15", "--set", "model.out_neurons=8",
        )
        assert code == 0
        payload = json.load(open(os.path.join(out, "ablation.json")))
        rows = payload["rows"]
        assert [r["variant"] for r in rows] == [
            "plain", "1", "2", "3", "1&2", "1&3", "2&3", "1&2&3", "full-precision",
        ]
        assert rows[0]["delta_vs_plain"] == 0.0
        assert rows[-1]["binary_params"] == 0 and rows[-1]["delta_vs_plain"] is None
        for r in rows[:-1]:
            assert r["binary_params"] > 0
            assert r["memory_mbits"] > 0


class TestErrors:
    def test_unknown_override_key(self, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path / "x"), "--set", "train.bogus=1") == 1

    def test_unknown_section(self, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path / "x"), "--set", "nope.epochs=1") == 1

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("{not json")
        assert run_cli("synth", "--out", str(tmp_path / "x"), "--config", str(bad)) == 1

    def test_missing_data_dir(self, tmp_path):
        assert run_cli("train", "--data", str(tmp_path / "nope"), "--out",
                       str(tmp_path / "o"), "--arch", "v1") == 2

    def test_bad_subcommand_flag(self):
        assert run_cli("train") == 1  # missing required flags -> config error

    def test_error_line_is_machine_parsable(self, tmp_path, capsys):
        run_cli("synth", "--out", str(tmp_path / "x"), "--set", "train.bogus=1")
        err = capsys.readouterr().err
        assert err.startswith("error kind=config reason=")


class TestConfigFile:
    def test_file_plus_override_precedence(self, tmp_path, shards):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochs": 3, "batch_size": 16}}))
        out = str(tmp_path / "run")
        code = run_cli("train", "--data", shards, "--out", out, "--arch", "v1",
                       "--config", str(cfg), "--set", "train.epochs=1",
                       "--set", "model.width_factor=0.15")
        assert code == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["effective_config"]["train"]["epochs"] == 1  # flag beats file
        assert report["effective_config"]["train"]["batch_size"] == 16
