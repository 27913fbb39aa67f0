import json

import pytest

from config.settings import create_run_config
from errors import CorpusError
from persistence import LossLog, RunDirectory, package_versions


def test_manifest_and_backups(tmp_path):
    run = RunDirectory(tmp_path / "run")
    config = create_run_config(seed=4)
    run.write_manifest("train", config, {"checkpoint": "model.pt"})
    manifest = run.load_manifest()
    assert manifest["command"] == "train"
    assert manifest["seed"] == 4
    assert manifest["checkpoint"] == "model.pt"
    assert len(manifest["config_sha256"]) == 64
    assert "numpy" in manifest["versions"]
    assert not list(run.backup_dir.iterdir())

    run.write_manifest("evaluate", config)
    backups = list(run.backup_dir.iterdir())
    assert len(backups) == 1
    assert json.loads(backups[0].read_text())["command"] == "train"
    assert run.load_manifest()["command"] == "evaluate"


def test_missing_manifest(tmp_path):
    with pytest.raises(CorpusError):
        RunDirectory(tmp_path).load_manifest()


def test_csv_keeps_float_precision(tmp_path):
    run = RunDirectory(tmp_path)
    run.write_csv("metrics.csv", [{"h": 6.0, "v2v": 0.1 + 0.2}, {"h": 4.0, "v2v": None, "extra": 1}])
    rows = run.read_csv("metrics.csv")
    assert list(rows[0]) == ["h", "v2v", "extra"]
    assert float(rows[0]["v2v"]) == 0.1 + 0.2
    assert rows[1]["v2v"] == "" and rows[1]["extra"] == "1"
    assert rows[0]["extra"] == ""


def test_empty_csv(tmp_path):
    run = RunDirectory(tmp_path)
    run.write_csv("none.csv", [])
    assert run.read_csv("none.csv") == []


def test_loss_log_appends(tmp_path):
    log = RunDirectory(tmp_path).loss_log()
    log(0, {"step": 0, "total": 1.5, "skin": 1.0})
    log(1, {"step": 1, "total": 1.25, "skin": 0.75, "late": 3})
    assert log.rows == 2
    lines = log.path.read_text().splitlines()
    assert lines[0] == "step,total,skin"
    assert lines[2] == "1,1.25,0.75"


def test_loss_log_standalone(tmp_path):
    log = LossLog(tmp_path / "fit.csv")
    log.append({"step": 0})
    assert log.path.read_text().splitlines() == ["step", "0"]


def test_package_versions_mark_missing():
    versions = package_versions(("numpy", "not-a-real-package-name"))
    assert versions["not-a-real-package-name"] == "missing"
    assert "python" in versions


def test_custom_manifest_name(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    run = RunDirectory(tmp_path, manifest_name="run.json")
    run.write_manifest("gen-corpus", create_run_config())
    assert (tmp_path / "manifest.json").read_text() == "{}"
    assert run.load_manifest()["command"] == "gen-corpus"
