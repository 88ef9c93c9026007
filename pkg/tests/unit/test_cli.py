"""
命令行接口测试
"""

import json
import sys

import pytest
from click.testing import CliRunner
from loguru import logger

from cli.main import cli


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    logger.remove()
    logger.add(sys.stderr, level="WARNING")


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def config_file(tmp_path, small_spec_data):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(small_spec_data), encoding="utf-8")
    return path


def _invoke(runner, *args):
    return runner.invoke(cli, ["--log-level", "ERROR", *[str(a) for a in args]])


def _error(result):
    return json.loads(result.stderr.strip().splitlines()[-1])


def test_config_template(runner):
    result = runner.invoke(cli, ["config-template"])
    assert result.exit_code == 0
    data = json.loads(result.output)
    assert data["prune"]["strategy"] == "low_informative"
    assert data["model"]["layers"] == 28


def test_run(runner, config_file, tmp_path):
    out = tmp_path / "cli-out"
    result = _invoke(runner, "run", "--config", config_file, "--cutoff", "10", "--out", out)
    assert result.exit_code == 0, result.stderr
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["cutoff"] == 10
    assert (out / "summary.csv").exists()


def test_run_invalid_config(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"prune": {"fine_ratio": 2}}), encoding="utf-8")
    result = _invoke(runner, "run", "--config", path)
    assert result.exit_code == 1
    error = _error(result)
    assert error["error"] == "ConfigurationError"
    assert "prune.fine_ratio" in error["message"]


def test_calibrate(runner, config_file, tmp_path):
    out = tmp_path / "cal"
    result = _invoke(runner, "calibrate", "--config", config_file, "--samples", "2", "--out", out)
    assert result.exit_code == 0, result.stderr
    report = json.loads((out / "calibration.json").read_text(encoding="utf-8"))
    assert len(report["calibration"]["per_sample"]) == 2


def test_trace_dump_and_heatmap(runner, config_file, tmp_path):
    trace = tmp_path / "trace.avt"
    result = _invoke(runner, "trace-dump", "--config", config_file, "--trace", trace)
    assert result.exit_code == 0, result.stderr
    assert trace.exists()

    out = tmp_path / "maps"
    result = _invoke(runner, "heatmap", "--config", config_file, "--trace", trace,
                     "--layers", "1,2", "--out", out)
    assert result.exit_code == 0, result.stderr
    assert sorted(p.name for p in out.iterdir()) == [
        "attention_layer01.csv", "attention_layer02.csv",
        "rollout_layer01.csv", "rollout_layer02.csv",
    ]

    result = _invoke(runner, "heatmap", "--config", config_file, "--trace", trace, "--layers", "1,x")
    assert result.exit_code == 1
    assert _error(result)["error"] == "ConfigurationError"


def test_calibrate_from_traces(runner, config_file, tmp_path):
    trace = tmp_path / "trace.avt"
    _invoke(runner, "trace-dump", "--config", config_file, "--trace", trace)
    out = tmp_path / "cal"
    result = _invoke(runner, "calibrate", "--config", config_file, "--trace", trace, "--out", out)
    assert result.exit_code == 0, result.stderr
    assert (out / "calibration.json").exists()


def test_bad_trace(runner, config_file, tmp_path):
    trace = tmp_path / "broken.avt"
    trace.write_bytes(b"XXTRACE1" + bytes(12))
    result = _invoke(runner, "calibrate", "--config", config_file, "--trace", trace)
    assert result.exit_code == 1
    assert _error(result)["error"] == "TraceFormatError"


def test_sweep(runner, config_file, tmp_path):
    out = tmp_path / "sweep"
    result = _invoke(runner, "sweep", "--config", config_file, "--cutoff", "12",
                     "--axis", "fine_ratio", "--values", "0,0.2", "--out", out)
    assert result.exit_code == 0, result.stderr
    sweep = json.loads((out / "sweep.json").read_text(encoding="utf-8"))
    assert sweep["values"] == ["0", "0.2"]
    assert len(sweep["reports"]) == 2


def test_env_seed(runner, config_file, tmp_path, monkeypatch):
    data = json.loads(config_file.read_text(encoding="utf-8"))
    data.pop("seed")
    config_file.write_text(json.dumps(data), encoding="utf-8")
    monkeypatch.setenv("AVPRUNE_SEED", "8")
    out = tmp_path / "env"
    result = _invoke(runner, "run", "--config", config_file, "--cutoff", "10", "--out", out)
    assert result.exit_code == 0, result.stderr
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["spec"]["seed"] == 8
