"""
Unit tests for CLI
"""

import json

import polars as pl
import pytest
from typer.testing import CliRunner

from deferloop.cli import EXIT_BOUND, EXIT_CONFIG, EXIT_IO, app

runner = CliRunner()


def _payload(output):
    return json.loads(output[output.index("{"): output.rindex("}") + 1])


def test_gen_data_is_deterministic(cluster_toml, write_config, tmp_path):
    """Test gen-data writes identical files for the same seed"""
    config = write_config(cluster_toml)
    for name in ("a", "b"):
        result = runner.invoke(app, ["gen-data", "-c", str(config), "--out", str(tmp_path / name), "-q"])
        assert result.exit_code == 0
    first = (tmp_path / "a" / "dataset.csv").read_bytes()
    assert first == (tmp_path / "b" / "dataset.csv").read_bytes()
    assert (tmp_path / "a" / "manifest.json").exists()
    frame = pl.read_csv(tmp_path / "a" / "dataset.csv")
    assert frame.columns[:3] == ["id", "group", "label"]
    assert frame.height == 240


def test_gen_data_seed_option_changes_data(cluster_toml, write_config, tmp_path):
    """Test --seed overrides the config seed"""
    config = write_config(cluster_toml)
    runner.invoke(app, ["gen-data", "-c", str(config), "--out", str(tmp_path / "a"), "-q"])
    runner.invoke(app, ["gen-data", "-c", str(config), "--out", str(tmp_path / "b"), "--seed", "8", "-q"])
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "b" / "dataset.csv").read_bytes()
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["seed"] == 8
    assert manifest["finished_at"]


def test_missing_task_exits_with_config_error(write_config, tmp_path):
    """Test a config without task exits 2"""
    config = write_config('algorithm = "strict"\n')
    result = runner.invoke(app, ["run", "-c", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG


def test_unknown_algorithm_exits_with_config_error(write_config, tmp_path):
    """Test an unknown algorithm exits 2"""
    config = write_config('task = "cluster"\nalgorithm = "greedy"\n')
    result = runner.invoke(app, ["run", "-c", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_CONFIG


def test_run_writes_outputs(cluster_toml, write_config, tmp_path):
    """Test run writes summary, trace, map and checkpoints"""
    out = tmp_path / "run"
    result = runner.invoke(app, ["run", "-c", str(write_config(cluster_toml)), "--out", str(out), "-q"])
    assert result.exit_code == 0
    for name in ("manifest.json", "summary.json", "trace.csv", "deferral_map.csv", "deferrer.txt"):
        assert (out / name).exists()
    assert not (out / "classifier.txt").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["task"] == "cluster" and summary["seed"] == 3
    assert set(summary["metrics"]["group_accuracy"]) == {"orange", "blue"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) >= {"summary", "trace", "deferrer"}


def test_probe_theorem2(tmp_path):
    """Test the committee probe passes above the threshold"""
    result = runner.invoke(
        app, ["probe", "theorem2", "-p", "k=5", "-p", "m=41", "--seed", "0", "-q", "--out", str(tmp_path)]
    )
    assert result.exit_code == 0
    payload = _payload(result.output)
    assert payload["probe"] == "theorem2"
    assert payload["pass"] is True
    assert abs(payload["bound"] - 0.0125) < 1e-4
    assert (tmp_path / "probe_theorem2.json").exists()


def test_probe_remark2():
    """Test the start-disparity probe payload"""
    result = runner.invoke(app, ["probe", "remark2", "-p", "gamma=0.4", "-p", "trials=20000", "--seed", "1", "-q"])
    payload = _payload(result.output)
    assert payload["bound"] == pytest.approx([0.2, 0.6])
    assert "exact" in payload and "lower_ok" in payload


def test_probe_violation_exits_5():
    """Test a violated bound exits 5"""
    result = runner.invoke(app, ["probe", "theorem1", "-p", "beta=0.9", "-p", "trials=5000", "--seed", "0", "-q"])
    assert result.exit_code == EXIT_BOUND
    assert _payload(result.output)["pass"] is False


def test_probe_bad_params_exit_2():
    """Test unknown probes and malformed parameters"""
    assert runner.invoke(app, ["probe", "theorem9", "-q"]).exit_code == EXIT_CONFIG
    assert runner.invoke(app, ["probe", "theorem2", "-p", "k", "-q"]).exit_code == EXIT_CONFIG
    assert runner.invoke(app, ["probe", "theorem2", "-p", "k=x", "-q"]).exit_code == EXIT_CONFIG


def test_report_merges_runs(cluster_toml, write_config, tmp_path):
    """Test report builds one row per summary"""
    config = str(write_config(cluster_toml))
    for seed in ("1", "2"):
        result = runner.invoke(app, ["run", "-c", config, "--out", str(tmp_path / "runs" / seed), "--seed", seed, "-q"])
        assert result.exit_code == 0
    table_path = tmp_path / "report.csv"
    result = runner.invoke(app, ["report", str(tmp_path / "runs"), "--out", str(table_path), "-q"])
    assert result.exit_code == 0
    table = pl.read_csv(table_path)
    assert table.height == 2
    assert sorted(table["seed"].to_list()) == [1, 2]
    assert "overall_acc" in table.columns


def test_report_without_summaries_exits_2(tmp_path):
    """Test report fails when nothing is found"""
    result = runner.invoke(app, ["report", str(tmp_path)])
    assert result.exit_code == EXIT_CONFIG


def test_report_malformed_summary_exits_3(tmp_path):
    """Test a summary that is not valid JSON is an I/O failure"""
    run_dir = tmp_path / "runs" / "broken"
    run_dir.mkdir(parents=True)
    (run_dir / "summary.json").write_text('{"flat": {"overall_acc": 0.9')
    result = runner.invoke(app, ["report", str(tmp_path / "runs")])
    assert result.exit_code == EXIT_IO
