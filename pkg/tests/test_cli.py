"""Command-line interface: argument handling, exit codes, output formats."""

import json

import pytest

from guardsim.cli import EXIT_CONFIG, EXIT_OK, main


@pytest.fixture
def quick_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "scenario": "baseline-open",
        "attack": "none",
        "durations": {"setup_ms": 20_000, "warmup_ms": 5_000,
                      "steady_ms": 30_000, "grace_ms": 10_000},
    }))
    return str(path)


def test_run_json_output(quick_config, capsys):
    assert main(["run", "--config", quick_config]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["scenario"] == "baseline-open"
    assert doc["setup"]["behavior"] == "good"
    assert doc["steady"]["behavior"] == "good"


def test_run_markdown_output(quick_config, capsys):
    assert main(["run", "--config", quick_config, "--out", "markdown"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("| Scenario | Attack |")
    assert "baseline-open" in out


def test_run_csv_output(quick_config, capsys):
    assert main(["run", "--config", quick_config, "--out", "csv"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0].startswith("scenario,")


def test_run_writes_trace_file(quick_config, tmp_path, capsys):
    trace_path = tmp_path / "trace.jsonl"
    assert main(["run", "--config", quick_config,
                 "--trace", str(trace_path)]) == EXIT_OK
    capsys.readouterr()
    lines = [json.loads(line) for line in
             trace_path.read_text().strip().splitlines()]
    assert lines
    assert all({"t", "kind", "node", "detail"} <= set(e) for e in lines)


def test_seed_override(quick_config, capsys):
    assert main(["run", "--config", quick_config, "--seed", "7"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["seed"] == 7


def test_missing_config_file_is_config_error(capsys):
    assert main(["run", "--config", "/no/such/file.json"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_invalid_config_field_is_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"scenario": "nope"}')
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert "scenario" in capsys.readouterr().err


def test_command_required():
    with pytest.raises(SystemExit):
        main([])
