"""Tests for the cockpit-sim command line."""

import json
import logging
from pathlib import Path

import pytest

from src.cockpit_sim.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main

SEEDS = Path(__file__).parent / "seeds"


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture(autouse=True)
def no_endpoint(monkeypatch):
    monkeypatch.setattr("src.cockpit_sim.cli.load_environment", lambda: None)
    monkeypatch.delenv("COCKPIT_ENDPOINT_URL", raising=False)
    monkeypatch.delenv("COCKPIT_MODEL", raising=False)


def test_validate_seeds(capsys):
    assert main(["validate", str(SEEDS)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "all scenarios valid" in out
    assert "ok   " in out and "FAIL" not in out


def test_validate_reports_failures(tmp_path, capsys):
    (tmp_path / "noop.xml").write_text(
        '<scenario><query>Close it.</query><api_call>door_status_set(status="closed")</api_call></scenario>'
    )
    (tmp_path / "broken.xml").write_text("<scenario><query>Hi</query>")
    assert main(["validate", str(tmp_path)]) == EXIT_FAILURE
    out = capsys.readouterr().out
    assert out.count("FAIL") == 2
    assert "2 failed" in out


def test_missing_scenarios_are_a_usage_error(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nothing.xml")]) == EXIT_USAGE
    assert "no scenario files match" in capsys.readouterr().err


def test_save_then_replay(tmp_path, capsys):
    records = tmp_path / "records"
    assert main(["validate", str(SEEDS), "--save", str(records)]) == EXIT_OK
    assert (records / "climate_door" / "manifest.json").is_file()
    assert main(["replay", str(records)]) == EXIT_OK
    assert "no drift" in capsys.readouterr().out

    state = records / "fan_and_cooling" / "state_001.json"
    state.write_text(state.read_text().replace('"value": 5\n', '"value": 6\n'))
    assert main(["replay", str(records)]) == EXIT_FAILURE
    assert "DRIFT fan_and_cooling" in capsys.readouterr().out
    assert main(["replay", str(tmp_path / "empty")]) == EXIT_USAGE


def test_devices(capsys):
    assert main(["devices"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 12
    assert main(["devices", "--api", "conversation", "--json"]) == EXIT_OK
    apis = json.loads(capsys.readouterr().out)
    assert len(apis) == 15
    assert apis[0]["device"] == "conversation"
    assert main(["devices", "--json"]) == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)) == 12
    assert main(["devices", "--api", "toaster"]) == EXIT_USAGE


def test_run_oracle(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(SEEDS), "--agent", "oracle", "--mode", "fc", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("group")
    report = json.loads((out / "report.json").read_text())
    assert report["overall"]["accuracy"] == 1.0
    assert report["failed_turns"] == 0
    assert (out / "scenarios" / "climate_door.json").is_file()
    assert "=== turn 0 / dialogue ===" in (out / "transcripts" / "climate_door.txt").read_text()
    run = json.loads((out / "run.json").read_text())
    assert run["agent"] == "oracle"
    assert run["session"]["mode"] == "fc"
    assert len(run["scenarios"]) == len(list(SEEDS.glob("*.xml")))
    assert (out / "report.txt").read_text().startswith("group")


def test_distractors_leave_reports_unchanged(tmp_path):
    reports = []
    for k in ("0", "4"):
        out = tmp_path / f"k{k}"
        argv = ["run", str(SEEDS), "--agent", "oracle", "--mode", "sfc", "--distractors", k, "--out", str(out)]
        assert main(argv) == EXIT_OK
        reports.append((out / "report.json").read_text())
    assert reports[0] == reports[1]


def test_report_reaggregates(tmp_path, capsys):
    out = tmp_path / "run"
    argv = ["run", str(SEEDS), "--agent", "null", "--mode", "hybrid", "--jobs", "2", "--out", str(out)]
    assert main(argv) == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(out), "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    written = json.loads((out / "report.json").read_text())
    assert report["overall"] == written["overall"]
    assert report["overall"]["f1_negative"] == 1.0
    assert main(["report", str(tmp_path / "missing")]) == EXIT_USAGE


def test_run_configuration_errors(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["run", str(SEEDS), "--out", out]) == EXIT_USAGE
    assert "needs an endpoint" in capsys.readouterr().err

    config = tmp_path / "run.json"
    config.write_text("{broken")
    assert main(["run", str(SEEDS), "--agent", "oracle", "--config", str(config), "--out", out]) == EXIT_USAGE

    with pytest.raises(SystemExit) as info:
        main(["run", str(SEEDS), "--agent", "oracle", "--distractors", "3", "--out", out])
    assert info.value.code == 2


def test_undecodable_scenario_fails_validation(tmp_path, capsys):
    (tmp_path / "binary.xml").write_bytes(b"\xff")
    assert main(["validate", str(tmp_path)]) == EXIT_FAILURE
    out = capsys.readouterr().out
    assert "FAIL" in out and "not valid UTF-8" in out


def test_endpoint_is_not_opened_without_scenarios(tmp_path, monkeypatch):
    opened = []

    class RecordingEndpoint:
        def __init__(self, settings):
            opened.append(settings)

        def close(self):
            opened.append("closed")

    monkeypatch.setattr("src.cockpit_sim.cli.ChatEndpoint", RecordingEndpoint)
    monkeypatch.setenv("COCKPIT_ENDPOINT_URL", "http://localhost:1/v1")
    monkeypatch.setenv("COCKPIT_MODEL", "test-model")
    code = main(["run", str(tmp_path / "nothing.xml"), "--out", str(tmp_path / "run")])
    assert code == EXIT_USAGE
    assert opened == []
