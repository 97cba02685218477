import json
import socket
import subprocess
import sys

import pytest
import yaml

from qnetctl import cli
from qnetctl import control as ctl


def run(tmp_path, command, cfg=None, *extra):
    argv = [command, "--out", str(tmp_path / "out")]
    if cfg is not None:
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(cfg))
        argv += ["--config", str(path)]
    return cli.main(argv + list(extra))


def artifact(tmp_path, name):
    return tmp_path / "out" / name


FAST = {"profile": "ideal", "sync": {"duration": 3}, "tpi": {"points": 8, "dwell": 0.2}, "qst": {"dwell": 0.1}}


def test_sync_writes_report_with_provenance(tmp_path, capsys):
    assert run(tmp_path, "sync", {**FAST, "seed": 3}) == cli.EXIT_OK
    rep = json.loads(artifact(tmp_path, "sync.json").read_text())
    assert rep["offset"] == 138_000
    assert rep["seed"] == 3 and len(rep["config_digest"]) == 16 and rep["command"] == "sync"
    prov = artifact(tmp_path, "provenance.jsonl").read_text().splitlines()
    assert prov and all(json.loads(l)["outcome"] in ("ok", "timeout", "error") for l in prov)


def test_config_error_exit_code(tmp_path, capsys):
    assert run(tmp_path, "sync", {"sevice": {}}) == cli.EXIT_CONFIG
    assert "sevice" in capsys.readouterr().err
    assert cli.main(["sync", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    assert cli.main(["sync", "--profile", "nope", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_darkcheck_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "darkcheck", {"profile": "ideal"}) == cli.EXIT_OK
    assert run(tmp_path, "darkcheck", {"profile": "dark-violation"}) == cli.EXIT_DARK_ABORT
    assert "site3" in capsys.readouterr().err
    assert json.loads(artifact(tmp_path, "darkcheck.json").read_text())["passed"] is False


def test_sync_failure_exit_code(tmp_path):
    assert run(tmp_path, "sync", {"profile": "ideal", "sync": {"duration": 1.5, "min_pps": 3}}) == cli.EXIT_SYNC


def test_unreachable_agent_is_transport_failure(tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    names = ["eps", "pa_site2", "pa_site3", "ttu_site2", "ttu_site3", "sim"]
    cfg = {"profile": "ideal", "transport": "tcp", "rpc": {"max_attempts": 2, "timeout_ms": 200, "backoff_ms": 0},
           "endpoints": {n: f"127.0.0.1:{port + i + 1 if i else port}" for i, n in enumerate(names)}}
    assert run(tmp_path, "sync", cfg) == cli.EXIT_TRANSPORT


@pytest.mark.parametrize("exc,code", [
    (ctl.CalibrationFailure("x"), cli.EXIT_CALIBRATION),
    (ctl.SyncFailure("x"), cli.EXIT_SYNC),
    (ctl.ControlError("x"), cli.EXIT_ERROR),
])
def test_exception_mapping(tmp_path, monkeypatch, exc, code):
    def boom(sess):
        raise exc
    monkeypatch.setitem(cli.HANDLERS, "sync", boom)
    assert run(tmp_path, "sync", {"profile": "ideal"}) == code


def test_tpi_fringe_csv_rows(tmp_path, capsys):
    assert run(tmp_path, "tpi", FAST) == cli.EXIT_OK
    lines = artifact(tmp_path, "fringe.csv").read_text().splitlines()
    rows = [l for l in lines if not l.startswith("#")]
    assert rows[0].startswith("basis,theta")
    assert len(rows) - 1 == 4 * 8
    assert any(l.startswith("# config_digest") for l in lines)
    fits = json.loads(artifact(tmp_path, "tpi_fits.json").read_text())["fits"]
    assert all(f["visibility"] > 0.95 for f in fits.values())
    assert "V_H" in capsys.readouterr().out


def test_qst_writes_density_matrix(tmp_path):
    assert run(tmp_path, "qst", FAST) == cli.EXIT_OK
    rec = json.loads(artifact(tmp_path, "density_matrix.json").read_text())
    assert len(rec["rho"]["real"]) == 4 and rec["fidelity"] > 0.95


def test_runs_are_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        assert run(d, "tpi", {**FAST, "seed": 11}) == cli.EXIT_OK
        outs.append(artifact(d, "fringe.csv").read_bytes())
    assert outs[0] == outs[1]
    c = tmp_path / "c"
    c.mkdir()
    assert run(c, "tpi", {**FAST, "seed": 12}) == cli.EXIT_OK
    assert artifact(c, "fringe.csv").read_bytes() != outs[0]


def test_service_command_with_scripted_drift(tmp_path, capsys):
    cfg = {**FAST, "seed": 7, "tpi": {"points": 16, "dwell": 0.5},
           "service": {"run_time_hours": 4, "interval_hours": 1, "calibrate": False},
           "drift_events": [{"site": "site3", "at_iteration": 2, "axis": [0, 0, 1], "angle_deg": 90}]}
    assert run(tmp_path, "service", cfg) == cli.EXIT_OK
    records = [json.loads(l) for l in artifact(tmp_path, "run_record.jsonl").read_text().splitlines()]
    assert [r["index"] for r in records] == [1, 2, 3, 4]
    assert [r["recalibrated"] for r in records] == [False, True, False, False]
    assert all(r["seed"] == 7 for r in records)
    summary = json.loads(artifact(tmp_path, "service.json").read_text())
    assert summary["status"] == "completed" and summary["recalibrations"] == 1


def test_service_dark_abort_exit_code(tmp_path):
    cfg = {"profile": "dark-violation", "sync": {"duration": 3}}
    assert run(tmp_path, "service", cfg) == cli.EXIT_DARK_ABORT
    assert json.loads(artifact(tmp_path, "service.json").read_text())["status"] == "dark_count_abort"


def test_tcp_transport_spawns_agents(tmp_path):
    cfg = {**FAST, "transport": "tcp",
           "endpoints": {n: "127.0.0.1:0" for n in ["eps", "pa_site2", "pa_site3", "ttu_site2", "ttu_site3", "sim"]}}
    assert run(tmp_path, "sync", cfg) == cli.EXIT_OK


def test_console_script_version_and_help():
    out = subprocess.run([sys.executable, "-m", "qnetctl.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("qnetctl ")
    out = subprocess.run([sys.executable, "-m", "qnetctl.cli", "--help"], capture_output=True, text=True)
    for cmd in ("sync", "darkcheck", "calibrate-eps", "compensate", "tpi", "qst", "service", "serve-agents"):
        assert cmd in out.stdout
