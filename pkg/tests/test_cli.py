import csv
import io
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowproc.cli import SCHEMA_VERSION, ConfigError, IoError, Report, Table, main, resolve_config, table_csv, write_report

SMALL = {
    "particles": {"numerics": {"h": 0.02, "dt": 2e-3, "times": [0.1, 0.2]}},
    "snake": {"numerics": {"ds": 1e-4, "levels": [0.0, 0.1]}},
    "spde": {"numerics": {"x_min": -4.0, "x_max": 4.0, "dx": 0.05, "dt": 5e-4, "t_final": 0.1,
                          "snapshot_times": [0.05, 0.1]}, "output": {"snapshots": True}},
    "loglaplace": {"numerics": {"t": 0.1, "dt": 2e-3, "dx": 0.04, "h": 0.02}},
    "duality": {"numerics": {"points": 16, "t": 0.5}},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run(tmp_path, cmd, cfg, *extra, out="out"):
    path = _write(tmp_path, cfg)
    return main([cmd, "--config", path, "--out", str(tmp_path / out), *extra])


@pytest.mark.parametrize("cmd", sorted(SMALL))
def test_commands_run_and_report(tmp_path, cmd):
    assert _run(tmp_path, cmd, SMALL[cmd], "--replicates", "4") in (0, 2)
    summary = json.loads((tmp_path / "out" / f"{cmd}_summary.json").read_text())
    assert summary["schema_version"] == SCHEMA_VERSION
    assert summary["config"]["command"] == cmd
    assert summary["config"]["mc"]["replicates"] == 4
    text = (tmp_path / "out" / f"{cmd}.csv").read_text(encoding="utf-8")
    assert "\r" not in text
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0][0] == "replicate"
    assert [int(r[0]) for r in rows[1:]] == sorted(int(r[0]) for r in rows[1:])


@pytest.mark.parametrize("cmd", ["particles", "spde", "snake"])
def test_reruns_are_byte_identical(tmp_path, cmd):
    # three replicates may fail a statistical check (status 2); the reports are written either way
    assert _run(tmp_path, cmd, SMALL[cmd], "--replicates", "3", "--seed", "5", out="a") in (0, 2)
    assert _run(tmp_path, cmd, SMALL[cmd], "--replicates", "3", "--seed", "5", out="b") in (0, 2)
    for f in os.listdir(tmp_path / "a"):
        if f.endswith(".csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_worker_count_does_not_change_output(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWPROC_THREADS", "1")
    assert _run(tmp_path, "particles", SMALL["particles"], "--replicates", "5", out="one") == 0
    monkeypatch.setenv("FLOWPROC_THREADS", "3")
    monkeypatch.setattr(os, "cpu_count", lambda: 4)
    assert _run(tmp_path, "particles", SMALL["particles"], "--replicates", "5", out="three") == 0
    assert (tmp_path / "one" / "particles.csv").read_bytes() == (tmp_path / "three" / "particles.csv").read_bytes()


def test_seed_override_changes_output(tmp_path):
    _run(tmp_path, "particles", SMALL["particles"], "--replicates", "3", "--seed", "1", out="a")
    _run(tmp_path, "particles", SMALL["particles"], "--replicates", "3", "--seed", "2", out="b")
    assert (tmp_path / "a" / "particles.csv").read_bytes() != (tmp_path / "b" / "particles.csv").read_bytes()


def test_unknown_command_writes_nothing(tmp_path):
    assert _run(tmp_path, "bogus", {}) == 1
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("cmd, cfg", [
    ("particles", {"numerics": {"h": 0.01, "dt": 0.01}}),
    ("particles", {"numerics": {"typo": 1}}),
    ("particles", {"model": {"sigma2": 0.0}}),
    ("spde", {"numerics": {"dt": 1.0}}),
    ("duality", {"numerics": {"n0": 5}}),
    ("duality", {"model": {"b": {"family": "sine", "amplitude": 0.2}}}),
    ("snake", {"numerics": {"levels": [-1.0]}}),
    ("loglaplace", {"numerics": {"f": {"half_width": 10.0}}}),
    ("particles", {"command": "snake"}),
    ("particles", {"mc": {"replicates": 1}}),
])
def test_invalid_config_writes_nothing(tmp_path, cmd, cfg):
    assert _run(tmp_path, cmd, cfg) == 1
    assert not (tmp_path / "out").exists()


def test_unreadable_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["particles", "--config", str(p), "--out", str(tmp_path / "out")]) == 1
    assert main(["particles", "--config", str(tmp_path / "missing.json")]) == 1


def test_bad_thread_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWPROC_THREADS", "zero")
    assert _run(tmp_path, "particles", SMALL["particles"], "--replicates", "2") == 1
    assert not (tmp_path / "out").exists()


def test_check_failure_exit_status(tmp_path):
    cfg = {"numerics": {"t": 0.1, "dt": 2e-3, "dx": 0.04, "h": 0.02, "inner_replicates": 5, "tolerance": 1e-12}}
    assert _run(tmp_path, "loglaplace", cfg, "--replicates", "2") == 2
    summary = json.loads((tmp_path / "out" / "loglaplace_summary.json").read_text())
    assert summary["passed"] is False
    assert summary["checks"][0]["passed"] is False


def test_output_dir_is_a_file(tmp_path):
    (tmp_path / "out").write_text("occupied")
    assert _run(tmp_path, "duality", SMALL["duality"], "--replicates", "2") == 1


def test_empty_results_give_header_only_csv(tmp_path):
    rep = Report({"": Table(["replicate", "value"], [])}, {})
    paths = write_report(rep, {"dir": str(tmp_path), "prefix": "empty"})
    assert (tmp_path / "empty.csv").read_text() == "replicate,value\n"
    assert json.loads((tmp_path / "empty_summary.json").read_text())["schema_version"] == SCHEMA_VERSION
    assert len(paths) == 2


def test_write_report_wraps_os_errors(tmp_path):
    (tmp_path / "f").write_text("x")
    with pytest.raises(IoError):
        write_report(Report({}, {}), {"dir": str(tmp_path / "f" / "sub"), "prefix": "p"})


def test_resolve_config_expands_defaults():
    cfg = resolve_config({}, "spde", seed=3)
    assert cfg["numerics"]["dx"] == 0.01 and cfg["mc"]["seed"] == 3
    with pytest.raises(ConfigError):
        resolve_config([], "spde")


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
@settings(max_examples=100, deadline=None)
def test_float_round_trip(xs):
    text = table_csv(Table(["i", "x"], [[i, x] for i, x in enumerate(xs)]))
    back = [float(r[1]) for r in list(csv.reader(io.StringIO(text)))[1:]]
    assert back == xs
