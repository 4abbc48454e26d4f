import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from carnot_flow import cli_runner as cli

ROOT = Path(__file__).resolve().parents[1]
MINI = ROOT / "configs" / "r1_mini.json"
H1 = ROOT / "configs" / "h1_default.json"


def carnot_flow(*args, env=None, cwd=None):
    e = dict(os.environ, **(env or {}))
    return subprocess.run(
        [sys.executable, "-m", "carnot_flow.cli_runner", *map(str, args)], capture_output=True, text=True, env=e, cwd=cwd
    )


def artifacts(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.log"}


def write_cfg(tmp_path, **over):
    raw = json.loads(MINI.read_text())
    raw.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return p


def test_malformed_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "schema": 1,\n  "group": "h1"\n  "lattice": {}\n}\n')
    r = carnot_flow("heat-run", "--config", p)
    assert r.returncode == 2
    assert "line 4, column 3" in r.stderr


def test_schema_violation_names_the_path(tmp_path):
    raw = json.loads(MINI.read_text())
    raw["checks"]["dissipation"]["tol"] = -1
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(cli.ConfigError, match="checks/dissipation/tol"):
        cli.load_config(p)
    assert carnot_flow("heat-run", "--config", p).returncode == 2


@pytest.mark.parametrize(
    "over,match",
    [
        ({"schema": 2}, "schema"),
        ({"group": "nope"}, "group"),
        ({"lattice": {"h": 0.1, "half_widths": [1.0, 1.0]}}, "half_widths"),
        ({"acceptance": ["c99"]}, "unknown acceptance"),
        ({"initial": {"family": "gaussian-bump", "center": [0.0, 0.0]}}, "center"),
    ],
)
def test_config_errors(tmp_path, over, match):
    with pytest.raises(cli.ConfigError, match=match):
        cli.load_config(write_cfg(tmp_path, **over))


def test_missing_config_file(tmp_path):
    with pytest.raises(cli.ConfigError, match="cannot read"):
        cli.load_config(tmp_path / "absent.json")


def test_cli_overrides_out_and_seed(tmp_path):
    cfg = cli.load_config(MINI, out=str(tmp_path / "x"), seed=7)
    assert cfg.out == tmp_path / "x" and cfg.seed == 7
    assert cfg.checks["hwi"]["max_points"] == cli.DEFAULT_CHECKS["hwi"]["max_points"]


def test_mini_all_is_fast_and_deterministic(tmp_path):
    t0 = time.perf_counter()
    r = carnot_flow("all", "--config", MINI, "--out", tmp_path / "a")
    elapsed = time.perf_counter() - t0
    assert r.returncode == 0, r.stdout + r.stderr
    assert elapsed < 60
    for name in cli.COMMANDS:
        assert f"{name}: PASS" in r.stdout
    r2 = carnot_flow("all", "--config", MINI, "--out", tmp_path / "b", env={"CARNOT_FLOW_THREADS": "1"})
    assert r2.returncode == 0
    a, b = artifacts(tmp_path / "a"), artifacts(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    assert "summary.json" in a and "heat/diagnostics.csv" in a
    assert (tmp_path / "a" / "run.log").read_text().count("PASS") == len(cli.COMMANDS)


def test_csv_format(tmp_path):
    assert carnot_flow("heat-run", "--config", MINI, "--out", tmp_path).returncode == 0
    raw = (tmp_path / "heat" / "diagnostics.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    raw.decode("utf-8")


def test_pure_python_backend_agrees(tmp_path):
    assert carnot_flow("ot-dist", "--config", MINI, "--out", tmp_path / "c").returncode == 0
    r = carnot_flow("ot-dist", "--config", MINI, "--out", tmp_path / "p", env={"CARNOT_FLOW_PURE_PYTHON": "1"})
    assert r.returncode == 0
    a = json.loads((tmp_path / "c" / "ot" / "report.json").read_text())
    b = json.loads((tmp_path / "p" / "ot" / "report.json").read_text())
    assert a == b
    probe = subprocess.run(
        [sys.executable, "-c", "from carnot_flow import _backend; print(_backend.COMPILED)"],
        capture_output=True, text=True, env=dict(os.environ, CARNOT_FLOW_PURE_PYTHON="1"),
    )
    assert probe.stdout.strip() == "False"


def test_failed_check_exits_one(tmp_path):
    raw = json.loads(MINI.read_text())
    raw["checks"]["jko"]["ratio_tol"] = 0.1
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    r = carnot_flow("jko-run", "--config", p, "--out", tmp_path / "o")
    assert r.returncode == 1 and "jko-run: FAIL" in r.stdout


def test_h1_kernel_check_mass(tmp_path):
    r = carnot_flow("kernel-check", "--config", H1, "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    rep = json.loads((tmp_path / "kernel" / "report.json").read_text())
    assert rep["schema"] == 1
    assert all(x["mass_err"] <= 1e-6 for x in rep["reports"])


def test_plot_data_empty_dir(tmp_path):
    r = carnot_flow("plot-data", "--out", tmp_path)
    assert r.returncode == 1
    for name in cli.PLOT_SOURCES:
        assert name in r.stderr
    with pytest.raises(cli.PlotDataError):
        cli.emit_plot_data(tmp_path)


def test_plot_data_from_heat_run(tmp_path):
    assert carnot_flow("heat-run", "--config", MINI, "--out", tmp_path).returncode == 0
    dats = sorted((tmp_path / "plot").glob("*.dat"))
    assert [p.name for p in dats] == ["dissipation_overlay.dat", "entropy_vs_t.dat", "fisher_vs_t.dat"]
    for p in dats:
        head = p.read_text().splitlines()[0]
        assert head.startswith("# t ")
    overlay = [line.split() for line in (tmp_path / "plot" / "dissipation_overlay.dat").read_text().splitlines()[1:]]
    assert overlay and all(len(row) == 3 for row in overlay)
    again = cli.emit_plot_data(tmp_path)
    assert len(again) == 3


def test_unknown_subcommand(tmp_path):
    cfg = cli.load_config(MINI, out=str(tmp_path))
    with pytest.raises(cli.ConfigError):
        cli.run("bogus", cfg)
