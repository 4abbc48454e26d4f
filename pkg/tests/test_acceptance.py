"""Runs the full ``carnot-flow all`` acceptance suite twice and reports criteria 1-12.

Each test prints one ``criterion N: PASS|FAIL`` line to the terminal.  The
suite takes about a quarter of an hour per run on a single core.
"""
import json
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from carnot_flow.acceptance import CHECKS

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "acceptance.json"
NAMES = list(CHECKS)
# per-check wall-time limits in seconds; checks without one are unbounded
RUNTIME_LIMITS = {1: 5, 2: 180, 3: 120, 4: 600, 8: 900, 9: 300}
SUITE_LIMIT = 45 * 60

pytestmark = pytest.mark.slow


def _run_all(out: Path) -> tuple[subprocess.CompletedProcess, float]:
    t0 = time.perf_counter()
    r = subprocess.run(
        [sys.executable, "-m", "carnot_flow.cli_runner", "all", "--config", str(CONFIG), "--out", str(out)],
        capture_output=True, text=True, env=dict(os.environ),
    )
    return r, time.perf_counter() - t0


def _timings(out: Path) -> dict:
    pat = re.compile(r"^(\S+): (?:PASS|FAIL) \(([0-9.]+) s\)$")
    return {m[1]: float(m[2]) for m in map(pat.match, (out / "run.log").read_text().splitlines()) if m}


def _artifacts(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.log"}


def _report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "run1"
    proc, wall = _run_all(out)
    return {"out": out, "proc": proc, "wall": wall, "times": _timings(out)}


@pytest.mark.parametrize("n", range(1, len(NAMES) + 1))
def test_criterion(suite, capsys, n):
    name = NAMES[n - 1]
    path = suite["out"] / "acceptance" / f"{name}.json"
    assert path.is_file(), suite["proc"].stderr
    res = json.loads(path.read_text())
    secs = suite["times"].get(name, float("nan"))
    limit = RUNTIME_LIMITS.get(n)
    in_time = limit is None or secs < limit
    failed = [k for k, v in res["criteria"].items() if not v]
    ok = res["passed"] and in_time
    detail = f"{name} ({secs:.1f} s{'' if limit is None else f' / limit {limit} s'})"
    if failed:
        detail += f" failed: {', '.join(failed)}"
    _report(capsys, n, ok, detail)
    assert res["passed"], failed
    assert in_time, f"{name} took {secs:.1f} s, limit {limit} s"


def test_criterion_12_determinism(suite, tmp_path_factory, capsys):
    again = tmp_path_factory.mktemp("acceptance") / "run2"
    proc, wall2 = _run_all(again)
    a, b = _artifacts(suite["out"]), _artifacts(again)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and suite["wall"] < SUITE_LIMIT and suite["proc"].returncode == proc.returncode == 0
    detail = f"{len(a)} artifacts, {len(differing)} differ; suite wall time {suite['wall']:.0f} s and {wall2:.0f} s (limit {SUITE_LIMIT} s)"
    _report(capsys, 12, ok, detail)
    assert not differing, differing[:10]
    assert suite["wall"] < SUITE_LIMIT
    assert suite["proc"].returncode == 0, suite["proc"].stdout[-2000:]
