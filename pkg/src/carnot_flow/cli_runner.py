"""Batch experiment driver: ``carnot-flow <subcommand> --config path [--out dir] [--seed n]``.

Exit codes: 0 success, 1 a check failed (or a solver error), 2 bad
configuration.  Artifacts are written atomically; JSON and CSV outputs
contain no timings, so reruns with the same config and seed are byte
identical.  Wall times go to ``run.log``.
"""
from __future__ import annotations

import os

_threads = os.environ.get("CARNOT_FLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import copy  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402

import jsonschema  # noqa: E402
import numpy as np  # noqa: E402

from . import acceptance  # noqa: E402
from . import flow_analysis as fa  # noqa: E402
from .curvature_probe import (  # noqa: E402
    ProbeError,
    be_violation_search,
    geometric_times,
    lambda_estimate,
    probe_bank,
    probe_table,
    write_lambda_csv,
    write_witness_json,
)
from .functionals import DIAGNOSTICS_HEADER, diagnostics_record  # noqa: E402
from .group_core import GroupError, StratifiedAlgebra, group_from_json, ricci_constant  # noqa: E402
from .heat_engine import HeatError, assemble_sublaplacian, heat_solve, kernel_report, semigroup_apply  # noqa: E402
from .lattice import FlowTrace, GridMeasure, Lattice, LatticeError, atomic_write_text, discretize, save_measure  # noqa: E402
from .transport import TransportError, WassersteinOptions, linearized_w2, wasserstein  # noqa: E402

__all__ = ["ConfigError", "PlotDataError", "ExperimentConfig", "load_config", "run", "emit_plot_data", "main", "SUBCOMMANDS"]

SUBCOMMANDS = ("heat-run", "kernel-check", "dissipation-check", "edi-check", "jko-run", "ot-dist", "cd-check", "hwi-check", "all")


class ConfigError(ValueError):
    pass


class PlotDataError(FileNotFoundError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema", "group", "lattice", "initial"],
    "properties": {
        "schema": {"const": 1},
        "group": {
            "oneOf": [
                {"type": "string"},
                {
                    "type": "object",
                    "required": ["layers"],
                    "additionalProperties": False,
                    "properties": {
                        "layers": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                        "brackets": {"type": "array", "items": {"type": "object"}},
                        "name": {"type": "string"},
                    },
                },
            ]
        },
        "lattice": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["h", "half_widths"],
                    "properties": {"h": _POS, "half_widths": {"type": "array", "items": _POS, "minItems": 1}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["lower", "upper", "counts"],
                    "properties": {
                        "lower": _VEC,
                        "upper": _VEC,
                        "counts": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
                    },
                },
            ]
        },
        "initial": {
            "type": "object",
            "required": ["family"],
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["uniform-box", "gaussian-bump", "two-bumps"]},
                "center": _VEC,
                "centers": {"type": "array", "items": _VEC, "minItems": 2, "maxItems": 2},
                "width": _POS,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _POS,
                "dt": {"oneOf": [_POS, {"type": "null"}]},
                "scheme": {"enum": ["explicit", "implicit"]},
                "frames": {"type": "integer", "minimum": 5},
            },
        },
        "ot": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["box", "sinkhorn", "riemannian_eps", "quantile", "linearized", "auto"]},
                "max_points": {"type": "integer", "minimum": 8},
                "eps": _POS,
            },
        },
        "checks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kernel": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"times": {"type": "array", "items": _POS}, "mass_tol": _POS, "symmetry_tol": _POS, "scaling_tol": _POS},
                },
                "dissipation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"window": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}, "tol": _POS},
                },
                "edi": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"window": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}, "tol": _POS, "levels": {"type": "integer", "minimum": 0, "maximum": 4}},
                },
                "jko": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"taus": {"type": "array", "items": _POS, "minItems": 2}, "T": _POS, "ratio_tol": _POS, "method": {"enum": ["auto", "entropic", "linearized", "quantile"]}},
                },
                "cd": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"K": {"type": "array", "items": _NUM, "minItems": 1}, "times": {"type": "array", "items": _POS, "minItems": 1}},
                },
                "hwi": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"pairs": {"type": "integer", "minimum": 1}, "eps": _POS, "K": {"oneOf": [_NUM, {"type": "null"}]}, "max_points": {"type": "integer", "minimum": 8}},
                },
            },
        },
        "acceptance": {"oneOf": [{"const": "all"}, {"type": "array", "items": {"type": "string"}}]},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}

DEFAULT_CHECKS = {
    "kernel": {"times": [0.05, 0.1], "mass_tol": 1e-6, "symmetry_tol": 1e-3, "scaling_tol": 0.05},
    "dissipation": {"window": [0.1, 0.4], "tol": 0.05},
    "edi": {"window": [0.1, 0.4], "tol": 0.1, "levels": 2},
    "jko": {"taus": [0.05, 0.025, 0.0125], "T": 0.25, "ratio_tol": 0.75, "method": "auto"},
    "cd": {"K": [-10.0, -1.0, 0.0, 1.0, 10.0], "times": geometric_times()},
    "hwi": {"pairs": 10, "eps": 0.5, "K": None, "max_points": 256},
}


@dataclass
class ExperimentConfig:
    raw: dict
    group: StratifiedAlgebra
    lattice: Lattice
    solver: dict
    ot: dict
    checks: dict
    acceptance: list[str]
    out: Path
    seed: int
    source: Path | None = None

    def initial_measure(self) -> GridMeasure:
        spec = self.raw["initial"]
        fam = spec["family"]
        n = self.group.n
        width = float(spec.get("width", 0.3))
        if fam == "uniform-box":
            return GridMeasure.normalized(self.lattice, np.ones(self.lattice.size))
        if fam == "gaussian-bump":
            c = np.asarray(spec.get("center", [0.0] * n), dtype=float)
            return discretize(self.lattice, lambda x: np.exp(-np.sum((x - c) ** 2, axis=-1) / width))
        cs = [np.asarray(c, dtype=float) for c in spec.get("centers", _default_centres(n))]
        return discretize(self.lattice, lambda x: sum(np.exp(-np.sum((x - c) ** 2, axis=-1) / width) for c in cs))


def _default_centres(n):
    a = [0.0] * n
    b = [0.0] * n
    a[0], b[0] = 0.7, -0.7
    return [a, b]


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str | os.PathLike, out: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Parse, schema-validate and build a configuration; every problem raises :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: invalid config at {where}: {exc.message}") from exc
    try:
        group = group_from_json(raw["group"])
    except GroupError as exc:
        raise ConfigError(f"{path}: group: {exc}") from exc
    lat_spec = raw["lattice"]
    try:
        if "h" in lat_spec:
            if len(lat_spec["half_widths"]) != group.n:
                raise ConfigError(f"{path}: lattice half_widths needs {group.n} entries")
            lattice = Lattice.for_group(group, lat_spec["h"], lat_spec["half_widths"])
        else:
            lattice = Lattice(tuple(lat_spec["lower"]), tuple(lat_spec["upper"]), tuple(lat_spec["counts"]))
            if lattice.ndim != group.n:
                raise ConfigError(f"{path}: lattice dimension {lattice.ndim} differs from group dimension {group.n}")
    except LatticeError as exc:
        raise ConfigError(f"{path}: lattice: {exc}") from exc
    init = raw["initial"]
    for key in ("center",):
        if key in init and len(init[key]) != group.n:
            raise ConfigError(f"{path}: initial.{key} needs {group.n} entries")
    for c in init.get("centers", []):
        if len(c) != group.n:
            raise ConfigError(f"{path}: initial.centers entries need {group.n} entries")
    solver = _merge({"T": 0.5, "dt": None, "scheme": "explicit", "frames": 41}, raw.get("solver", {}))
    ot = _merge({"backend": "auto", "max_points": 512, "eps": 0.1}, raw.get("ot", {}))
    checks = _merge(DEFAULT_CHECKS, raw.get("checks", {}))
    acc = raw.get("acceptance", [])
    acc = list(acceptance.CHECKS) if acc == "all" else list(acc)
    unknown = [a for a in acc if a not in acceptance.CHECKS]
    if unknown:
        raise ConfigError(f"{path}: unknown acceptance checks {unknown}; known: {list(acceptance.CHECKS)}")
    w = checks["dissipation"]["window"]
    if not w[0] < w[1]:
        raise ConfigError(f"{path}: checks.dissipation.window must be increasing")
    out_dir = Path(out if out is not None else raw.get("out", "out"))
    return ExperimentConfig(raw, group, lattice, solver, ot, checks, acc, out_dir, int(seed if seed is not None else raw.get("seed", 0)), path)


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    atomic_write_text(path, buf.getvalue())


def _write_json(path: Path, payload: dict) -> None:
    fa.write_report(path, dict(payload, schema=1))


@dataclass
class Session:
    cfg: ExperimentConfig
    log: list[str] = field(default_factory=list)
    _trace: FlowTrace | None = None
    _op: object = None

    @property
    def out(self) -> Path:
        return self.cfg.out

    def operator(self):
        if self._op is None:
            self._op = assemble_sublaplacian(self.cfg.group, self.cfg.lattice)
        return self._op

    def trace(self) -> FlowTrace:
        if self._trace is None:
            s = self.cfg.solver
            self._trace = heat_solve(self.operator(), self.cfg.initial_measure(), s["T"], dt=s["dt"], scheme=s["scheme"], frames=s["frames"])
        return self._trace

    def ot_options(self, uncertainty=False) -> WassersteinOptions:
        backend = self.cfg.ot["backend"]
        if backend == "auto":
            backend = "quantile" if self.cfg.group.n == 1 else "linearized"
        return WassersteinOptions(backend=backend, max_points=self.cfg.ot["max_points"], eps=self.cfg.ot["eps"], uncertainty=uncertainty)


def cmd_heat_run(s: Session) -> bool:
    g = s.cfg.group
    trace = s.trace()
    recs = [diagnostics_record(g, m, t) for t, m in zip(trace.times, trace.measures)]
    header = DIAGNOSTICS_HEADER().split(",")
    buf = DIAGNOSTICS_HEADER() + "\n" + "".join(r.csv_row() + "\n" for r in recs)
    atomic_write_text(s.out / "heat" / "diagnostics.csv", buf)
    save_measure(trace.measures[-1], s.out / "heat" / "final.bin")
    mass_err = max(abs(r.mass - 1.0) for r in recs)
    _write_json(s.out / "heat" / "summary.json", {"frames": len(trace), "T": float(trace.times[-1]), "max_mass_err": mass_err, "columns": header})
    emit_plot_data(s.out)
    return mass_err <= 1e-9


def cmd_kernel_check(s: Session) -> bool:
    c = s.cfg.checks["kernel"]
    reps = [kernel_report(s.operator(), t) for t in c["times"]]
    ok = all(r["mass_err"] <= c["mass_tol"] and r["symmetry_err"] <= c["symmetry_tol"] for r in reps)
    ok &= all(not math.isfinite(r["scaling_err"]) or r["scaling_err"] <= c["scaling_tol"] for r in reps)
    _write_json(s.out / "kernel" / "report.json", {"reports": reps, "tolerances": c, "passed": ok})
    return ok


def cmd_dissipation_check(s: Session) -> bool:
    c = s.cfg.checks["dissipation"]
    rows = fa.dissipation_check(s.cfg.group, s.trace())
    sel = [r for r in rows if c["window"][0] - 1e-9 <= r["t"] <= c["window"][1] + 1e-9]
    if not sel:
        raise fa.FlowError("no frames inside the dissipation window")
    worst = max(r["rel_mismatch"] for r in sel)
    _write_csv(s.out / "dissipation" / "rows.csv", ["t", "dEnt_dt", "fisher", "rel_mismatch"], [[r["t"], r["dEnt_dt"], r["fisher"], r["rel_mismatch"]] for r in rows])
    ok = worst <= c["tol"]
    _write_json(s.out / "dissipation" / "report.json", {"worst": worst, "tolerance": c["tol"], "window": c["window"], "passed": ok})
    return ok


EDI_COLUMNS = ["s", "t", "ent_s", "ent_t", "action", "slope", "edi_residual", "entropy_drop", "slope_via_velocity", "tolerance"]


def cmd_edi_check(s: Session) -> bool:
    c = s.cfg.checks["edi"]
    reps = fa.edi_verify(s.cfg.group, s.trace(), s.ot_options(), tuple(c["window"]), c["levels"], c["tol"])
    _write_csv(s.out / "edi" / "intervals.csv", EDI_COLUMNS, [[getattr(r, k) for k in EDI_COLUMNS] for r in reps])
    ok = all(r.inequality_pass and r.equality_pass for r in reps)
    _write_json(s.out / "edi" / "report.json", {"intervals": [r.to_dict() for r in reps], "passed": ok})
    return ok


def cmd_jko_run(s: Session) -> bool:
    c = s.cfg.checks["jko"]
    g = s.cfg.group
    mu0 = s.cfg.initial_measure()
    method = c["method"]
    if method == "auto":
        method = "quantile" if g.n == 1 else "linearized"
    T = c["T"]
    errs = []
    if method == "quantile":
        q0 = fa.QuantileState.from_measure(mu0)
        lv = (np.arange(2000) + 0.5) / 2000
        ref = fa.heat_quantile_reference(q0, T, lv)
        for tau in c["taus"]:
            _, _, st = fa.jko_run(g, mu0, T, fa.JKOConfig(tau=tau, method="quantile"))
            errs.append(math.sqrt(float(np.mean((st.quantile(lv) - ref) ** 2))))
    else:
        ref = GridMeasure.normalized(s.cfg.lattice, semigroup_apply(s.operator(), mu0.density, T))
        for tau in c["taus"]:
            _, _, mu = fa.jko_run(g, mu0, T, fa.JKOConfig(tau=tau, method=method))
            errs.append(math.sqrt(max(linearized_w2(g, mu, ref), 0.0)))
    ratios = [errs[i + 1] / errs[i] for i in range(len(errs) - 1)]
    ok = max(ratios) <= c["ratio_tol"]
    _write_csv(s.out / "jko" / "errors.csv", ["tau", "w_error"], list(zip(c["taus"], errs)))
    _write_json(s.out / "jko" / "report.json", {"method": method, "T": T, "taus": c["taus"], "errors": errs, "ratios": ratios, "passed": ok})
    return ok


def cmd_ot_dist(s: Session) -> bool:
    trace = s.trace()
    res = wasserstein(s.cfg.group, trace.measures[0], trace.measures[-1], s.ot_options(uncertainty=True))
    _write_json(s.out / "ot" / "report.json", {"value": res.value, "uncertainty": res.uncertainty, "backend": res.backend, "note": res.note})
    return math.isfinite(res.value) and res.value >= 0


def cmd_cd_check(s: Session) -> bool:
    c = s.cfg.checks["cd"]
    g, lat = s.cfg.group, s.cfg.lattice
    half = 0.5 * (np.asarray(lat.upper) - np.asarray(lat.lower))
    tab = probe_table(s.operator(), c["times"], probe_bank(g, 0.6 * half))
    wits = {K: be_violation_search(tab, K)[0] for K in c["K"]}
    est = lambda_estimate(tab)
    write_witness_json(s.out / "cd" / "witness.json", wits, {"group": g.name, "lambda": est})
    write_lambda_csv(s.out / "cd" / "lambda.csv", est)
    if g.is_commutative:
        return all(w is None for K, w in wits.items() if K <= 0)
    return all(w is not None for w in wits.values())


def cmd_hwi_check(s: Session) -> bool:
    c = s.cfg.checks["hwi"]
    g, lat = s.cfg.group, s.cfg.lattice
    rng = np.random.default_rng(s.cfg.seed)
    half = 0.5 * (np.asarray(lat.upper) - np.asarray(lat.lower))
    centre = 0.5 * (np.asarray(lat.upper) + np.asarray(lat.lower))
    K = (ricci_constant(g) if c["K"] is None else float(c["K"])) + 0.0
    dist = None
    if g.n > 1:
        from .group_core import RiemannianEpsDistance

        dist = RiemannianEpsDistance(g, fa.distance_lattice(lat), c["eps"])
    rows = []
    for _ in range(c["pairs"]):
        pts = [centre + rng.uniform(-0.3, 0.3, g.n) * half for _ in range(2)]
        ws = rng.uniform(0.05, 0.15, 2) * float(np.min(half)) ** 2
        mu, nu = (discretize(lat, lambda x, p=p, w=w: np.exp(-np.sum((x - p) ** 2, axis=-1) / w)) for p, w in zip(pts, ws))
        r = fa.hwi_check(g, mu, nu, c["eps"], K, distance=dist, max_points=c["max_points"])
        rows.append([r.ent_mu, r.ent_nu, r.fisher_eps, r.w_eps, r.margin])
    ok = all(r[-1] >= 0 for r in rows)
    _write_csv(s.out / "hwi" / "pairs.csv", ["ent_mu", "ent_nu", "fisher_eps", "w_eps", "margin"], rows)
    _write_json(s.out / "hwi" / "report.json", {"K": K, "eps": c["eps"], "min_margin": min(r[-1] for r in rows), "passed": ok})
    return ok


COMMANDS = {
    "heat-run": cmd_heat_run,
    "kernel-check": cmd_kernel_check,
    "dissipation-check": cmd_dissipation_check,
    "edi-check": cmd_edi_check,
    "jko-run": cmd_jko_run,
    "ot-dist": cmd_ot_dist,
    "cd-check": cmd_cd_check,
    "hwi-check": cmd_hwi_check,
}


def _timed(s: Session, name: str, fn) -> bool:
    t0 = time.perf_counter()
    ok = fn()
    dt = time.perf_counter() - t0
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({dt:.1f} s)"
    s.log.append(line)
    print(line, flush=True)
    return ok


def run(subcommand: str, cfg: ExperimentConfig) -> int:
    """Run one subcommand (``all`` runs every subcommand, then the configured acceptance checks)."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    s = Session(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        if subcommand != "all":
            ok = _timed(s, subcommand, lambda: COMMANDS[subcommand](s))
        else:
            results = {}
            for name, fn in COMMANDS.items():
                results[name] = _timed(s, name, lambda fn=fn: fn(s))
            ctx = acceptance.CheckContext(seed=cfg.seed, out=cfg.out)
            for name in cfg.acceptance:
                holder = {}

                def body(name=name, holder=holder):
                    holder["r"] = acceptance.run_check(name, ctx)
                    return holder["r"].passed

                results[name] = _timed(s, name, body)
                _write_json(cfg.out / "acceptance" / f"{name}.json", holder["r"].to_dict())
            ok = all(results.values())
            _write_json(cfg.out / "summary.json", {"results": results, "passed": ok})
    except (HeatError, TransportError, fa.FlowError, ProbeError, LatticeError, GroupError) as exc:
        s.log.append(f"{subcommand}: ERROR {type(exc).__name__}: {exc}")
        print(s.log[-1], file=sys.stderr)
        ok = False
    finally:
        atomic_write_text(cfg.out / "run.log", "\n".join(s.log) + "\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# plot data

PLOT_SOURCES = {
    "heat/diagnostics.csv": ("entropy_vs_t.dat", "fisher_vs_t.dat", "dissipation_overlay.dat"),
    "edi/intervals.csv": ("edi_terms.dat",),
    "jko/errors.csv": ("jko_error.dat",),
}


def _read_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def _dat(path: Path, columns: list[str], data: np.ndarray) -> None:
    lines = ["# " + " ".join(columns)]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in data]
    atomic_write_text(path, "\n".join(lines) + "\n")


def emit_plot_data(artifact_dir: str | os.PathLike) -> list[Path]:
    """Write gnuplot-ready ``.dat`` files under ``<dir>/plot`` from whatever artifacts exist."""
    root = Path(artifact_dir)
    found = [rel for rel in PLOT_SOURCES if (root / rel).is_file()]
    if not found:
        raise PlotDataError(f"no artifacts in {root}; expected at least one of: {', '.join(PLOT_SOURCES)}")
    out = root / "plot"
    written = []
    for rel in found:
        header, data = _read_csv(root / rel)
        if rel == "heat/diagnostics.csv":
            t, ent, fis = data[:, header.index("t")], data[:, header.index("entropy")], data[:, header.index("fisher")]
            _dat(out / "entropy_vs_t.dat", ["t", "entropy"], np.column_stack([t, ent]))
            _dat(out / "fisher_vs_t.dat", ["t", "fisher"], np.column_stack([t, fis]))
            mid = slice(1, len(t) - 1)
            rate = -(ent[2:] - ent[:-2]) / (t[2:] - t[:-2])
            _dat(out / "dissipation_overlay.dat", ["t", "minus_dEnt_dt", "fisher"], np.column_stack([t[mid], rate, fis[mid]]))
        elif rel == "edi/intervals.csv":
            _dat(out / "edi_terms.dat", header, data)
        else:
            _dat(out / "jko_error.dat", header, data)
        written.extend(out / name for name in PLOT_SOURCES[rel])
    return written


# ---------------------------------------------------------------------------
# entry point


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="carnot-flow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
    p = sub.add_parser("plot-data", help="regenerate .dat files from an artifact directory")
    p.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    if args.command == "plot-data":
        try:
            for path in emit_plot_data(args.out):
                print(path)
        except PlotDataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    try:
        cfg = load_config(args.config, args.out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
