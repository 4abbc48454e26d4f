"""Named acceptance checks run by ``carnot-flow all``.

Each check is a function ``check(ctx) -> CheckResult``.  Results carry only
deterministic quantities; wall times are reported separately so that
reruns produce byte-identical artifacts.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import flow_analysis as fa
from .curvature_probe import (
    be_violation_search,
    geometric_times,
    lambda_estimate,
    probe_bank,
    probe_table,
    refinement_check,
)
from .functionals import (
    entropy,
    entropy_first_variation,
    epsilon_fisher,
    epsilon_fisher_frame,
    horizontal_fisher,
    layer_fisher_terms,
    _coordinate_field,
)
from .group_core import RiemannianEpsDistance, StratifiedAlgebra, inverse, preset, ricci_constant
from .heat_engine import _dilation_pairs, _envelope, _evolve_delta, assemble_sublaplacian, heat_solve, semigroup_apply
from .lattice import GridMeasure, Lattice, bump_mollifier, discretize, left_convolve
from .transport import (
    WassersteinOptions,
    linearized_w2,
    solve_exact,
    solve_sinkhorn,
    wasserstein,
)

__all__ = ["CheckResult", "CheckContext", "CHECKS", "run_check", "two_bump", "gaussian"]


@dataclass
class CheckContext:
    seed: int = 0
    out: Path | None = None


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict
    criteria: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "criteria": self.criteria, "metrics": self.metrics}


def _result(name, criteria: dict, metrics: dict) -> CheckResult:
    return CheckResult(name, all(bool(v) for v in criteria.values()), metrics, {k: bool(v) for k, v in criteria.items()})


def gaussian(centre, width):
    c = np.asarray(centre, dtype=float)
    return lambda x: np.exp(-np.sum((x - c) ** 2, axis=-1) / width)


def two_bump(x):
    a = (x[:, 0] - 0.7) ** 2 + x[:, 1] ** 2 + (4 * x[:, 2]) ** 2
    b = (x[:, 0] + 0.7) ** 2 + x[:, 1] ** 2 + (4 * x[:, 2] - 0.5) ** 2
    return np.exp(-a / 0.3) + np.exp(-b / 0.3)


# ---------------------------------------------------------------------------
# 1. group algebra


def _left_invariance_err(g: StratifiedAlgebra, a: np.ndarray, x: np.ndarray) -> float:
    # d(L_a)_x X_i(x) == X_i(a x).  L_a is a polynomial of degree <= 2 in x on
    # groups of step <= 3, so a unit central difference gives its differential exactly.
    if g.step > 3:
        raise ValueError("left-invariance check supports step <= 3")
    frame_x = g.frame(x)
    frame_ax = g.frame(g.product(a, x))
    err = 0.0
    for i in range(g.n):
        v = frame_x[:, i, :]
        pushed = 0.5 * (g.product(a, x + v) - g.product(a, x - v))
        err = max(err, float(np.max(np.abs(pushed - frame_ax[:, i, :]))))
    return err


def check_group_algebra(ctx: CheckContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed)
    metrics, crit = {}, {}
    for name in ("h1", "h1xr"):
        g = preset(name)
        x, y, z = (rng.uniform(-2, 2, (1000, g.n)) for _ in range(3))
        lam = rng.uniform(0.1, 3.0, (1000, 1))
        assoc = np.abs(g.product(g.product(x, y), z) - g.product(x, g.product(y, z))).max()
        inv = max(np.abs(g.product(x, inverse(g, x))).max(), np.abs(g.product(inverse(g, x), x)).max())
        dx = x * lam ** g.degrees
        dy = y * lam ** g.degrees
        dil = np.abs(g.product(x, y) * lam ** g.degrees - g.product(dx, dy)).max()
        li = _left_invariance_err(g, y, x)
        m = {"associativity": float(assoc), "inversion": float(inv), "dilation": float(dil), "left_invariance": float(li)}
        metrics[name] = m
        for k, v in m.items():
            crit[f"{name}.{k}<=1e-12"] = v <= 1e-12
    return _result("c01_group_algebra", crit, metrics)


# ---------------------------------------------------------------------------
# 2. heat kernel


def check_heat_kernel(ctx: CheckContext) -> CheckResult:
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [3.0, 3.0, 5.0])
    op = assemble_sublaplacian(g, lat)
    times = [0.05, 0.1, 0.2, 0.4, 0.5]
    hs = _evolve_delta(op, times)
    inv = lat.node_index(-lat.coords())
    interior = lat.interior_mask(5)
    mass, sym, env = {}, {}, {}
    for t in times:
        h = hs[t]
        mass[f"{t:g}"] = abs(float(np.sum(h) * lat.cellvol) - 1.0)
        sym[f"{t:g}"] = float(np.max(np.abs(h[inv[interior]] - h[interior])) / h.max())
    src, dst = _dilation_pairs(g, lat, 2.0)
    scaling = {}
    for t in (0.05, 0.1):
        ref = hs[t][src] * 2.0 ** (-g.homogeneous_dimension)
        scaling[f"{t:g}"] = float(np.sum(np.abs(hs[4 * t][dst] - ref)) / np.sum(np.abs(ref)))
    for t in (0.1, 0.2, 0.4):
        up, lo = _envelope(g, lat, hs[t], t, 0.1)
        env[f"{t:g}"] = {"upper_C": up, "lower_C": lo}
    ups = [v["upper_C"] for v in env.values()]
    crit = {
        "mass<=1e-6": max(mass.values()) <= 1e-6,
        "symmetry<=1e-3": max(sym.values()) <= 1e-3,
        "scaling<=0.05": max(scaling.values()) <= 0.05,
        "envelope_finite": all(math.isfinite(v["upper_C"]) and math.isfinite(v["lower_C"]) and v["lower_C"] > 0 for v in env.values()),
        "upper_fit_within_3x": max(ups) / min(ups) <= 3.0,
    }
    metrics = {"lattice": list(lat.counts), "mass_err": mass, "symmetry_err": sym, "scaling_err": scaling, "envelope": env}
    return _result("c02_heat_kernel", crit, metrics)


# ---------------------------------------------------------------------------
# 3. entropy dissipation


def check_dissipation(ctx: CheckContext) -> CheckResult:
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [3.0, 3.0, 3.0])
    op = assemble_sublaplacian(g, lat)
    trace = heat_solve(op, discretize(lat, two_bump), 0.5, frames=51)
    rows = [r for r in fa.dissipation_check(g, trace) if 0.1 - 1e-9 <= r["t"] <= 0.4 + 1e-9]
    h1_worst = max(r["rel_mismatch"] for r in rows)
    # line: Gaussian of variance s0 + 2t
    g1 = preset("r1")
    lat1 = Lattice.symmetric([6.0], [1201])
    s0 = 0.1
    op1 = assemble_sublaplacian(g1, lat1)
    tr1 = heat_solve(op1, discretize(lat1, lambda x: np.exp(-x[:, 0] ** 2 / (2 * s0))), 0.5, frames=51)
    rows1 = [r for r in fa.dissipation_check(g1, tr1) if 0.1 - 1e-9 <= r["t"] <= 0.4 + 1e-9]
    r1_worst = max(r["rel_mismatch"] for r in rows1)
    closed = max(abs(r["fisher"] - 1.0 / (s0 + 2 * r["t"])) * (s0 + 2 * r["t"]) for r in rows1)
    crit = {"h1<=0.05": h1_worst <= 0.05, "r1<=0.02": r1_worst <= 0.02, "r1_closed_form<=0.02": closed <= 0.02}
    metrics = {"h1_worst": h1_worst, "r1_worst": r1_worst, "r1_fisher_vs_closed_form": closed, "h1_rows": rows}
    return _result("c03_dissipation", crit, metrics)


# ---------------------------------------------------------------------------
# 4. EDI


def check_edi(ctx: CheckContext) -> CheckResult:
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [2.5, 2.5, 2.0])
    op = assemble_sublaplacian(g, lat)
    trace = heat_solve(op, discretize(lat, two_bump), 0.5, frames=41)
    reps = fa.edi_verify(g, trace, WassersteinOptions(backend="linearized", uncertainty=False))
    worst = max(abs(r.edi_residual) / r.entropy_drop for r in reps)
    slope_gap = max(abs(r.slope - r.slope_via_velocity) for r in reps)
    crit = {
        "equality<=0.1_drop": all(r.equality_pass for r in reps),
        "inequality_direction": all(r.inequality_pass for r in reps),
        "slope_two_ways<=1e-12": slope_gap <= 1e-12,
    }
    metrics = {"worst_rel_residual": worst, "slope_gap": slope_gap, "intervals": [r.to_dict() for r in reps]}
    return _result("c04_edi", crit, metrics)


# ---------------------------------------------------------------------------
# 5. Fisher decomposition


def check_fisher_consistency(ctx: CheckContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 5)
    g = preset("h1")
    lat = Lattice.for_group(g, 0.25, [2.0, 2.0, 2.0])
    decomp, scaling = 0.0, 0.0
    for _ in range(10):
        c = rng.uniform(-0.5, 0.5, 3)
        w = rng.uniform(0.2, 0.6)
        mu = discretize(lat, gaussian(c, w))
        terms = layer_fisher_terms(g, mu)
        base = None
        for eps in (1.0, 0.5, 0.25):
            F = epsilon_fisher_frame(g, mu, eps)
            decomp = max(decomp, abs(F - terms[0] - eps**2 * terms[1]) / F)
            decomp = max(decomp, abs(F - epsilon_fisher(g, mu, eps)) / F)
            layer2 = (F - horizontal_fisher(g, mu)) / eps**2
            base = layer2 if base is None else base
            scaling = max(scaling, abs(layer2 - base) / base)
    crit = {"decomposition<=1e-12": decomp <= 1e-12, "eps2_scaling<=1e-12": scaling <= 1e-12}
    return _result("c05_fisher_consistency", crit, {"decomposition": decomp, "eps2_scaling": scaling})


# ---------------------------------------------------------------------------
# 6. smoothing contractions


def _random_density(rng, lat, radii):
    r = np.asarray(radii)

    def f(x):
        s = x / r
        cut = np.where(np.all(np.abs(s) < 1, axis=-1), np.prod(1 - np.minimum(s * s, 1.0), axis=-1) ** 8, 0.0)
        val = np.zeros(len(x))
        for _ in range(3):
            c = rng.uniform(-0.5, 0.5, x.shape[1]) * r
            val += rng.uniform(0.2, 1.0) * np.exp(-np.sum((x - c) ** 2, axis=-1) / rng.uniform(0.1, 0.5))
        return (val + 0.05) * cut

    return discretize(lat, f)


def jensen_gap(group, lat, rho, u, kernel) -> float:
    """``sum |u|^2 rho - sum |k*(rho u)|^2 / (k*rho)`` (both times cellvol)."""
    rk = left_convolve(group, lat, kernel, rho)
    mom = np.stack([left_convolve(group, lat, kernel, rho * u[:, j]) for j in range(u.shape[1])], axis=-1)
    pos = rk > 0
    lhs = float(np.sum(np.sum(mom[pos] ** 2, axis=-1) / rk[pos])) * lat.cellvol
    rhs = float(np.sum(np.sum(u * u, axis=-1) * rho)) * lat.cellvol
    return rhs - lhs


def check_smoothing(ctx: CheckContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 6)
    g = preset("h1")
    lat = Lattice.for_group(g, 0.25, [2.0, 2.0, 2.0])
    x = lat.coords()
    fisher_gap, velocity_gap, jensen = math.inf, math.inf, math.inf
    kernels = {k: bump_mollifier(g, lat, k) for k in (1.5, 2.0, 3.0)}
    for i in range(100):
        mu = _random_density(rng, lat, (1.2, 1.2, 0.7))
        k = (1.5, 2.0, 3.0)[i % 3]
        eta = kernels[k]
        smooth = GridMeasure.normalized(lat, left_convolve(g, lat, eta, mu.density))
        fisher_gap = min(fisher_gap, horizontal_fisher(g, mu) - horizontal_fisher(g, smooth))
        v = fa.velocity_field(g, mu)
        velocity_gap = min(velocity_gap, jensen_gap(g, lat, mu.density, v, eta))
        # random (mu, u, sigma): nonnegative kernel with random weights on a small node box
        sigma = np.where(np.all(np.abs(x) <= [0.5, 0.5, 0.1], axis=-1), rng.uniform(0, 1, lat.size), 0.0)
        sigma /= sigma.sum() * lat.cellvol
        u = rng.normal(size=(lat.size, 2)) * (mu.density > 0)[:, None]
        jensen = min(jensen, jensen_gap(g, lat, mu.density, u, sigma))
    # time mollification of a heat trace: |theta*(rho v)|^2/theta*rho <= theta*(|v|^2 rho)
    op = assemble_sublaplacian(g, lat)
    trace = heat_solve(op, _random_density(rng, lat, (1.2, 1.2, 0.7)), 0.3, frames=31)
    vel = [fa.velocity_field(g, m) for m in trace.measures]
    dens = trace.densities()
    time_gap = math.inf
    from .lattice import _time_weights

    offs, w = _time_weights(float(trace.times[1] - trace.times[0]), 10.0)
    M = len(trace)
    for t in range(M):
        src = np.clip(t - offs, 0, M - 1)
        rho_t = np.tensordot(w, dens[src], axes=1)
        mom = np.tensordot(w, dens[src][:, :, None] * np.stack([vel[s] for s in src]), axes=1)
        pos = rho_t > 0
        lhs = float(np.sum(np.sum(mom[pos] ** 2, axis=-1) / rho_t[pos])) * lat.cellvol
        rhs = float(np.sum(w * np.array([np.sum(np.sum(vel[s] ** 2, axis=-1) * dens[s]) for s in src]))) * lat.cellvol
        time_gap = min(time_gap, rhs - lhs)
    crit = {
        "fisher_contraction>=-1e-9": fisher_gap >= -1e-9,
        "velocity_contraction>=-1e-9": velocity_gap >= -1e-9,
        "jensen>=-1e-9": jensen >= -1e-9,
        "time_velocity_contraction>=-1e-9": time_gap >= -1e-9,
    }
    metrics = {"fisher_min_gap": fisher_gap, "velocity_min_gap": velocity_gap, "jensen_min_gap": jensen, "time_min_gap": time_gap}
    return _result("c06_smoothing", crit, metrics)


# ---------------------------------------------------------------------------
# 7. transport


def vertex_enumeration(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> float:
    """Minimum cost over the vertices of the transportation polytope."""
    m, n = cost.shape
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n : (i + 1) * n] = 1
    for j in range(n):
        A[m + j, j::n] = 1
    rhs = np.concatenate([a, b])
    best = math.inf
    for cols in itertools.combinations(range(m * n), m + n - 1):
        sub = A[:, cols]
        if np.linalg.matrix_rank(sub) < m + n - 1:
            continue
        sol, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
        if np.max(np.abs(sub @ sol - rhs)) > 1e-12 or sol.min() < -1e-12:
            continue
        best = min(best, float(cost.ravel()[list(cols)] @ sol))
    return best


def check_transport(ctx: CheckContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 7)
    exact_err, bracket_ok = 0.0, True
    for k in range(25):
        m = n = 3 if k % 2 == 0 else 4
        a = rng.dirichlet(np.ones(m))
        b = rng.dirichlet(np.ones(n))
        C = rng.uniform(0, 1, (m, n))
        ref = vertex_enumeration(a, b, C)
        plan = solve_exact(a, b, C)
        exact_err = max(exact_err, abs(plan.cost - ref))
        sk = solve_sinkhorn(a, b, C, reg=0.01)
        bracket_ok &= sk.lower - 1e-12 <= ref <= sk.upper + 1e-12
    g = preset("h1")
    lat = Lattice.for_group(g, 0.25, [2.0, 2.0, 2.0])
    opts = WassersteinOptions(backend="box", max_points=256, uncertainty=False)
    sym, tri, ident = 0.0, -math.inf, 0.0
    for _ in range(5):
        ms = [discretize(lat, gaussian(rng.uniform(-0.6, 0.6, 3), rng.uniform(0.2, 0.5))) for _ in range(3)]
        W = lambda p, q: wasserstein(g, p, q, opts).value  # noqa: E731
        d01, d10, d12, d02 = W(ms[0], ms[1]), W(ms[1], ms[0]), W(ms[1], ms[2]), W(ms[0], ms[2])
        sym = max(sym, abs(d01 - d10))
        tri = max(tri, math.sqrt(d02) - math.sqrt(d01) - math.sqrt(d12))
        ident = max(ident, W(ms[0], ms[0]))
    crit = {
        "exact_vs_vertices<=1e-9": exact_err <= 1e-9,
        "sinkhorn_bracket": bracket_ok,
        "w_symmetry<=1e-9": sym <= 1e-9,
        "w_triangle<=1e-6": tri <= 1e-6,
        "w_identity<=1e-12": ident <= 1e-12,
    }
    metrics = {"exact_err": exact_err, "symmetry": sym, "triangle_excess": tri, "identity": ident}
    return _result("c07_transport", crit, metrics)


# ---------------------------------------------------------------------------
# 8. JKO vs heat


TAUS = (0.05, 0.025, 0.0125)


def jko_errors_line(taus=TAUS, T=0.25, s0=0.1):
    g = preset("r1")
    lat = Lattice.symmetric([5.0], [641])
    mu0 = discretize(lat, lambda x: np.exp(-x[:, 0] ** 2 / (2 * s0)))
    q0 = fa.QuantileState.from_measure(mu0)
    s = (np.arange(4000) + 0.5) / 4000
    ref = fa.heat_quantile_reference(q0, T, s)
    errs = []
    for tau in taus:
        _, infos, st = fa.jko_run(g, mu0, T, fa.JKOConfig(tau=tau, method="quantile"))
        errs.append(math.sqrt(float(np.mean((st.quantile(s) - ref) ** 2))))
    return errs


def jko_errors_heisenberg(taus=TAUS, T=0.25):
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [2.5, 2.5, 2.0])
    mu0 = discretize(lat, lambda x: np.exp(-(x[:, 0] ** 2 + x[:, 1] ** 2 + (3 * x[:, 2]) ** 2) / 0.3))
    op = assemble_sublaplacian(g, lat)
    ref = GridMeasure.normalized(lat, semigroup_apply(op, mu0.density, T))
    errs, telescoping = [], True
    for tau in taus:
        tr, infos, mu = fa.jko_run(g, mu0, T, fa.JKOConfig(tau=tau, method="linearized"))
        ents = [entropy(m) for m in tr.measures]
        telescoping &= all(infos[k].objective <= ents[k] + 1e-10 for k in range(len(infos)))
        telescoping &= all(i.converged for i in infos)
        errs.append(math.sqrt(linearized_w2(g, mu, ref)))
    return errs, telescoping


def check_jko(ctx: CheckContext) -> CheckResult:
    e1 = jko_errors_line()
    eh, tele = jko_errors_heisenberg()
    r1 = [e1[i + 1] / e1[i] for i in range(len(e1) - 1)]
    rh = [eh[i + 1] / eh[i] for i in range(len(eh) - 1)]
    crit = {"r1_ratios<=0.7": max(r1) <= 0.7, "h1_ratios<=0.75": max(rh) <= 0.75, "h1_telescoping": tele}
    metrics = {"taus": list(TAUS), "r1_errors": e1, "r1_ratios": r1, "h1_errors": eh, "h1_ratios": rh}
    return _result("c08_jko", crit, metrics)


# ---------------------------------------------------------------------------
# 9. non-CD probe

K_GRID = (-10.0, -1.0, 0.0, 1.0, 10.0)


def check_noncd(ctx: CheckContext) -> CheckResult:
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [4.0, 4.0, 3.0])
    tab = probe_table(assemble_sublaplacian(g, lat), geometric_times(), probe_bank(g, [2.5, 2.5, 2.0]))
    headline = {K: be_violation_search(tab, K)[0] for K in K_GRID}
    lam = lambda_estimate(tab)
    small = [0.02, 0.04]
    bank = probe_bank(g, [1.5, 1.5, 1.0])
    coarse = probe_table(assemble_sublaplacian(g, Lattice.for_group(g, 0.125, [2.0, 2.0, 1.25])), small, bank, include_score=False)
    fine = probe_table(assemble_sublaplacian(g, Lattice.for_group(g, 0.0625, [2.0, 2.0, 1.25])), small, bank, include_score=False)
    persistence = {}
    for K in K_GRID:
        w = be_violation_search(coarse, K)[0]
        persistence[f"{K:g}"] = None if w is None else refinement_check(w, fine)
    g2 = preset("r2")
    lat2 = Lattice.for_group(g2, 0.125, [6.0, 6.0])
    tab2 = probe_table(assemble_sublaplacian(g2, lat2), geometric_times(), probe_bank(g2, [2.5, 2.5]))
    flat = be_violation_search(tab2, 0.0)[0]
    lam2 = lambda_estimate(tab2)
    min_var = min(lam["min_variance"], lam2["min_variance"])
    lh = lam["lambda_hat"]
    crit = {
        "h1_witness_every_K": all(w is not None for w in headline.values()),
        "h1_witness_persists": all(p is not None and p["persists"] for p in persistence.values()),
        "r2_no_witness_K0": flat is None,
        "h1_lambda_in_[1,2]_15pct": lh is not None and 0.85 <= lh <= 2.3,
        "variance>=-1e-9": min_var >= -1e-9,
    }
    metrics = {
        "witnesses": {f"{K:g}": None if w is None else w.to_dict() for K, w in headline.items()},
        "persistence": persistence,
        "h1_lambda": lam,
        "r2_lambda": lam2,
    }
    return _result("c09_noncd", crit, metrics)


# ---------------------------------------------------------------------------
# 10. HWI


def check_hwi(ctx: CheckContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 10)
    g = preset("h1")
    lat = Lattice.for_group(g, 0.25, [2.0, 2.0, 2.0])
    eps = 0.5
    K = ricci_constant(g)
    dist = RiemannianEpsDistance(g, Lattice(lat.lower, lat.upper, (17, 17, 33)), eps)
    margins = []
    for _ in range(50):
        mu = discretize(lat, gaussian(rng.uniform(-0.6, 0.6, 3), rng.uniform(0.2, 0.5)))
        nu = discretize(lat, gaussian(rng.uniform(-0.6, 0.6, 3), rng.uniform(0.2, 0.5)))
        margins.append(fa.hwi_check(g, mu, nu, eps, K, distance=dist, max_points=256).margin)
    same = fa.hwi_check(g, mu, mu, eps, K, distance=dist).margin
    crit = {"all_pairs_margin>=0": min(margins) >= 0, "self_margin==0": same == 0.0}
    return _result("c10_hwi", crit, {"K": K, "eps": eps, "min_margin": min(margins), "self_margin": same, "margins": margins})


# ---------------------------------------------------------------------------
# 11. first variation


def check_first_variation(ctx: CheckContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 11)
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [2.0, 2.0, 1.5])
    x = lat.coords()
    dens = lambda y: np.exp(-(y[:, 0] ** 2 + y[:, 1] ** 2 + 4 * y[:, 2] ** 2) / 0.4)  # noqa: E731
    Z = float(np.sum(dens(x)) * lat.cellvol)
    mu = GridMeasure.normalized(lat, dens(x))
    worst = 0.0
    R = np.array([1.6, 1.6, 1.2])
    for _ in range(20):
        coef = rng.normal(size=(2, 4))

        def vector_field(y, coef=coef):
            s = y / R
            cut = np.where(np.all(np.abs(s) < 1, axis=-1), np.prod(1 - np.minimum(s * s, 1.0), axis=-1) ** 3, 0.0)
            basis = np.stack([np.ones(len(y)), y[:, 0], y[:, 1], y[:, 2]], axis=-1)
            return (basis @ coef.T) * cut[:, None]

        analytic = entropy_first_variation(g, mu, vector_field)
        # pushforward oracle: rho_s(y) = rho(T^{-1} y) / det DT(T^{-1} y) with T = id + sV
        def ent_push(s):
            z = x.copy()
            for _ in range(50):
                z_new = x - s * _coordinate_field(g, vector_field, z)
                done = np.max(np.abs(z_new - z)) <= 1e-15
                z = z_new
                if done:
                    break
            jac = np.zeros((len(x), g.n, g.n))
            step = 1e-6
            for k in range(g.n):
                e = np.zeros(g.n)
                e[k] = step
                jac[:, :, k] = (_coordinate_field(g, vector_field, z + e) - _coordinate_field(g, vector_field, z - e)) / (2 * step)
            det = np.linalg.det(np.eye(g.n)[None] + s * jac)
            r = dens(z) / det / Z
            pos = r > 0
            return float(np.sum(r[pos] * np.log(r[pos])) * lat.cellvol)

        s = 1e-3
        fd = (ent_push(s) - ent_push(-s)) / (2 * s)
        worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-12))
    return _result("c11_first_variation", {"relative<=1e-3": worst <= 1e-3}, {"worst_relative": worst})


CHECKS: dict[str, Callable[[CheckContext], CheckResult]] = {
    "c01_group_algebra": check_group_algebra,
    "c02_heat_kernel": check_heat_kernel,
    "c03_dissipation": check_dissipation,
    "c04_edi": check_edi,
    "c05_fisher_consistency": check_fisher_consistency,
    "c06_smoothing": check_smoothing,
    "c07_transport": check_transport,
    "c08_jko": check_jko,
    "c09_noncd": check_noncd,
    "c10_hwi": check_hwi,
    "c11_first_variation": check_first_variation,
}


def run_check(name: str, ctx: CheckContext | None = None) -> CheckResult:
    ctx = ctx or CheckContext()
    if name not in CHECKS:
        raise KeyError(f"unknown check {name!r}; known: {', '.join(CHECKS)}")
    t0 = time.perf_counter()
    res = CHECKS[name](ctx)
    res.seconds = time.perf_counter() - t0
    return res
