"""Gradient-flow diagnostics of the heat flow: continuity equation, dissipation,
energy-dissipation inequality, minimizing movements and the HWI inequality.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg
from scipy.special import erf

from .functionals import (
    entropy,
    epsilon_fisher,
    horizontal_fisher,
    horizontal_gradient,
    positivity_threshold,
)
from .group_core import RiemannianEpsDistance, StratifiedAlgebra, ricci_constant
from .lattice import FlowTrace, GridMeasure, Lattice, atomic_write_text, left_convolve
from .transport import (
    WassersteinOptions,
    _edge_incidence,
    cost_matrix,
    metric_derivative,
    solve_exact,
    block_partition,
    wasserstein,
)

__all__ = [
    "FlowError",
    "velocity_field",
    "SmoothTest",
    "test_bank",
    "continuity_residual",
    "dissipation_check",
    "EDIReport",
    "dyadic_intervals",
    "edi_verify",
    "JKOConfig",
    "JKOStepInfo",
    "jko_step",
    "jko_run",
    "QuantileState",
    "heat_quantile_reference",
    "HWIReport",
    "distance_lattice",
    "hwi_check",
    "mollified_velocity",
    "velocity_norm",
    "write_report",
]


class FlowError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# velocity and continuity equation


def velocity_field(group: StratifiedAlgebra, mu: GridMeasure) -> np.ndarray:
    """``v = -grad_G rho / rho`` in frame coordinates, zero where ``rho <= tau``."""
    rho = mu.density
    grad = horizontal_gradient(group, mu.lattice, rho)
    pos = rho > positivity_threshold(rho)
    v = np.zeros_like(grad)
    v[pos] = -grad[pos] / rho[pos, None]
    return v


def velocity_norm(group: StratifiedAlgebra, mu: GridMeasure, v: np.ndarray) -> float:
    """``int |v|^2 d mu`` on the Fisher quadrature mask."""
    from .functionals import _fisher_mask

    mask = _fisher_mask(group, mu.lattice, mu.density, None)
    return float(np.sum(np.sum(v[mask] ** 2, axis=-1) * mu.density[mask]) * mu.lattice.cellvol)


@dataclass(frozen=True)
class SmoothTest:
    """``phi(t, x) = chi(t) p(x) B(x)`` with ``p`` a monomial and ``B`` a box bump.

    ``B(x) = prod (1 - ((x_k - c_k) / r_k)^2)^4`` inside the box
    ``|x_k - c_k| < r_k``; ``chi`` is the same profile in time on ``[t0, t1]``.
    """

    exponents: tuple[int, ...]
    centre: tuple[float, ...]
    radii: tuple[float, ...]
    t0: float
    t1: float

    def _bump(self, x):
        c = np.asarray(self.centre)
        r = np.asarray(self.radii)
        s = (x - c) / r
        inside = np.all(np.abs(s) < 1, axis=-1)
        q = np.where(np.abs(s) < 1, 1 - s * s, 0.0)
        B = np.prod(q**4, axis=-1)
        # d/dx_k of prod q^4 = 4 q_k^3 (-2 s_k / r_k) prod_{l != k} q_l^4
        dB = np.zeros_like(x)
        for k in range(x.shape[-1]):
            others = np.prod(np.delete(q, k, axis=-1) ** 4, axis=-1)
            dB[..., k] = 4 * q[..., k] ** 3 * (-2 * s[..., k] / r[k]) * others
        return np.where(inside, B, 0.0), np.where(inside[..., None], dB, 0.0)

    def _poly(self, x):
        e = np.asarray(self.exponents)
        p = np.prod(x**e, axis=-1)
        dp = np.zeros_like(x)
        for k in range(x.shape[-1]):
            if e[k] == 0:
                continue
            ek = e.copy()
            ek[k] -= 1
            dp[..., k] = e[k] * np.prod(x**ek, axis=-1)
        return p, dp

    def _chi(self, t):
        c = 0.5 * (self.t0 + self.t1)
        w = 0.5 * (self.t1 - self.t0)
        s = (t - c) / w
        if abs(s) >= 1:
            return 0.0, 0.0
        return (1 - s * s) ** 4, 4 * (1 - s * s) ** 3 * (-2 * s / w)

    def space(self, x):
        """Spatial factor and its coordinate gradient."""
        B, dB = self._bump(x)
        p, dp = self._poly(x)
        return p * B, dp * B[..., None] + p[..., None] * dB

    def time(self, t):
        return self._chi(float(t))


def test_bank(lattice: Lattice, t0: float, t1: float, count: int = 12, fill: float = 0.7) -> list[SmoothTest]:
    """Deterministic bank of ``count`` tests: monomials of increasing degree times a bump.

    The bump is centred at the origin with radii ``fill`` times the box
    half-widths, so every test is compactly supported inside the box.
    """
    n = lattice.ndim
    half = 0.5 * (np.asarray(lattice.upper) - np.asarray(lattice.lower))
    centre = tuple(0.5 * (np.asarray(lattice.upper) + np.asarray(lattice.lower)))
    radii = tuple(fill * half)
    exps: list[tuple[int, ...]] = []
    deg = 0
    while len(exps) < count:
        level = sorted(
            {tuple(int(v) for v in np.bincount(c, minlength=n)) for c in _combinations(n, deg)},
            reverse=True,
        )
        exps.extend(level)
        deg += 1
    return [SmoothTest(e, centre, radii, t0, t1) for e in exps[:count]]


def _combinations(n, deg):
    import itertools

    return (np.array(c, dtype=int) for c in itertools.combinations_with_replacement(range(n), deg))


def continuity_residual(
    group: StratifiedAlgebra,
    trace: FlowTrace,
    velocities: Sequence[np.ndarray],
    tests: Sequence[SmoothTest],
) -> list[dict]:
    """Weak-form residuals ``|int int (d_t phi + <v, grad_G phi>) d mu_t dt|``.

    Trapezoid rule in time, nodal quadrature in space.  Each entry also
    carries ``scale = int int (|d_t phi| + |<v, grad_G phi>|) d mu_t dt`` so
    residuals can be read relative to the size of the terms.
    """
    lat = trace.lattice
    x = lat.coords()
    frame = group.frame(x)[:, : group.m1, :]
    if len(velocities) != len(trace):
        raise FlowError("one velocity field per frame required")
    out = []
    w = np.zeros(len(trace))
    dt = np.diff(trace.times)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    for test in tests:
        if test.t0 < trace.times[0] - 1e-12 or test.t1 > trace.times[-1] + 1e-12:
            raise FlowError("test function leaves the time window of the trace")
        phi, dphi = test.space(x)
        boundary = np.abs(phi[lat.boundary_mask]).max(initial=0.0)
        if boundary > 0:
            raise FlowError("test function touches the box boundary")
        hgrad = np.einsum("njk,nk->nj", frame, dphi)
        total = 0.0
        scale = 0.0
        for k, (mu, v) in enumerate(zip(trace.measures, velocities)):
            chi, dchi = test.time(trace.times[k])
            if chi == 0 and dchi == 0:
                continue
            a = dchi * phi
            b = chi * np.sum(v * hgrad, axis=-1)
            total += w[k] * float(np.sum((a + b) * mu.density)) * lat.cellvol
            scale += w[k] * float(np.sum((np.abs(a) + np.abs(b)) * mu.density)) * lat.cellvol
        out.append({"exponents": list(test.exponents), "residual": abs(total), "scale": scale})
    return out


# ---------------------------------------------------------------------------
# dissipation and EDI


def dissipation_check(group: StratifiedAlgebra, trace: FlowTrace) -> list[dict]:
    """Central-difference ``dEnt/dt`` against ``-F_G`` at interior frames."""
    if len(trace) < 5:
        raise FlowError("dissipation check needs at least 5 frames")
    dts = np.diff(trace.times)
    if np.max(np.abs(dts - dts.mean())) > 1e-9 * max(1.0, dts.mean()):
        raise FlowError("dissipation check needs a uniform time grid")
    ent = np.array([entropy(m) for m in trace.measures])
    fis = np.array([horizontal_fisher(group, m) for m in trace.measures])
    out = []
    for k in range(1, len(trace) - 1):
        d = (ent[k + 1] - ent[k - 1]) / (trace.times[k + 1] - trace.times[k - 1])
        denom = abs(d)
        rel = abs(d + fis[k]) / denom if denom > 0 else (0.0 if fis[k] == 0 else math.inf)
        out.append({"t": float(trace.times[k]), "dEnt_dt": float(d), "fisher": float(fis[k]), "rel_mismatch": float(rel)})
    return out


@dataclass
class EDIReport:
    s: float
    t: float
    ent_s: float
    ent_t: float
    action: float
    slope: float
    edi_residual: float
    equality_residual: float
    entropy_drop: float
    slope_via_velocity: float
    tolerance: float = 0.0
    inequality_pass: bool = True
    equality_pass: bool = True
    note: str = "slope term uses sqrt(F_G) as the descending slope"

    def to_dict(self) -> dict:
        return asdict(self)


def dyadic_intervals(a: float, b: float, levels: int) -> list[tuple[float, float]]:
    out = []
    for lev in range(levels + 1):
        n = 2**lev
        edges = np.linspace(a, b, n + 1)
        out.extend(zip(edges[:-1].tolist(), edges[1:].tolist()))
    return out


def _trapezoid(y, x):
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def edi_verify(
    group: StratifiedAlgebra,
    trace: FlowTrace,
    ot_opts: WassersteinOptions | None = None,
    window: tuple[float, float] = (0.1, 0.4),
    levels: int = 2,
    rel_tol: float = 0.10,
) -> list[EDIReport]:
    """EDI terms on every dyadic subinterval of ``window``.

    ``action = 1/2 int |mu'|^2`` uses central-difference metric derivatives,
    ``slope = 1/2 int F_G``, both by the trapezoid rule on the trace grid.
    ``edi_residual = Ent_t + action + slope - Ent_s`` (the inequality asks
    ``<= 0``); ``equality_residual`` is its negative.  Both pass when within
    ``rel_tol`` times the entropy drop (inequality one-sided).
    """
    times = trace.times
    mask = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
    idx = np.flatnonzero(mask)
    if idx.size < 3 or idx[0] == 0 or idx[-1] == len(trace) - 1:
        raise FlowError("trace must extend beyond the EDI window by at least one frame on each side")
    ent = {int(k): entropy(trace.measures[k]) for k in idx}
    fis = {int(k): horizontal_fisher(group, trace.measures[k]) for k in idx}
    vel = {int(k): velocity_norm(group, trace.measures[k], velocity_field(group, trace.measures[k])) for k in idx}
    md = {}
    for k in idx:
        md[int(k)] = metric_derivative(group, trace, int(k), ot_opts)
    reports = []
    for s, t in dyadic_intervals(window[0], window[1], levels):
        for edge in (s, t):
            if np.min(np.abs(times - edge)) > 1e-9 * max(1.0, abs(edge)):
                raise FlowError(f"interval edge {edge:g} is not a frame time")
        sel = [int(k) for k in idx if s - 1e-9 <= times[k] <= t + 1e-9]
        ts = times[sel]
        action = 0.5 * _trapezoid([md[k] ** 2 for k in sel], ts)
        slope = 0.5 * _trapezoid([fis[k] for k in sel], ts)
        slope_v = 0.5 * _trapezoid([vel[k] for k in sel], ts)
        es, et = ent[sel[0]], ent[sel[-1]]
        resid = et + action + slope - es
        drop = es - et
        tol = rel_tol * abs(drop)
        reports.append(
            EDIReport(
                s=float(ts[0]), t=float(ts[-1]), ent_s=es, ent_t=et, action=action, slope=slope,
                edi_residual=resid, equality_residual=-resid, entropy_drop=drop, slope_via_velocity=slope_v,
                tolerance=tol, inequality_pass=bool(resid <= tol), equality_pass=bool(abs(resid) <= tol),
            )
        )
    return reports


# ---------------------------------------------------------------------------
# minimizing movements


@dataclass
class JKOConfig:
    """Minimizing-movement options.

    ``method``:
      - ``"entropic"``: proximal Sinkhorn iterations on compressed supports,
        regularization ``reg_factor * tau * median cost``;
      - ``"linearized"``: the transport cost replaced by its quadratic form
        at the current iterate (weighted ``H^{-1}``), solved by Newton on the
        concave dual; needs a translation-closed lattice;
      - ``"quantile"``: exact one-dimensional Lagrangian step on quantiles.
    """

    tau: float
    method: str = "entropic"
    max_inner: int = 200
    tol: float = 1e-8
    reg_factor: float = 0.1
    max_points: int = 512

    def __post_init__(self):
        if not self.tau > 0:
            raise FlowError("tau must be positive")
        if self.method not in ("entropic", "linearized", "quantile"):
            raise FlowError(f"unknown JKO method {self.method!r}")


@dataclass
class JKOStepInfo:
    objective: float
    entropy: float
    transport: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)


def _jko_linearized(group, mu: GridMeasure, cfg: JKOConfig):
    """Maximize ``D(phi) = -sum e^{phi-1} + <phi, rho_k> - tau/2 phi^T A phi`` (volume-weighted).

    The maximizer gives ``rho_{k+1} = e^{phi-1}`` with ``rho_{k+1} - rho_k = -tau A phi``.
    """
    lat = mu.lattice
    rho0 = mu.density
    head, tail, inv_h2 = _edge_incidence(group, lat)
    w = 0.5 * (rho0[head] + rho0[tail]) * inv_h2
    n = lat.size
    A = sparse.coo_matrix(
        (np.concatenate([w, w, -w, -w]), (np.concatenate([head, tail, head, tail]), np.concatenate([head, tail, tail, head]))),
        shape=(n, n),
    ).tocsr()
    floor = 1e-300
    phi = np.log(np.maximum(rho0, 1e-30)) + 1.0
    tau = cfg.tau

    def dual(p):
        return float(-np.sum(np.exp(p - 1)) + p @ rho0 - 0.5 * tau * p @ (A @ p))

    history = [dual(phi)]
    converged = False
    it = 0
    for it in range(1, cfg.max_inner + 1):
        e = np.exp(phi - 1)
        grad = -e + rho0 - tau * (A @ phi)
        gnorm = float(np.sqrt(np.sum(grad * grad) * lat.cellvol))
        if gnorm <= cfg.tol:
            converged = True
            break
        H = (sparse.diags(e + floor) + tau * A).tocsr()
        M = sparse.diags(1.0 / (e + floor + tau * A.diagonal()))
        step, info = cg(H, grad, rtol=1e-12, atol=0.0, maxiter=5000, M=M)
        lam = 1.0
        base = history[-1]
        slope = float(grad @ step)
        while lam > 1e-12:
            cand = phi + lam * step
            val = dual(cand)
            if val >= base + 1e-4 * lam * slope:
                break
            lam *= 0.5
        phi = phi + lam * step
        history.append(dual(phi))
    rho = np.exp(phi - 1)
    out = GridMeasure.normalized(lat, rho)
    diff = out.density - rho0
    # transport cost of the step: tau^2 phi^T A phi = (rho_k - rho) A^+ (rho_k - rho)
    transport = float(tau * tau * phi @ (A @ phi) * lat.cellvol)
    ent = entropy(out)
    del diff
    return out, JKOStepInfo(ent + transport / (2 * tau), ent, transport, it, converged, history)


def _kl_prox(z, sigma, vol):
    # argmin_q sigma sum q log(q / vol) + KL(q | z)
    return np.exp((np.log(np.maximum(z, 1e-300)) + sigma * (np.log(vol) - 1.0)) / (1 + sigma))


def _discrete_entropy(q, vol):
    pos = q > 0
    return float(np.sum(q[pos] * np.log(q[pos] / vol[pos])))


def _jko_entropic(group, mu: GridMeasure, cfg: JKOConfig):
    """Entropic proximal step on a block partition of the whole box.

    Source and candidate share the blocks; the candidate has block mass
    ``q_b`` spread uniformly over the nodes of block ``b``.  The iteration
    alternates a Sinkhorn scaling against the input block masses with the
    closed-form KL proximal map of the entropy for the free marginal.  The
    recorded objective is ``(<C, P> + eps sum P log P) / (2 tau) + Ent(q)`` at
    the row-feasible plan after each scaling.
    """
    lat = mu.lattice
    inv, _ = block_partition(group, lat, np.ones(lat.size, dtype=bool), cfg.max_points)
    nb = int(inv.max()) + 1
    count = np.bincount(inv, minlength=nb).astype(float)
    x = lat.coords()
    centres = np.stack([np.bincount(inv, weights=x[:, k], minlength=nb) / count for k in range(lat.ndim)], axis=-1)
    vol = count * lat.cellvol
    p = np.bincount(inv, weights=mu.density * lat.cellvol, minlength=nb)
    p = p / p.sum()
    C = cost_matrix(group, "box", centres, centres)
    eps = cfg.reg_factor * cfg.tau * float(np.median(C))
    logK = -C / eps
    sigma = 2 * cfg.tau / eps
    rows = p > 0
    logb = np.zeros(nb)
    history: list[float] = []
    best = (math.inf, None)
    converged = False
    it = 0
    from scipy.special import logsumexp

    for it in range(1, cfg.max_inner + 1):
        loga = np.full(nb, -np.inf)
        loga[rows] = np.log(p[rows]) - logsumexp(logK[rows] + logb[None, :], axis=1)
        logP = loga[rows, None] + logK[rows] + logb[None, :]
        P = np.exp(logP)
        q = P.sum(0)
        pos = P > 0
        obj = (float(np.sum(P * C)) + eps * float(np.sum(P[pos] * logP[pos]))) / (2 * cfg.tau) + _discrete_entropy(q, vol)
        history.append(obj)
        if obj < best[0]:
            best = (obj, q)
        if len(history) > 1 and abs(history[-2] - obj) <= cfg.tol * max(1.0, abs(obj)):
            converged = True
            break
        logz = logsumexp(loga[rows, None] + logK[rows], axis=0)
        logq = np.log(_kl_prox(np.exp(logz), sigma, vol))
        logb = logq - logz
    q = best[1]
    out = GridMeasure.normalized(lat, (q / vol)[inv])
    keep = q > 1e-14
    plan = solve_exact(p[rows] / p[rows].sum(), q[keep] / q[keep].sum(), C[np.ix_(rows, keep)])
    ent_val = entropy(out)
    monotone = bool(np.all(np.diff(history) <= 1e-12 * np.maximum(1.0, np.abs(history[1:]))))
    info = JKOStepInfo(ent_val + plan.cost / (2 * cfg.tau), ent_val, plan.cost, it, converged and monotone, history)
    return out, info


@dataclass
class QuantileState:
    """One-dimensional measure with mass ``dm[k]`` uniform on ``[x[k], x[k+1]]``."""

    x: np.ndarray
    dm: np.ndarray

    @classmethod
    def from_measure(cls, mu: GridMeasure) -> "QuantileState":
        if mu.lattice.ndim != 1:
            raise FlowError("quantile method needs a one-dimensional lattice")
        h = float(mu.lattice.spacing[0])
        nodes = mu.lattice.axes()[0]
        mass = mu.density * h
        keep = mass > 1e-300
        lo = nodes[keep] - h / 2
        edges = np.append(lo, nodes[keep][-1] + h / 2)
        if not np.all(np.diff(np.flatnonzero(keep)) == 1):
            raise FlowError("quantile method needs a connected support")
        dm = mass[keep] / mass[keep].sum()
        return cls(edges, dm)

    def entropy(self) -> float:
        return float(np.sum(self.dm * np.log(self.dm / np.diff(self.x))))

    def w2(self, other: "QuantileState") -> float:
        if self.dm.shape != other.dm.shape:
            raise FlowError("quantile states need the same mass partition")
        d = self.x - other.x
        return float(np.sum(self.dm * (d[:-1] ** 2 + d[:-1] * d[1:] + d[1:] ** 2) / 3.0))

    def quantile(self, s: np.ndarray) -> np.ndarray:
        cum = np.concatenate([[0.0], np.cumsum(self.dm)])
        cum /= cum[-1]
        return np.interp(s, cum, self.x)

    def to_measure(self, lat: Lattice) -> GridMeasure:
        """Histogram onto the lattice cells (exact cell overlap)."""
        h = float(lat.spacing[0])
        nodes = lat.axes()[0]
        lo, hi = nodes - h / 2, nodes + h / 2
        cum = np.concatenate([[0.0], np.cumsum(self.dm)])
        F = lambda y: np.interp(y, self.x, cum)  # noqa: E731
        mass = F(hi) - F(lo)
        mass[0] += F(lo[0])
        mass[-1] += cum[-1] - F(hi[-1])
        return GridMeasure.normalized(lat, np.maximum(mass, 0.0) / h)


def _jko_quantile(state: QuantileState, tau: float, tol: float = 1e-12, max_iter: int = 100):
    """Exact minimizer of ``Ent(X) + W^2(X, Y)/(2 tau)`` over edge positions ``X``.

    The objective is strictly convex in ``X`` with a tridiagonal Hessian.
    """
    from scipy.linalg import solve_banded

    Y = state.x
    dm = state.dm
    X = Y.copy()
    n = X.size
    # quadratic form of W^2: sum dm_k (d_k^2 + d_k d_{k+1} + d_{k+1}^2)/3
    diag_q = np.zeros(n)
    diag_q[:-1] += 2 * dm / 3
    diag_q[1:] += 2 * dm / 3
    off_q = dm / 3

    def objective(X):
        gaps = np.diff(X)
        if np.any(gaps <= 0):
            return math.inf
        d = X - Y
        return float(np.sum(dm * np.log(dm / gaps)) + np.sum(dm * (d[:-1] ** 2 + d[:-1] * d[1:] + d[1:] ** 2) / 3.0) / (2 * tau))

    val = objective(X)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        gaps = np.diff(X)
        d = X - Y
        gq = diag_q * d
        gq[:-1] += off_q * d[1:]
        gq[1:] += off_q * d[:-1]
        ge = np.zeros(n)
        ge[:-1] += dm / gaps
        ge[1:] -= dm / gaps
        grad = ge + gq / (2 * tau)
        he = dm / gaps**2
        diag = diag_q / (2 * tau)
        diag[:-1] += he
        diag[1:] += he
        off = off_q / (2 * tau) - he
        ab = np.zeros((3, n))
        ab[0, 1:] = off
        ab[1] = diag
        ab[2, :-1] = off
        step = -solve_banded((1, 1), ab, grad)
        # Newton decrement; robust where negligible tail masses leave edges loosely determined
        if -0.5 * float(grad @ step) <= tol * max(1.0, abs(val)):
            converged = True
            break
        lam = 1.0
        while True:
            cand = X + lam * step
            cv = objective(cand)
            if cv <= val + 1e-4 * lam * float(grad @ step) or lam < 1e-14:
                break
            lam *= 0.5
        X = cand
        val = cv
    new = QuantileState(X, dm)
    info = JKOStepInfo(val, new.entropy(), new.w2(state), it, converged, [val])
    return new, info


def jko_step(group: StratifiedAlgebra, mu: GridMeasure, cfg: JKOConfig) -> tuple[GridMeasure, JKOStepInfo]:
    """One minimizing-movement step ``argmin Ent(nu) + W^2(nu, mu) / (2 tau)``."""
    if cfg.method == "linearized":
        return _jko_linearized(group, mu, cfg)
    if cfg.method == "entropic":
        return _jko_entropic(group, mu, cfg)
    state = QuantileState.from_measure(mu)
    new, info = _jko_quantile(state, cfg.tau, tol=cfg.tol * 1e-4)
    return new.to_measure(mu.lattice), info


def jko_run(group: StratifiedAlgebra, mu0: GridMeasure, T: float, cfg: JKOConfig) -> tuple[FlowTrace, list[JKOStepInfo], object]:
    """Chain ``T / tau`` steps; returns the trace, step info and the final native state.

    For the quantile method the native state is the final
    :class:`QuantileState` (no re-histogramming between steps).
    """
    steps = T / cfg.tau
    M = int(round(steps))
    if M < 1 or abs(steps - M) > 1e-9 * max(1.0, steps):
        raise FlowError("T must be an integer multiple of tau")
    times = [0.0]
    measures = [mu0]
    infos = []
    if cfg.method == "quantile":
        state = QuantileState.from_measure(mu0)
        for k in range(M):
            state, info = _jko_quantile(state, cfg.tau, tol=cfg.tol * 1e-4)
            infos.append(info)
            times.append((k + 1) * cfg.tau)
            measures.append(state.to_measure(mu0.lattice))
        return FlowTrace(np.array(times), measures), infos, state
    mu = mu0
    for k in range(M):
        mu, info = jko_step(group, mu, cfg)
        infos.append(info)
        times.append((k + 1) * cfg.tau)
        measures.append(mu)
    return FlowTrace(np.array(times), measures), infos, mu


def heat_quantile_reference(state: QuantileState, T: float, s: np.ndarray) -> np.ndarray:
    """Quantiles at levels ``s`` of the exact line heat flow (generator ``d^2/dx^2``) of a histogram."""
    from scipy.optimize import brentq

    x0, x1 = state.x[:-1], state.x[1:]
    dens = state.dm / (x1 - x0)
    sd = math.sqrt(2 * T)

    def G(z):
        # antiderivative of Phi((y - z)/sd) in z-direction integrated over y
        u = z / sd
        return sd * (u * 0.5 * (1 + erf(u / math.sqrt(2))) + np.exp(-u * u / 2) / math.sqrt(2 * math.pi))

    def cdf(y):
        # sum_k dens_k int_{x0}^{x1} Phi((y - a)/sd) da
        return float(np.sum(dens * (G(y - x0) - G(y - x1))))

    lo = state.x[0] - 12 * sd
    hi = state.x[-1] + 12 * sd
    return np.array([brentq(lambda y: cdf(y) - si, lo, hi, xtol=1e-14, rtol=1e-14) for si in s])


# ---------------------------------------------------------------------------
# HWI


@dataclass
class HWIReport:
    ent_mu: float
    ent_nu: float
    fisher_eps: float
    w_eps: float
    K: float
    eps: float
    margin: float
    passed: bool
    note: str = "W_eps from lattice g_eps shortest paths on compressed supports"


def distance_lattice(lat: Lattice, per_axis: int = 33) -> Lattice:
    """Coarse lattice on the same box for shortest-path distances."""
    counts = tuple(min(int(c), per_axis) for c in lat.counts)
    return Lattice(tuple(lat.lower), tuple(lat.upper), counts)


def hwi_check(
    group: StratifiedAlgebra,
    mu: GridMeasure,
    nu: GridMeasure,
    eps: float,
    K: float | None = None,
    distance: RiemannianEpsDistance | None = None,
    max_points: int = 512,
    w_eps: float | None = None,
) -> HWIReport:
    """``Ent(nu) - Ent(mu) + sqrt(F_eps(mu)) W_eps + K/(2 eps^2) W_eps^2 >= 0``."""
    if eps <= 0:
        raise FlowError("eps must be positive")
    K = ricci_constant(group) if K is None else float(K)
    e_mu, e_nu = entropy(mu), entropy(nu)
    F = epsilon_fisher(group, mu, eps)
    if w_eps is None:
        if mu is nu or (mu.lattice.same_as(nu.lattice) and np.array_equal(mu.density, nu.density)):
            w_eps = 0.0
        else:
            if group.is_commutative and mu.lattice.ndim == 1:
                opts = WassersteinOptions(backend="quantile")
            else:
                dist = distance or RiemannianEpsDistance(group, distance_lattice(mu.lattice), eps)
                opts = WassersteinOptions(backend="riemannian_eps", eps=eps, max_points=max_points, uncertainty=False, distance=dist)
            w_eps = wasserstein(group, mu, nu, opts).value
    margin = e_nu - e_mu + math.sqrt(F) * w_eps + K / (2 * eps * eps) * w_eps**2
    return HWIReport(e_mu, e_nu, F, w_eps, K, eps, margin, bool(margin >= 0))


# ---------------------------------------------------------------------------
# mollified velocities


def mollified_velocity(group: StratifiedAlgebra, mu: GridMeasure, v: np.ndarray, kernel: np.ndarray):
    """``(eta * (rho v)) / (eta * rho)`` and the mollified measure.

    Uses the left convolution, which commutes with the frame.
    """
    lat = mu.lattice
    rho_k = left_convolve(group, lat, kernel, mu.density)
    mom = np.stack([left_convolve(group, lat, kernel, mu.density * v[:, j]) for j in range(v.shape[1])], axis=-1)
    pos = rho_k > positivity_threshold(rho_k)
    vk = np.zeros_like(mom)
    vk[pos] = mom[pos] / rho_k[pos, None]
    return vk, rho_k


# ---------------------------------------------------------------------------
# reports


def write_report(path, payload: dict) -> None:
    """Atomic, key-sorted JSON; non-finite floats become ``null``."""
    clean = _finite(json.loads(json.dumps(payload, default=_json_default)))
    atomic_write_text(path, json.dumps(clean, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _finite(o):
    if isinstance(o, float):
        return o if math.isfinite(o) else None
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_finite(v) for v in o]
    return o


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(type(o))
