"""Optimal transport between nodal measures.

Backends for ``W(mu, nu)``:

``box``
    compress both supports, exact transportation with squared box-norm cost;
``sinkhorn``
    same compression, log-domain entropic solver with a certified bracket;
``riemannian_eps``
    compression, exact transportation with squared lattice shortest-path
    ``g_eps`` distances;
``quantile``
    exact ``W_2`` of cell histograms on a line (one-dimensional groups);
``linearized``
    weighted negative Sobolev norm ``||nu - mu||_{H^{-1}(rho_bar)}`` on the
    lattice translation graph, the infinitesimal form of ``W_2`` for
    nearby measures.  Used for metric derivatives on 3-d lattices where
    compression error would dominate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import cg
from scipy.special import logsumexp

from ._backend import kernels
from .group_core import RiemannianEpsDistance, StratifiedAlgebra, box_distance, box_norm
from .lattice import FlowTrace, GridMeasure, Lattice, atomic_write_text, translation_gather

__all__ = [
    "TransportError",
    "DiscreteMeasure",
    "TransportPlan",
    "SinkhornResult",
    "WassersteinOptions",
    "WassersteinResult",
    "block_partition",
    "support_compress",
    "cost_matrix",
    "solve_exact",
    "solve_sinkhorn",
    "round_plan",
    "quantile_w2",
    "linearized_w2",
    "wasserstein",
    "metric_derivative",
    "export_plan_csv",
    "MAX_EXACT_POINTS",
]

MAX_EXACT_POINTS = 4096


class TransportError(RuntimeError):
    pass


@dataclass
class DiscreteMeasure:
    """Finitely supported probability measure."""

    points: np.ndarray
    weights: np.ndarray
    block_diameter: float = 0.0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.points.shape[0] != self.weights.size:
            raise TransportError("one weight per support point required")
        if np.any(self.weights <= 0):
            raise TransportError("weights must be positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise TransportError(f"weights sum to {self.weights.sum()!r}, expected 1")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise TransportError("support points must be distinct")

    def __len__(self) -> int:
        return self.weights.size

    @classmethod
    def from_arrays(cls, points, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=float)
        return cls(points, w / w.sum())


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float
    row_residual: float
    col_residual: float
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    dual_gap: float | None = None
    certified: bool = False

    def triples(self, tol: float = 0.0):
        a, b = np.nonzero(self.plan > tol)
        return list(zip(a.tolist(), b.tolist(), self.plan[a, b].tolist()))


@dataclass
class SinkhornResult:
    plan: TransportPlan
    lower: float
    upper: float
    entropic_bracket: tuple[float, float]
    iterations: int
    converged: bool
    f: np.ndarray = field(repr=False, default=None)
    g: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# compression


def _fix_sum(w: np.ndarray) -> np.ndarray:
    w = w / w.sum()
    # push the rounding residue into the largest weight
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def block_partition(group: StratifiedAlgebra, lat, charged: np.ndarray, max_points: int):
    """Index-box partition of the ``charged`` nodes into at most ``max_points`` blocks.

    The axis whose block is smallest in homogeneous scale ``(b_i h_i)^{1/d(i)}``
    is doubled until the charged blocks fit.  Returns ``(inverse, block)``
    with ``inverse`` the block label of every charged node.
    """
    if max_points < 8:
        raise TransportError("max_points must be at least 8")
    deg = group.degrees.astype(float)
    block = np.ones(lat.ndim, dtype=int)
    idx = np.indices(lat.shape).reshape(lat.ndim, -1).T
    while True:
        keys = idx[charged] // block
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        if inv.max(initial=-1) + 1 <= max_points:
            break
        scale = (block * lat.spacing) ** (1.0 / deg)
        can = block < np.asarray(lat.counts)
        if not can.any():
            raise TransportError("cannot compress further")
        scale = np.where(can, scale, np.inf)
        block[int(np.argmin(scale))] *= 2
    return inv.reshape(-1), block


def support_compress(group: StratifiedAlgebra, mu: GridMeasure, max_points: int = 512) -> DiscreteMeasure:
    """Aggregate nodal masses into at most ``max_points`` block barycenters.

    Blocks come from :func:`block_partition`.  Barycenters are mass-weighted
    means of exponential coordinates; total mass is exactly one.
    """
    lat = mu.lattice
    flat_mass = mu.density * lat.cellvol
    charged = flat_mass > 0
    inv, block = block_partition(group, lat, charged, max_points)
    x = lat.coords()
    m = flat_mass[charged]
    w = np.bincount(inv, weights=m)
    pts = np.stack([np.bincount(inv, weights=m * x[charged, k]) / w for k in range(lat.ndim)], axis=-1)
    diam = float(box_norm(group, None, (block - 1) * lat.spacing))
    return DiscreteMeasure(pts, _fix_sum(w), block_diameter=diam)


# ---------------------------------------------------------------------------
# costs and solvers


def cost_matrix(group: StratifiedAlgebra, backend, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared distances ``d(a_i, b_j)^2`` for ``backend`` in ``{"box", RiemannianEpsDistance}``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if isinstance(backend, RiemannianEpsDistance):
        d = backend.pairwise(A, B)
    elif backend in ("box", "euclidean"):
        d = box_distance(group, None, A[:, None, :], B[None, :, :])
    else:
        raise TransportError(f"unknown cost backend {backend!r}")
    return d * d


def solve_exact(a: DiscreteMeasure | np.ndarray, b: DiscreteMeasure | np.ndarray, cost: np.ndarray) -> TransportPlan:
    """Exact plan by successive shortest paths with a dual certificate.

    ``certified`` is true when the potentials are feasible
    (``u_i + v_j <= c_ij``), complementary on the support, and close the
    duality gap.
    """
    wa = a.weights if isinstance(a, DiscreteMeasure) else np.asarray(a, dtype=float)
    wb = b.weights if isinstance(b, DiscreteMeasure) else np.asarray(b, dtype=float)
    cost = np.ascontiguousarray(cost, dtype=float)
    if cost.shape != (wa.size, wb.size):
        raise TransportError("cost matrix shape does not match the supports")
    if max(wa.size, wb.size) > MAX_EXACT_POINTS:
        raise TransportError(f"exact solver supports at most {MAX_EXACT_POINTS} points per side")
    plan, u, v = kernels.transport_ssp(cost, wa, wb)
    plan = np.asarray(plan)
    u = np.asarray(u)
    v = np.asarray(v)
    primal = float(np.sum(plan * cost))
    dual = float(wa @ u + wb @ v)
    scale = max(1.0, float(np.max(np.abs(cost))))
    slack = cost - u[:, None] - v[None, :]
    feasible = float(slack.min()) >= -1e-9 * scale
    complementary = float(np.max(np.abs(slack[plan > 0]))) <= 1e-9 * scale if plan.any() else True
    gap = abs(primal - dual)
    return TransportPlan(
        plan=plan,
        cost=primal,
        row_residual=float(np.max(np.abs(plan.sum(1) - wa))),
        col_residual=float(np.max(np.abs(plan.sum(0) - wb))),
        u=u,
        v=v,
        dual_gap=gap,
        certified=bool(feasible and complementary and gap <= 1e-9 * scale),
    )


def round_plan(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a positive matrix onto the couplings of ``(a, b)``.

    Rows and columns are scaled down to respect the marginals, then the
    deficit is filled by a rank-one correction, giving exact marginals.
    """
    P = np.array(P, dtype=float)
    r = P.sum(1)
    P *= np.minimum(1.0, np.divide(a, r, out=np.ones_like(a), where=r > 0))[:, None]
    c = P.sum(0)
    P *= np.minimum(1.0, np.divide(b, c, out=np.ones_like(b), where=c > 0))[None, :]
    ea = a - P.sum(1)
    eb = b - P.sum(0)
    tot = ea.sum()
    if tot > 0:
        P += np.outer(ea, eb) / tot
    return P


def solve_sinkhorn(
    a: DiscreteMeasure | np.ndarray,
    b: DiscreteMeasure | np.ndarray,
    cost: np.ndarray,
    reg: float,
    max_iter: int = 20000,
    tol: float = 1e-9,
    scaling: bool = True,
) -> SinkhornResult:
    """Log-domain Sinkhorn with regularization halved from the median cost down to ``reg``.

    Brackets the unregularized optimum: ``lower`` is the dual value of the
    final potentials after a c-transform (feasible, hence a lower bound);
    ``upper`` is the cost of the rounded plan (a coupling, hence an upper
    bound).  ``entropic_bracket`` is ``[primal - reg*H(pi), primal]``.
    """
    if reg <= 0:
        raise TransportError("regularization must be positive")
    wa = a.weights if isinstance(a, DiscreteMeasure) else np.asarray(a, dtype=float)
    wb = b.weights if isinstance(b, DiscreteMeasure) else np.asarray(b, dtype=float)
    C = np.asarray(cost, dtype=float)
    la, lb = np.log(wa), np.log(wb)
    f = np.zeros(wa.size)
    g = np.zeros(wb.size)
    eps_list = [reg]
    if scaling:
        e = float(np.median(C)) if C.size else reg
        eps_list = []
        while e > reg:
            eps_list.append(e)
            e *= 0.5
        eps_list.append(reg)
    it = 0
    converged = False
    for k, e in enumerate(eps_list):
        final = k == len(eps_list) - 1
        stage_tol = tol if final else max(tol, 1e-6)
        while it < max_iter:
            it += 1
            f = -e * logsumexp((g[None, :] - C) / e + lb[None, :], axis=1)
            g = -e * logsumexp((f[:, None] - C) / e + la[:, None], axis=0)
            if it % 10 == 0 or final:
                logP = (f[:, None] + g[None, :] - C) / e + la[:, None] + lb[None, :]
                err = float(np.abs(np.exp(logsumexp(logP, axis=1)) - wa).sum())
                if err <= stage_tol:
                    if final:
                        converged = True
                    break
        if it >= max_iter:
            break
    logP = (f[:, None] + g[None, :] - C) / reg + la[:, None] + lb[None, :]
    P = np.exp(logP)
    primal = float(np.sum(P * C))
    H = float(-np.sum(P * np.where(P > 0, logP, 0.0)))
    # certified bracket
    g_c = np.min(C - f[:, None], axis=0)
    f_c = np.min(C - g_c[None, :], axis=1)
    lower = float(wa @ f_c + wb @ g_c)
    R = round_plan(P, wa, wb)
    upper = float(np.sum(R * C))
    plan = TransportPlan(
        plan=P,
        cost=primal,
        row_residual=float(np.abs(P.sum(1) - wa).max()),
        col_residual=float(np.abs(P.sum(0) - wb).max()),
    )
    return SinkhornResult(plan, lower, upper, (primal - reg * H, primal), it, converged, f, g)


# ---------------------------------------------------------------------------
# lattice-native distances


def quantile_w2(mu: GridMeasure, nu: GridMeasure) -> float:
    """Exact ``W_2^2`` between one-dimensional cell histograms.

    Node ``i`` carries its mass uniformly on ``[x_i - h/2, x_i + h/2]``; the
    quantile functions are then piecewise linear and the integral of their
    squared difference is evaluated in closed form.
    """
    if mu.lattice.ndim != 1 or nu.lattice.ndim != 1:
        raise TransportError("quantile backend needs one-dimensional lattices")

    def breaks(m: GridMeasure):
        x = m.lattice.axes()[0]
        h = float(m.lattice.spacing[0])
        mass = m.density * h
        edges = np.concatenate([[x[0] - h / 2], x + h / 2])
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        cdf /= cdf[-1]
        return cdf, edges

    ca, ea = breaks(mu)
    cb, eb = breaks(nu)
    s = np.union1d(ca, cb)
    qa = _quantile(ca, ea, s)
    qb = _quantile(cb, eb, s)
    ds = np.diff(s)
    d0 = qa[:-1] - qb[:-1]
    d1 = qa[1:] - qb[1:]
    # integral of a linear function squared over each segment
    return float(np.sum(ds * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))


def _quantile(cdf, edges, s):
    # on flat stretches of the CDF (empty cells) take the left-most point
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(s, cdf[keep], edges[keep])


def _edge_incidence(group: StratifiedAlgebra, lat: Lattice):
    key = ("incidence", id(group))
    if key in lat._cache:
        return lat._cache[key]
    heads, tails, inv_h2 = [], [], []
    for j in range(group.m1):
        h = float(lat.spacing[j])
        z = np.zeros(group.n)
        z[j] = h
        gat = translation_gather(group, lat, z, "right")
        if not gat.exact:
            raise TransportError("linearized backend needs a lattice closed under the translation stencil")
        ok = gat.idx[:, 0] >= 0
        heads.append(np.flatnonzero(ok))
        tails.append(gat.idx[ok, 0])
        inv_h2.append(np.full(ok.sum(), 1.0 / (h * h)))
    out = (np.concatenate(heads), np.concatenate(tails), np.concatenate(inv_h2))
    lat._cache[key] = out
    return out


def linearized_w2(group: StratifiedAlgebra, mu: GridMeasure, nu: GridMeasure, floor: float = 1e-10, tol: float = 1e-10) -> float:
    """``sum phi (nu - mu) cellvol`` with ``-div(rho_bar grad phi) = nu - mu`` on the stencil graph.

    ``rho_bar = (mu + nu) / 2``; edge weights are arithmetic means of the
    endpoint values.  Nodes with ``rho_bar < floor * max`` are dropped,
    and the right-hand side is made mean-free on every connected component.
    """
    lat = mu.lattice
    if not lat.same_as(nu.lattice):
        raise TransportError("measures live on different lattices")
    rbar = 0.5 * (mu.density + nu.density)
    rhs = nu.density - mu.density
    if not np.any(rhs):
        return 0.0
    head, tail, inv_h2 = _edge_incidence(group, lat)
    active = rbar >= floor * rbar.max()
    keep = active[head] & active[tail]
    head, tail, inv_h2 = head[keep], tail[keep], inv_h2[keep]
    w = 0.5 * (rbar[head] + rbar[tail]) * inv_h2
    nodes = np.flatnonzero(active)
    remap = -np.ones(lat.size, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size)
    i, j = remap[head], remap[tail]
    n = nodes.size
    A = sparse.coo_matrix((np.concatenate([w, w, -w, -w]), (np.concatenate([i, j, i, j]), np.concatenate([i, j, j, i]))), shape=(n, n)).tocsr()
    b = rhs[nodes]
    ncomp, labels = connected_components(A, directed=False)
    sums = np.bincount(labels, weights=b, minlength=ncomp)
    sizes = np.bincount(labels, minlength=ncomp)
    b = b - (sums / sizes)[labels]
    diag = A.diagonal()
    M = sparse.diags(np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0))
    phi, info = cg(A, b, rtol=tol, atol=0.0, maxiter=20 * n, M=M)
    if info != 0:
        raise TransportError(f"linearized transport solve did not converge (info={info})")
    return float(max(phi @ b, 0.0) * lat.cellvol)


# ---------------------------------------------------------------------------
# public distance


@dataclass
class WassersteinOptions:
    backend: str = "box"
    max_points: int = 512
    eps: float = 0.1
    reg_factor: float = 1e-3
    uncertainty: bool = True
    distance: RiemannianEpsDistance | None = field(default=None, repr=False)


@dataclass
class WassersteinResult:
    value: float
    uncertainty: float
    backend: str
    note: str = ""
    bracket: tuple[float, float] | None = None


_NOTES = {
    "box": "box-norm cost; equivalent to the Carnot-Caratheodory cost up to an unknown factor",
    "sinkhorn": "entropic solver; value from the rounded plan, bracket certified",
    "riemannian_eps": "lattice g_eps shortest paths; lower-bound surrogate of the sub-Riemannian cost",
    "quantile": "exact for one-dimensional histograms",
    "linearized": "weighted H^-1 norm; infinitesimal W_2, accurate for nearby measures only",
}


def _compressed_w2(group, mu, nu, opts: WassersteinOptions, budget: int):
    A = support_compress(group, mu, budget)
    B = support_compress(group, nu, budget)
    if opts.backend == "riemannian_eps":
        dist = opts.distance or RiemannianEpsDistance(group, mu.lattice, opts.eps)
        C = cost_matrix(group, dist, A.points, B.points)
    else:
        C = cost_matrix(group, "box", A.points, B.points)
    if opts.backend == "sinkhorn":
        pos = C[C > 0]
        reg = opts.reg_factor * float(np.median(pos)) if pos.size else 1.0
        res = solve_sinkhorn(A, B, C, reg)
        return res.upper, (res.lower, res.upper)
    plan = solve_exact(A, B, C)
    return plan.cost, None


def wasserstein(group: StratifiedAlgebra, mu: GridMeasure, nu: GridMeasure, opts: WassersteinOptions | None = None) -> WassersteinResult:
    opts = opts or WassersteinOptions()
    if opts.backend == "quantile":
        return WassersteinResult(math.sqrt(quantile_w2(mu, nu)), 0.0, "quantile", _NOTES["quantile"])
    if opts.backend == "linearized":
        return WassersteinResult(math.sqrt(linearized_w2(group, mu, nu)), float("nan"), "linearized", _NOTES["linearized"])
    if opts.backend not in ("box", "sinkhorn", "riemannian_eps"):
        raise TransportError(f"unknown Wasserstein backend {opts.backend!r}")
    if opts.backend == "riemannian_eps" and opts.distance is None:
        opts = WassersteinOptions(**{**opts.__dict__, "distance": RiemannianEpsDistance(group, mu.lattice, opts.eps)})
    w2, bracket = _compressed_w2(group, mu, nu, opts, opts.max_points)
    value = math.sqrt(max(w2, 0.0))
    unc = float("nan")
    if opts.uncertainty:
        w2b, _ = _compressed_w2(group, mu, nu, opts, 2 * opts.max_points)
        unc = abs(math.sqrt(max(w2b, 0.0)) - value)
    br = None if bracket is None else (math.sqrt(max(bracket[0], 0.0)), math.sqrt(max(bracket[1], 0.0)))
    return WassersteinResult(value, unc, opts.backend, _NOTES[opts.backend], br)


def metric_derivative(group: StratifiedAlgebra, trace: FlowTrace, t_index: int, opts: WassersteinOptions | None = None) -> float:
    """Central difference ``W(mu_{t+dt}, mu_{t-dt}) / (2 dt)``."""
    if t_index <= 0 or t_index >= len(trace) - 1:
        raise TransportError("metric derivative needs an interior time index")
    opts = opts or WassersteinOptions(uncertainty=False)
    if opts.uncertainty:
        opts = WassersteinOptions(**{**opts.__dict__, "uncertainty": False})
    w = wasserstein(group, trace.measures[t_index + 1], trace.measures[t_index - 1], opts).value
    return w / float(trace.times[t_index + 1] - trace.times[t_index - 1])


def export_plan_csv(plan: TransportPlan, path, tol: float = 0.0) -> None:
    """Write ``a,b,mass`` triples (0-based support indices)."""
    lines = ["a,b,mass"] + [f"{a},{b},{m:.17g}" for a, b, m in plan.triples(tol)]
    atomic_write_text(path, "\n".join(lines) + "\n")
