"""Pointwise gradient-bound probes for the discrete heat semigroup.

Everything is evaluated at the origin.  Since the operator is symmetric,
``P_t f(y) = <p_t^y, f>`` where ``p_t^y`` is the heat trajectory started from
a (balanced) delta at ``y``.  Trajectories from the origin and from its
``2 m_1`` horizontal stencil neighbours give ``P_t f``, ``P_t (f^2)``,
``P_t |grad f|^2`` and the discrete ``grad_G P_t f`` at the origin for every
test function at once.  By left invariance the origin is no loss of
generality for translated test functions.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .functionals import horizontal_gradient
from .group_core import StratifiedAlgebra
from .heat_engine import HeatError, SubLaplacianOperator, discrete_delta, stability_bound
from .lattice import atomic_write_text

__all__ = [
    "ProbeError",
    "BEWitness",
    "ProbeFunction",
    "probe_bank",
    "ProbeRecord",
    "probe_table",
    "be_violation_search",
    "reverse_poincare_ratio",
    "lambda_estimate",
    "refinement_check",
    "geometric_times",
    "write_witness_json",
    "write_lambda_csv",
]

MARGIN_GUARD = 1e-6
SCORE_ID = "kernel-score"


class ProbeError(RuntimeError):
    pass


@dataclass
class BEWitness:
    K: float
    t: float
    function_id: str
    node: tuple[float, ...]
    lhs: float
    rhs: float
    margin: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProbeFunction:
    """Named smooth test function; ``fn(x)`` returns nodal values."""

    fid: str
    fn: Callable[[np.ndarray], np.ndarray]


def _bump(x, radii):
    s = x / radii
    return np.where(np.all(np.abs(s) < 1, axis=-1), np.prod((1 - np.minimum(s * s, 1.0)) ** 3, axis=-1), 0.0)


def probe_bank(group: StratifiedAlgebra, radii: Sequence[float], commutator_weight: float = 10.0) -> list[ProbeFunction]:
    """Bump, coordinates times bump, pairwise products times bump, plus commutator probes.

    For every bracket ``[X_i, X_j] = c X_k`` the last group adds
    ``(x_j - a c x_i x_k) * bump`` and ``(x_i + a c x_j x_k) * bump`` with
    ``a = commutator_weight``: at the origin their horizontal gradient turns
    along the vertical direction faster than the semigroup can average.
    Commutative groups get no extra functions.
    """
    r = np.asarray(radii, dtype=float)
    if r.shape != (group.n,) or np.any(r <= 0):
        raise ProbeError("one positive bump radius per coordinate required")
    n = group.n
    bank = [ProbeFunction("bump", lambda x: _bump(x, r))]
    for i in range(n):
        bank.append(ProbeFunction(f"x{i + 1}*bump", lambda x, i=i: x[:, i] * _bump(x, r)))
    for i in range(n):
        for j in range(i, n):
            bank.append(ProbeFunction(f"x{i + 1}x{j + 1}*bump", lambda x, i=i, j=j: x[:, i] * x[:, j] * _bump(x, r)))
    a = float(commutator_weight)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(n):
                if abs(group.structure[i, j, k]) > 0:
                    c = float(group.structure[i, j, k])
                    bank.append(
                        ProbeFunction(
                            f"x{j + 1}-{a * c:g}x{i + 1}x{k + 1}*bump",
                            lambda x, i=i, j=j, k=k, c=c: (x[:, j] - a * c * x[:, i] * x[:, k]) * _bump(x, r),
                        )
                    )
                    bank.append(
                        ProbeFunction(
                            f"x{i + 1}+{a * c:g}x{j + 1}x{k + 1}*bump",
                            lambda x, i=i, j=j, k=k, c=c: (x[:, i] + a * c * x[:, j] * x[:, k]) * _bump(x, r),
                        )
                    )
    return bank


def geometric_times(t0: float = 0.02, t1: float = 0.64) -> list[float]:
    out = [t0]
    while out[-1] * 2 <= t1 * (1 + 1e-12):
        out.append(out[-1] * 2)
    return out


@dataclass
class ProbeRecord:
    t: float
    function_id: str
    pt_f: float
    grad_pt_f: list[float]
    pt_f2: float
    pt_grad2: float
    node: tuple[float, ...] = ()

    @property
    def lhs(self) -> float:
        return float(np.sum(np.square(self.grad_pt_f)))

    @property
    def variance(self) -> float:
        return self.pt_f2 - self.pt_f**2


def _sources(op: SubLaplacianOperator):
    lat, group = op.lattice, op.group
    origin = lat.origin_index
    nodes = [origin]
    x0 = np.zeros((1, group.n))
    for j in range(group.m1):
        for sgn in (1.0, -1.0):
            y = x0.copy()
            y[0, j] = sgn * lat.spacing[j]
            idx = int(lat.node_index(group.product(x0, y))[0])
            if idx < 0:
                raise ProbeError("stencil neighbour of the origin lies outside the lattice")
            nodes.append(idx)
    return nodes


def _kernel_score(op: SubLaplacianOperator, P: np.ndarray, h: float) -> list[np.ndarray]:
    # f = d_j / p with d_j the difference of the +-h e_j trajectories: the
    # Cauchy-Schwarz extremal for |D_j P_t f(0)|^2 / Var
    p = P[:, 0]
    keep = p > 1e-10 * p.max()
    out = []
    for j in range((P.shape[1] - 1) // 2):
        d = (P[:, 1 + 2 * j] - P[:, 2 + 2 * j]) / (2 * h)
        f = np.zeros_like(p)
        f[keep] = d[keep] / p[keep]
        out.append(f)
    return out


def probe_table(
    op: SubLaplacianOperator,
    times: Sequence[float],
    bank: Sequence[ProbeFunction],
    include_score: bool = True,
    dt: float | None = None,
) -> list[ProbeRecord]:
    """Evaluate every bank function at every time (one pass of ``1 + 2 m_1`` trajectories).

    ``pt_grad2`` uses the same discrete frame derivative as ``grad_pt_f``.
    """
    group, lat = op.group, op.lattice
    if lat.ndim != group.n:
        raise ProbeError("lattice and group dimensions differ")
    x = lat.coords()
    nodes = _sources(op)
    values = {}
    for pf in bank:
        f = np.asarray(pf.fn(x), dtype=float)
        if np.max(np.abs(f[lat.boundary_mask]), initial=0.0) > 0:
            raise ProbeError(f"test function {pf.fid} is not supported inside the box")
        g = horizontal_gradient(group, lat, f)
        values[pf.fid] = (f, f * f, np.sum(g * g, axis=-1))
    bound = stability_bound(op)
    dt = 0.4 * bound if dt is None else float(dt)
    times = sorted(float(t) for t in times)
    if times[0] < 10 * dt:
        raise HeatError(f"t={times[0]:.4g} is below the resolvable time 10*dt={10 * dt:.4g} for this mesh")
    P = np.stack([discrete_delta(op, dt, node)[0] for node in nodes], axis=1)
    t = dt
    hx = float(lat.spacing[0])
    vol = lat.cellvol
    origin_xy = tuple(float(v) for v in x[lat.origin_index])
    records = []
    for target in times:
        nsteps = max(1, math.ceil((target - t) / dt - 1e-9))
        step = (target - t) / nsteps
        for _ in range(nsteps):
            P = P + step * (op.matrix @ P)
        t = target
        fields = dict(values)
        if include_score and not group.is_commutative:
            for j, f in enumerate(_kernel_score(op, P, hx)):
                g = horizontal_gradient(group, lat, f)
                fields[f"{SCORE_ID}-{j + 1}"] = (f, f * f, np.sum(g * g, axis=-1))
        for fid, (f, f2, g2) in fields.items():
            inner = (f @ P) * vol
            grad = [(inner[1 + 2 * j] - inner[2 + 2 * j]) / (2 * float(lat.spacing[j])) for j in range(group.m1)]
            records.append(
                ProbeRecord(
                    t=target,
                    function_id=fid,
                    pt_f=float(inner[0]),
                    grad_pt_f=[float(v) for v in grad],
                    pt_f2=float(f2 @ P[:, 0] * vol),
                    pt_grad2=float(g2 @ P[:, 0] * vol),
                    node=origin_xy,
                )
            )
    return records


def be_violation_search(
    table: Sequence[ProbeRecord],
    K: float,
    guard: float = MARGIN_GUARD,
    exclude_score: bool = True,
) -> tuple[BEWitness | None, list[dict]]:
    """Largest relative violation of ``|grad P_t f|^2 <= e^{-2Kt} P_t |grad f|^2``.

    ``margin = lhs / rhs - 1``; a witness needs ``margin > guard``.  Returns
    the maximal witness (or ``None``, which is inconclusive) and every
    scanned margin.
    """
    best = None
    scanned = []
    for r in table:
        if exclude_score and r.function_id.startswith(SCORE_ID):
            continue
        rhs = math.exp(-2 * K * r.t) * r.pt_grad2
        lhs = r.lhs
        if rhs <= 0:
            continue
        margin = lhs / rhs - 1.0
        scanned.append({"t": r.t, "function_id": r.function_id, "lhs": lhs, "rhs": rhs, "margin": margin})
        if margin > guard and (best is None or margin > best.margin):
            best = BEWitness(float(K), r.t, r.function_id, r.node, lhs, rhs, margin)
    return best, scanned


def reverse_poincare_ratio(record: ProbeRecord, floor: float = 1e-14) -> tuple[float, float] | None:
    """``(ratio, t / ratio)`` with ``ratio = Var / |grad P_t f|^2``; ``None`` if degenerate."""
    lhs = record.lhs
    if lhs <= floor:
        return None
    ratio = record.variance / lhs
    if ratio <= 0:
        return None
    return ratio, record.t / ratio


def lambda_estimate(table: Sequence[ProbeRecord], min_time: float = 0.0) -> dict:
    """Per-time maxima of ``t / ratio`` over the bank and their aggregate.

    ``lambda_hat`` is the maximum over functions and times ``>= min_time``;
    ``min_variance`` reports the semigroup variance floor.
    """
    per_t: dict[float, tuple[float, str]] = {}
    min_var = math.inf
    for r in table:
        min_var = min(min_var, r.variance)
        res = reverse_poincare_ratio(r)
        if res is None:
            continue
        if r.t not in per_t or res[1] > per_t[r.t][0]:
            per_t[r.t] = (res[1], r.function_id)
    sel = [v for t, v in per_t.items() if t >= min_time - 1e-12]
    if not sel:
        return {"lambda_hat": None, "per_time": {}, "min_variance": min_var}
    lam = max(v[0] for v in sel)
    return {
        "lambda_hat": lam,
        "per_time": {f"{t:g}": {"lambda": v[0], "function_id": v[1]} for t, v in sorted(per_t.items())},
        "min_variance": min_var,
    }


def refinement_check(coarse: BEWitness, fine_table: Sequence[ProbeRecord], max_shrink: float = 0.5) -> dict:
    """Does the witness ``(t, f)`` persist on the refined mesh with margin shrinking by less than ``max_shrink``?"""
    hit = [r for r in fine_table if r.function_id == coarse.function_id and abs(r.t - coarse.t) <= 1e-12]
    if not hit:
        raise ProbeError("refined table lacks the witness (t, f)")
    r = hit[0]
    rhs = math.exp(-2 * coarse.K * r.t) * r.pt_grad2
    margin = r.lhs / rhs - 1.0
    ok = margin > MARGIN_GUARD and margin >= (1 - max_shrink) * coarse.margin
    return {"coarse_margin": coarse.margin, "fine_margin": margin, "persists": bool(ok)}


def write_witness_json(path, witnesses: dict, extra: dict | None = None) -> None:
    payload = {"schema": 1, "witnesses": {}, "note": "no witness is inconclusive (finite search)"}
    for K, w in witnesses.items():
        payload["witnesses"][f"{float(K):g}"] = None if w is None else w.to_dict()
    if extra:
        payload.update(extra)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_lambda_csv(path, estimate: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "lambda_hat", "function_id"])
    for t, v in estimate["per_time"].items():
        w.writerow([t, f"{v['lambda']:.17g}", v["function_id"]])
    atomic_write_text(path, buf.getvalue())
