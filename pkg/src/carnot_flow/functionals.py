"""Entropy, Fisher information and related functionals of nodal densities.

Derivatives along ``X_j`` are symmetric differences over right translations,

    (D_j f)(x) = (f(x * h_j e_j) - f(x * (-h_j e_j))) / (2 h_j),

which is exact on functions affine along the flow lines of ``X_j``.  Where
one of the two translates leaves the box a one-sided difference is used and
the node is excluded from Fisher quadratures.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .group_core import EpsilonMetric, StratifiedAlgebra
from .lattice import GridMeasure, Lattice, LatticeError, second_moment, translation_gather

__all__ = [
    "FunctionalError",
    "DiagnosticsRecord",
    "entropy",
    "relative_entropy",
    "truncation",
    "truncated_integrand",
    "truncated_entropy",
    "frame_derivative",
    "layer_gradient",
    "horizontal_gradient",
    "stencil_interior",
    "horizontal_fisher",
    "layer_fisher_terms",
    "epsilon_fisher",
    "epsilon_fisher_frame",
    "entropy_first_variation",
    "positivity_threshold",
    "diagnostics_record",
    "DIAGNOSTICS_HEADER",
]

THRESHOLD_FACTOR = 1e-12


class FunctionalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# entropies


def _xlogx(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] * np.log(r[pos])
    return out


def entropy(mu: GridMeasure) -> float:
    """``sum rho log rho cellvol`` in nats, with ``0 log 0 = 0``."""
    return float(np.sum(_xlogx(mu.density)) * mu.lattice.cellvol)


def relative_entropy(mu: GridMeasure, nu) -> float:
    """Entropy of ``mu`` relative to a measure given by a nodal density.

    ``nu`` is a :class:`GridMeasure` or a positive nodal weight array (not
    necessarily normalized).
    """
    rho = mu.density
    w = nu.density if isinstance(nu, GridMeasure) else np.asarray(nu, dtype=float).reshape(-1)
    if w.shape != rho.shape:
        raise FunctionalError("reference measure must be a nodal field on the same lattice")
    support = rho > 0
    if np.any(w[support] <= 0):
        raise FunctionalError("mu is not absolutely continuous with respect to nu")
    ratio = rho[support] / w[support]
    return float(np.sum(rho[support] * np.log(ratio)) * mu.lattice.cellvol)


def truncation(r: np.ndarray, m: float) -> np.ndarray:
    """``z_m(r) = min(m, max(1 + log r, -m))`` (``z_m(0) = -m``)."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        z = 1.0 + np.log(r)
    return np.clip(z, -m, m)


def truncated_integrand(r: np.ndarray, m: float) -> np.ndarray:
    """``H_m(r) = int_0^r z_m`` in closed form.

    With ``a = e^{-m-1}`` and ``b = e^{m-1}``: ``-m r`` on ``[0, a]``,
    ``r log r + a`` on ``[a, b]`` and ``m r - b + a`` beyond ``b``.
    """
    if m < 1:
        raise FunctionalError("truncation level must be >= 1")
    r = np.asarray(r, dtype=float)
    a = math.exp(-m - 1.0)
    b = math.exp(m - 1.0)
    mid = _xlogx(np.clip(r, a, b)) + a
    return np.where(r <= a, -m * r, np.where(r <= b, mid, m * r - b + a))


def truncated_entropy(mu: GridMeasure, m: float) -> float:
    return float(np.sum(truncated_integrand(mu.density, m)) * mu.lattice.cellvol)


# ---------------------------------------------------------------------------
# gradients


def _neighbours(group: StratifiedAlgebra, lat: Lattice, j: int):
    h = float(lat.spacing[j])
    z = np.zeros(group.n)
    z[j] = h
    fwd = translation_gather(group, lat, z, "right")
    bwd = translation_gather(group, lat, -z, "right")
    return fwd, bwd, h


def frame_derivative(group: StratifiedAlgebra, lat: Lattice, f: np.ndarray, j: int) -> np.ndarray:
    """``X_j f`` at every node (0-based frame index ``j``)."""
    if lat.ndim != group.n:
        raise LatticeError("lattice and group dimensions differ")
    f = np.ascontiguousarray(f, dtype=float).reshape(-1)
    fwd, bwd, h = _neighbours(group, lat, j)
    fp = fwd.apply(f)
    fm = bwd.apply(f)
    okp = _valid(fwd)
    okm = _valid(bwd)
    out = np.where(okp & okm, (fp - fm) / (2 * h), 0.0)
    out = np.where(okp & ~okm, (fp - f) / h, out)
    out = np.where(~okp & okm, (f - fm) / h, out)
    return out


def _valid(gather) -> np.ndarray:
    key = "_valid"
    if not hasattr(gather, key):
        # a target counts as inside when all its interpolation weight lands on nodes
        w = np.where(gather.idx >= 0, gather.weights, 0.0).sum(axis=1)
        setattr(gather, key, w > 1 - 1e-12)
    return getattr(gather, key)


def stencil_interior(group: StratifiedAlgebra, lat: Lattice, axes: Sequence[int] | None = None) -> np.ndarray:
    """Nodes whose forward and backward translates along ``axes`` stay in the box."""
    axes = range(group.m1) if axes is None else axes
    mask = ~lat.boundary_mask
    for j in axes:
        fwd, bwd, _ = _neighbours(group, lat, j)
        mask &= _valid(fwd) & _valid(bwd)
    return mask


def layer_gradient(group: StratifiedAlgebra, lat: Lattice, f: np.ndarray, layer: int) -> np.ndarray:
    """Components ``X_j f`` for ``j`` in layer ``layer`` (1-based): shape ``(size, m_layer)``."""
    sl = group.layer_slice(layer)
    return np.stack([frame_derivative(group, lat, f, j) for j in range(sl.start, sl.stop)], axis=-1)


def horizontal_gradient(group: StratifiedAlgebra, lat: Lattice, f: np.ndarray) -> np.ndarray:
    return layer_gradient(group, lat, f, 1)


def positivity_threshold(rho: np.ndarray) -> float:
    return THRESHOLD_FACTOR * float(np.max(rho)) if rho.size else 0.0


def _fisher_mask(group, lat, rho, axes):
    return (rho > positivity_threshold(rho)) & stencil_interior(group, lat, axes)


def horizontal_fisher(group: StratifiedAlgebra, mu: GridMeasure) -> float:
    """``sum |grad_G rho|^2 / rho cellvol`` over interior nodes with ``rho > 1e-12 max rho``."""
    return layer_fisher_terms(group, mu)[0]


def layer_fisher_terms(group: StratifiedAlgebra, mu: GridMeasure) -> list[float]:
    """Per-layer Fisher terms ``sum |grad_{V_i} rho|^2 / rho cellvol`` on a common mask."""
    lat, rho = mu.lattice, mu.density
    mask = _fisher_mask(group, lat, rho, range(group.n) if group.step > 1 else None)
    mask_h = _fisher_mask(group, lat, rho, None)
    terms = []
    for layer in range(1, group.step + 1):
        grad = layer_gradient(group, lat, rho, layer)
        sel = mask_h if layer == 1 else mask
        terms.append(float(np.sum(np.sum(grad[sel] ** 2, axis=-1) / rho[sel]) * lat.cellvol))
    return terms


def epsilon_fisher(group: StratifiedAlgebra, mu: GridMeasure, eps: float) -> float:
    """``F_G + sum_{i >= 2} eps^{2(i-1)} F_{V_i}`` (layer decomposition)."""
    if eps <= 0:
        raise FunctionalError("eps must be positive")
    terms = layer_fisher_terms(group, mu)
    return float(terms[0] + sum(eps ** (2 * i) * t for i, t in enumerate(terms[1:], start=1)))


def epsilon_fisher_frame(group: StratifiedAlgebra, mu: GridMeasure, eps: float) -> float:
    """Same quantity via the full ``g_eps`` gradient field.

    Builds ``grad_eps rho = sum_i eps^{2(d(i)-1)} (X_i rho) X_i`` and takes its
    squared ``g_eps`` length pointwise.
    """
    lat, rho = mu.lattice, mu.density
    metric = EpsilonMetric(group, eps, K=0.0)
    coeff = np.stack([frame_derivative(group, lat, rho, j) for j in range(group.n)], axis=-1)
    grad_eps = coeff / metric.weights  # frame coordinates of the eps-gradient
    mask_h = _fisher_mask(group, lat, rho, None)
    mask = _fisher_mask(group, lat, rho, range(group.n) if group.step > 1 else None)
    horiz = slice(0, group.m1)
    h_part = np.sum((metric.weights[horiz] * grad_eps[:, horiz] ** 2)[mask_h], axis=-1) / rho[mask_h]
    v_part = np.sum((metric.weights[group.m1:] * grad_eps[:, group.m1:] ** 2)[mask], axis=-1) / rho[mask]
    return float(np.sum(h_part) * lat.cellvol + np.sum(v_part) * lat.cellvol)


# ---------------------------------------------------------------------------
# first variation


def _coordinate_field(group, frame_coeffs: Callable, x: np.ndarray) -> np.ndarray:
    a = np.asarray(frame_coeffs(x), dtype=float)
    frame = group.frame(x)[..., : group.m1, :]
    return np.einsum("...j,...jk->...k", a, frame)


def entropy_first_variation(group: StratifiedAlgebra, mu: GridMeasure, field: Callable[[np.ndarray], np.ndarray], step: float = 1e-5) -> float:
    """``-sum rho div V cellvol`` for ``V = sum_j a_j X_j``.

    ``field(x)`` returns the frame coefficients ``a_j(x)``, shape ``(N, m1)``.
    The Euclidean divergence of the coordinate expression is taken by
    central differences of step ``step``.
    """
    lat = mu.lattice
    x = lat.coords()
    vb = _coordinate_field(group, field, x[lat.boundary_mask])
    if np.max(np.abs(vb), initial=0.0) > 0:
        raise FunctionalError("vector field must vanish on the boundary of the box")
    div = np.zeros(lat.size)
    for k in range(group.n):
        e = np.zeros(group.n)
        e[k] = step
        div += (_coordinate_field(group, field, x + e)[:, k] - _coordinate_field(group, field, x - e)[:, k]) / (2 * step)
    return float(-np.sum(mu.density * div) * lat.cellvol)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticsRecord:
    t: float
    mass: float
    entropy: float
    fisher: float
    fisher_eps: list[float] = field(default_factory=list)
    moment: float = 0.0
    min_rho: float = 0.0
    max_rho: float = 0.0

    def csv_row(self) -> str:
        vals = [self.t, self.mass, self.entropy, self.fisher, *self.fisher_eps, self.moment, self.min_rho, self.max_rho]
        return ",".join(f"{v:.17g}" for v in vals)

    def to_dict(self) -> dict:
        return asdict(self)


def DIAGNOSTICS_HEADER(eps_list: Sequence[float] = ()) -> str:
    cols = ["t", "mass", "entropy", "fisher", *[f"fisher_eps_{e:g}" for e in eps_list], "moment", "min_rho", "max_rho"]
    return ",".join(cols)


def diagnostics_record(group: StratifiedAlgebra, mu: GridMeasure, t: float, eps_list: Sequence[float] = ()) -> DiagnosticsRecord:
    return DiagnosticsRecord(
        t=float(t),
        mass=mu.mass,
        entropy=entropy(mu),
        fisher=horizontal_fisher(group, mu),
        fisher_eps=[epsilon_fisher(group, mu, e) for e in eps_list],
        moment=second_moment(group, mu),
        min_rho=float(mu.density.min()),
        max_rho=float(mu.density.max()),
    )
