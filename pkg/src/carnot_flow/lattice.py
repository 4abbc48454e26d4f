"""Uniform box lattices in exponential coordinates, nodal measures and mollifiers.

Nodes are stored in row-major (C) order over coordinates ``x_1, ..., x_n``.
For step-two groups with integer structure constants the constructor
:meth:`Lattice.for_group` picks the degree-two spacing ``h^2 / 2``.  With that
choice the node set is closed under group products with lattice elements,
so every group translation used by the package maps nodes exactly onto
nodes and no interpolation is needed.
"""
from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._backend import kernels
from .group_core import StratifiedAlgebra

__all__ = [
    "LatticeError",
    "Lattice",
    "GridMeasure",
    "FlowTrace",
    "Gather",
    "discretize",
    "translation_gather",
    "group_convolve",
    "left_convolve",
    "bump_mollifier",
    "space_mollify",
    "time_mollify",
    "second_moment",
    "pushforward_dilation",
    "save_measure",
    "load_measure",
    "atomic_write_bytes",
    "atomic_write_text",
]

_SNAP_TOL = 1e-7


class LatticeError(ValueError):
    """Invalid lattice, measure or discretization request."""


@dataclass(frozen=True, eq=False)
class Lattice:
    """Box ``prod [lower_i, upper_i]`` with ``counts_i`` equispaced nodes per axis."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    counts: tuple[int, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        up = tuple(float(v) for v in self.upper)
        cn = tuple(int(v) for v in self.counts)
        if not (len(lo) == len(up) == len(cn)) or not lo:
            raise LatticeError("lower, upper and counts must have the same positive length")
        if any(c < 3 for c in cn):
            raise LatticeError(f"every axis needs at least 3 nodes, got {cn}")
        if any(u <= l for l, u in zip(lo, up)):
            raise LatticeError("upper bounds must exceed lower bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "counts", cn)

    # construction helpers
    @classmethod
    def symmetric(cls, half_widths: Sequence[float], counts: Sequence[int]) -> "Lattice":
        hw = tuple(float(v) for v in half_widths)
        return cls(tuple(-v for v in hw), hw, tuple(counts))

    @classmethod
    def for_group(cls, group: StratifiedAlgebra, h: float, half_widths: Sequence[float]) -> "Lattice":
        """Symmetric lattice with horizontal spacing ``h`` adapted to the group law.

        Degree-``d`` coordinates get spacing ``h**d / 2**(d-1)`` (so ``h^2/2``
        in the second layer); half widths are rounded to whole cells.
        """
        if len(half_widths) != group.n:
            raise LatticeError(f"need {group.n} half widths, got {len(half_widths)}")
        counts, hw = [], []
        for d, w in zip(group.degrees, half_widths):
            step = h ** int(d) / 2 ** (int(d) - 1)
            cells = max(1, int(round(float(w) / step)))
            counts.append(2 * cells + 1)
            hw.append(cells * step)
        return cls.symmetric(hw, counts)

    # geometry
    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.array([(u - l) / (c - 1) for l, u, c in zip(self.lower, self.upper, self.counts)])

    @property
    def cellvol(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(np.array(self.upper) - np.array(self.lower)))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, u, c) for l, u, c in zip(self.lower, self.upper, self.counts)]

    def coords(self) -> np.ndarray:
        """All node coordinates, shape ``(size, ndim)``."""
        if "coords" not in self._cache:
            grids = np.meshgrid(*self.axes(), indexing="ij")
            self._cache["coords"] = np.stack([g.ravel() for g in grids], axis=-1)
        return self._cache["coords"]

    def coord(self, i: int) -> np.ndarray:
        return self.coords()[:, i]

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """True on nodes with some index at the first or last position."""
        idx = np.indices(self.shape).reshape(self.ndim, -1)
        mask = np.zeros(self.size, dtype=bool)
        for a, c in enumerate(self.counts):
            mask |= (idx[a] == 0) | (idx[a] == c - 1)
        return mask

    def interior_mask(self, layers: int = 1) -> np.ndarray:
        """Nodes at least ``layers`` cells away from every face."""
        idx = np.indices(self.shape).reshape(self.ndim, -1)
        mask = np.ones(self.size, dtype=bool)
        for a, c in enumerate(self.counts):
            mask &= (idx[a] >= layers) & (idx[a] <= c - 1 - layers)
        return mask

    def fractional_index(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (points - np.asarray(self.lower)) / self.spacing

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(points)
        lo = np.asarray(self.lower) - tol
        up = np.asarray(self.upper) + tol
        return np.all((points >= lo) & (points <= up), axis=-1)

    def flat_index(self, multi: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape)

    def nearest_node(self, points: np.ndarray) -> np.ndarray:
        frac = self.fractional_index(np.atleast_2d(points))
        k = np.clip(np.rint(frac).astype(np.int64), 0, np.asarray(self.counts) - 1)
        return self.flat_index(k)

    def node_index(self, points: np.ndarray) -> np.ndarray:
        """Flat index of points lying on nodes, ``-1`` outside the box.

        Raises if an inside point is not within snapping tolerance of a node.
        """
        frac = self.fractional_index(np.atleast_2d(points))
        k = np.rint(frac)
        if np.max(np.abs(frac - k), initial=0.0) > _SNAP_TOL:
            raise LatticeError("points do not lie on lattice nodes")
        k = k.astype(np.int64)
        inside = np.all((k >= 0) & (k < np.asarray(self.counts)), axis=-1)
        out = np.full(k.shape[0], -1, dtype=np.int64)
        out[inside] = self.flat_index(k[inside])
        return out

    @property
    def origin_index(self) -> int:
        idx = self.node_index(np.zeros((1, self.ndim)))[0]
        if idx < 0:
            raise LatticeError("origin is not a lattice node (use odd node counts)")
        return int(idx)

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation; zero outside the box."""
        g = _multilinear_gather(self, np.atleast_2d(points))
        out = np.zeros(g.idx.shape[0])
        kernels.gather_accumulate(out, np.ascontiguousarray(values, dtype=float), g.idx, g.weights, 1.0)
        return out

    def same_as(self, other: "Lattice") -> bool:
        return self is other or (
            self.counts == other.counts
            and np.allclose(self.lower, other.lower, rtol=0, atol=1e-14)
            and np.allclose(self.upper, other.upper, rtol=0, atol=1e-14)
        )

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "counts": list(self.counts), "order": "C"}

    @classmethod
    def from_dict(cls, d: dict) -> "Lattice":
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["counts"]))


# ---------------------------------------------------------------------------
# gathers


@dataclass
class Gather:
    """Sparse "pull" operator: ``out[i] = sum_k weights[i, k] * f[idx[i, k]]``.

    Entries with ``idx < 0`` contribute zero.  ``exact`` is true when every
    target is a node (one column, unit weights).
    """

    idx: np.ndarray
    weights: np.ndarray
    exact: bool

    def apply(self, f: np.ndarray, out: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
        if out is None:
            out = np.zeros(self.idx.shape[0])
        kernels.gather_accumulate(out, np.ascontiguousarray(f, dtype=float), self.idx, self.weights, float(scale))
        return out

    def to_sparse(self, ncols: int):
        from scipy import sparse

        rows = np.repeat(np.arange(self.idx.shape[0]), self.idx.shape[1])
        cols = self.idx.ravel()
        vals = self.weights.ravel()
        keep = (cols >= 0) & (vals != 0)
        return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(self.idx.shape[0], ncols))


def _multilinear_gather(lat: Lattice, points: np.ndarray) -> Gather:
    frac = lat.fractional_index(points)
    near = np.rint(frac)
    if np.max(np.abs(frac - near), initial=0.0) <= _SNAP_TOL:
        k = near.astype(np.int64)
        inside = np.all((k >= 0) & (k < np.asarray(lat.counts)), axis=-1)
        idx = np.full((points.shape[0], 1), -1, dtype=np.int64)
        idx[inside, 0] = lat.flat_index(k[inside])
        return Gather(idx, np.ones((points.shape[0], 1)), True)
    base = np.floor(frac)
    t = frac - base
    base = base.astype(np.int64)
    corners = list(itertools.product((0, 1), repeat=lat.ndim))
    idx = np.full((points.shape[0], len(corners)), -1, dtype=np.int64)
    w = np.zeros((points.shape[0], len(corners)))
    counts = np.asarray(lat.counts)
    for c, corner in enumerate(corners):
        off = np.asarray(corner)
        k = base + off
        wc = np.prod(np.where(off == 1, t, 1.0 - t), axis=-1)
        inside = np.all((k >= 0) & (k < counts), axis=-1)
        idx[inside, c] = lat.flat_index(k[inside])
        w[:, c] = np.where(inside, wc, 0.0)
    return Gather(idx, w, False)


def translation_gather(group: StratifiedAlgebra, lat: Lattice, z: np.ndarray, side: str = "right") -> Gather:
    """Pull-back by a group translation: row ``i`` samples ``x_i * z`` or ``z * x_i``.

    Cached per lattice; targets outside the box contribute zero.
    """
    z = np.asarray(z, dtype=float).reshape(group.n)
    key = ("translate", side, id(group), tuple(np.round(z, 15)))
    hit = lat._cache.get(key)
    if hit is not None:
        return hit
    x = lat.coords()
    zz = np.broadcast_to(z, x.shape)
    if side == "right":
        targets = group.product(x, zz)
    elif side == "left":
        targets = group.product(zz, x)
    else:
        raise LatticeError(f"side must be 'right' or 'left', got {side!r}")
    g = _multilinear_gather(lat, targets)
    lat._cache[key] = g
    return g


# ---------------------------------------------------------------------------
# measures


@dataclass(eq=False)
class GridMeasure:
    """Nonnegative nodal density of unit mass on a lattice."""

    lattice: Lattice
    density: np.ndarray
    renormalization: float = 1.0

    def __post_init__(self):
        rho = np.ascontiguousarray(self.density, dtype=float).reshape(-1)
        if rho.size != self.lattice.size:
            raise LatticeError(f"density has {rho.size} values, lattice has {self.lattice.size} nodes")
        if not np.all(np.isfinite(rho)):
            raise LatticeError("density contains non-finite values")
        if np.any(rho < 0):
            raise LatticeError("density must be nonnegative")
        mass = float(np.sum(rho) * self.lattice.cellvol)
        if abs(mass - 1.0) > 1e-9:
            raise LatticeError(f"density mass is {mass!r}, expected 1 (use GridMeasure.normalized)")
        self.density = rho

    @classmethod
    def normalized(cls, lattice: Lattice, values: np.ndarray) -> "GridMeasure":
        vals = np.asarray(values, dtype=float).reshape(-1)
        if np.any(vals < 0):
            raise LatticeError("density must be nonnegative")
        mass = float(np.sum(vals) * lattice.cellvol)
        if not mass > 0 or not math.isfinite(mass):
            raise LatticeError("cannot normalize a zero or non-finite density")
        return cls(lattice, vals / mass, renormalization=1.0 / mass)

    @property
    def mass(self) -> float:
        return float(np.sum(self.density) * self.lattice.cellvol)

    def as_array(self) -> np.ndarray:
        return self.density.reshape(self.lattice.shape)


@dataclass(eq=False)
class FlowTrace:
    """Time-indexed measures on one lattice with per-time diagnostics."""

    times: np.ndarray
    measures: list[GridMeasure]
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.measures):
            raise LatticeError("one measure per time required")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise LatticeError("trace times must be strictly increasing")
        if self.measures:
            lat = self.measures[0].lattice
            if any(not m.lattice.same_as(lat) for m in self.measures):
                raise LatticeError("all measures of a trace must share one lattice")

    @property
    def lattice(self) -> Lattice:
        return self.measures[0].lattice

    def __len__(self) -> int:
        return len(self.measures)

    def densities(self) -> np.ndarray:
        return np.stack([m.density for m in self.measures])


def discretize(lattice: Lattice, density: Callable[[np.ndarray], np.ndarray]) -> GridMeasure:
    """Sample ``density`` at the nodes and renormalize to unit mass."""
    vals = np.asarray(density(lattice.coords()), dtype=float).reshape(-1)
    if vals.size == 1:
        vals = np.full(lattice.size, float(vals[0]))
    if not np.all(np.isfinite(vals)):
        raise LatticeError("density function returned non-finite values")
    if np.any(vals < 0):
        raise LatticeError("density function takes negative values on the box")
    if not np.any(vals > 0):
        raise LatticeError("density function vanishes at every node")
    return GridMeasure.normalized(lattice, vals)


# ---------------------------------------------------------------------------
# convolution


def _kernel_offsets(group: StratifiedAlgebra, lat: Lattice, kernel: np.ndarray):
    kernel = np.asarray(kernel, dtype=float).reshape(-1)
    if kernel.size != lat.size:
        raise LatticeError("kernel must be a nodal field on the same lattice")
    nz = np.flatnonzero(kernel)
    pts = lat.coords()[nz]
    half = 0.5 * (np.asarray(lat.upper) - np.asarray(lat.lower))
    if nz.size and np.any(np.max(np.abs(pts), axis=0) > 0.5 * half + 1e-12):
        raise LatticeError("kernel support exceeds half the box; enlarge the lattice or shrink the kernel")
    return pts, kernel[nz]


def _factored_convolve(group: StratifiedAlgebra, lat: Lattice, kernel: np.ndarray, f: np.ndarray, side: str) -> np.ndarray:
    # z = (z_low, 0) * (0, z_top) since the top layer is central, so the sum over
    # z_top is a plain convolution along the top axes and only the distinct
    # lower offsets need a translation gather.
    from scipy import ndimage

    pts, wts = _kernel_offsets(group, lat, kernel)
    f = np.ascontiguousarray(f, dtype=float).reshape(-1)
    out = np.zeros(lat.size)
    if pts.shape[0] == 0:
        return out
    top = group.layer_slice(group.step)
    low = slice(0, top.start)
    h = lat.spacing
    steps = np.rint(pts[:, top] / h[top]).astype(int)
    low_keys, inv = np.unique(np.round(pts[:, low] / h[low]).astype(int), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    reach = np.abs(steps).max(axis=0)
    grid = f.reshape(lat.shape)
    for g in range(len(low_keys)):
        sel = inv == g
        w = np.zeros(tuple(2 * reach + 1))
        np.add.at(w, tuple((steps[sel] + reach).T), wts[sel])
        shape = [1] * lat.ndim
        for ax, size in zip(range(top.start, top.stop), w.shape):
            shape[ax] = size
        F = ndimage.convolve(grid, w.reshape(shape), mode="constant", cval=0.0).reshape(-1)
        z = np.zeros(group.n)
        z[low] = -pts[np.flatnonzero(sel)[0], low]
        if np.any(z):
            translation_gather(group, lat, z, side).apply(F, out, lat.cellvol)
        else:
            out += lat.cellvol * F
    return out


def group_convolve(group: StratifiedAlgebra, lat: Lattice, f: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``(f * k)(x) = sum_y f(y) k(y^{-1} x) cellvol = sum_z f(x z^{-1}) k(z) cellvol``."""
    return _factored_convolve(group, lat, kernel, f, "right")


def left_convolve(group: StratifiedAlgebra, lat: Lattice, kernel: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``(k * f)(x) = sum_z k(z) f(z^{-1} x) cellvol``.

    This form commutes with left-invariant derivatives, so mollifying a
    density never increases its Fisher information.
    """
    return _factored_convolve(group, lat, kernel, f, "left")


def bump_mollifier(group: StratifiedAlgebra, lat: Lattice, k: float) -> np.ndarray:
    """Nodal ``eta_k(x) = k^Q eta(delta_k x)`` with ``eta = prod (1 - s_i^2)^2`` on the unit box.

    Normalized to unit discrete mass.  Raises when the support is narrower
    than one cell on some axis: admissible ``k`` satisfy ``k < h_i^{-1/d(i)}``.
    """
    if k < 1:
        raise LatticeError(f"bandwidth index must be >= 1, got {k}")
    kmax = float(np.min(lat.spacing ** (-1.0 / group.degrees)))
    if k >= kmax:
        raise LatticeError(
            f"mollifier with k={k} is sub-grid on this lattice; use k < {kmax:.4g} "
            "or refine the lattice"
        )
    s = lat.coords() * float(k) ** group.degrees
    inside = np.all(np.abs(s) < 1.0, axis=-1)
    vals = np.where(inside, np.prod((1.0 - np.minimum(s * s, 1.0)) ** 2, axis=-1), 0.0)
    return vals / (np.sum(vals) * lat.cellvol)


def space_mollify(group: StratifiedAlgebra, mu: GridMeasure, k: float) -> GridMeasure:
    """Left-convolve with ``eta_k`` and renormalize (factor kept in ``renormalization``)."""
    lat = mu.lattice
    eta = bump_mollifier(group, lat, k)
    out = left_convolve(group, lat, eta, mu.density)
    return GridMeasure.normalized(lat, out)


def _time_weights(dt: float, j: float) -> tuple[np.ndarray, np.ndarray]:
    reach = int(math.floor(1.0 / (j * dt) - 1e-12))
    offs = np.arange(-reach, reach + 1)
    s = j * offs * dt
    w = (1.0 - s * s) ** 2
    return offs, w / w.sum()


def time_mollify(trace: FlowTrace, j: float) -> FlowTrace:
    """Per-node convolution with ``theta_j(t) = j theta(j t)``, ``theta = (1-s^2)^2``.

    Frames outside the trace are replaced by the first (resp. last) frame.
    Each output frame is a convex combination of input frames.
    """
    if len(trace) < 3:
        raise LatticeError("time mollification needs at least 3 frames")
    dts = np.diff(trace.times)
    dt = float(dts.mean())
    if np.max(np.abs(dts - dt)) > 1e-9 * max(1.0, dt):
        raise LatticeError("time mollification needs a uniform time step")
    if j <= 0:
        raise LatticeError("bandwidth index must be positive")
    offs, w = _time_weights(dt, j)
    rho = trace.densities()
    M = len(trace)
    out = []
    for t in range(M):
        src = np.clip(t - offs, 0, M - 1)
        mix = np.tensordot(w, rho[src], axes=1)
        out.append(GridMeasure.normalized(trace.lattice, mix))
    return FlowTrace(trace.times.copy(), out)


# ---------------------------------------------------------------------------
# moments and dilations


def second_moment(group: StratifiedAlgebra, mu: GridMeasure, backend="box") -> float:
    """``int d(x, 0)^2 d mu`` by nodal quadrature."""
    from .group_core import box_norm, cc_distance

    x = mu.lattice.coords()
    if isinstance(backend, str):
        if backend != "box":
            raise LatticeError(f"unknown distance backend {backend!r}")
        d = box_norm(group, None, x)
    else:
        d = cc_distance(group, backend, x, np.zeros((x.shape[0], group.n)))
    return float(np.sum(d * d * mu.density) * mu.lattice.cellvol)


def pushforward_dilation(group: StratifiedAlgebra, mu: GridMeasure, lam: float) -> GridMeasure:
    """``(delta_lam)_# mu`` represented on the dilated lattice."""
    if lam <= 0:
        raise LatticeError("dilation factor must be positive")
    scale = float(lam) ** group.degrees
    lat = mu.lattice
    new = Lattice(tuple(np.asarray(lat.lower) * scale), tuple(np.asarray(lat.upper) * scale), lat.counts)
    rho = mu.density / float(lam) ** group.homogeneous_dimension
    return GridMeasure.normalized(new, rho)


# ---------------------------------------------------------------------------
# serialization


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_measure(mu: GridMeasure, path: str | os.PathLike, fmt: str = "bin") -> Path:
    """Write density values plus a ``<path>.json`` metadata sidecar.

    ``bin`` is little-endian float64; ``csv`` has one value per line.  Both
    use row-major node order.
    """
    path = Path(path)
    if fmt == "bin":
        atomic_write_bytes(path, mu.density.astype("<f8").tobytes())
    elif fmt == "csv":
        atomic_write_text(path, "".join(f"{v:.17g}\n" for v in mu.density))
    else:
        raise LatticeError(f"unknown measure format {fmt!r}")
    meta = dict(mu.lattice.to_dict(), format=fmt, dtype="<f8", renormalization=mu.renormalization)
    atomic_write_text(str(path) + ".json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_measure(path: str | os.PathLike) -> GridMeasure:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    lat = Lattice.from_dict(meta)
    if meta.get("format", "bin") == "bin":
        rho = np.frombuffer(path.read_bytes(), dtype="<f8").astype(float)
    else:
        rho = np.loadtxt(path, dtype=float, ndmin=1)
    return GridMeasure(lat, rho, renormalization=float(meta.get("renormalization", 1.0)))
