"""Stratified Lie groups in exponential coordinates.

A group is described by its layer dimensions and structure constants
``c[i, j, k]`` with ``[X_i, X_j] = sum_k c[i, j, k] X_k``.  At construction
time the Baker-Campbell-Hausdorff product is expanded symbolically (Dynkin
series truncated at the step, which is exact by nilpotency) and compiled to
vectorised numpy callables, together with the left-invariant frame
``X_i(x) = dl_x e_i``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
import sympy as sp

if TYPE_CHECKING:  # pragma: no cover
    from .lattice import Lattice

__all__ = [
    "GroupError",
    "StratifiedAlgebra",
    "BoxNormParams",
    "EpsilonMetric",
    "RiemannianEpsDistance",
    "make_group",
    "preset",
    "group_from_json",
    "multiply",
    "inverse",
    "dilate",
    "box_distance",
    "cc_distance",
    "horizontal_frame",
    "layer_frame",
    "ricci_constant",
]

PRESETS = ("r1", "r2", "r3", "h1", "h1xr")


class GroupError(ValueError):
    """Raised for invalid group descriptors or out-of-range queries."""


def _compile(exprs: Sequence[sp.Expr], args: Sequence[sp.Symbol]):
    """Compile polynomial expressions into a function of stacked coordinates.

    The returned function takes arrays of shape ``(..., len(args))`` (split
    across its positional arguments by the caller) and returns an array of
    shape ``(..., len(exprs))``.
    """
    fn = sp.lambdify(list(args), list(exprs), modules="numpy")

    def call(*arrays):
        cols = [arrays[i] for i in range(len(arrays))]
        out = fn(*cols)
        shape = np.broadcast(*cols).shape if cols else ()
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), shape) for o in out], axis=-1)

    return call


def _bracket_sym(c: np.ndarray, a: Sequence[sp.Expr], b: Sequence[sp.Expr]) -> list[sp.Expr]:
    n = len(a)
    out = [sp.Integer(0)] * n
    nz = np.argwhere(c != 0)
    for i, j, k in nz:
        coef = sp.Rational(Fraction(float(c[i, j, k])).limit_denominator(10**6))
        out[k] = out[k] + coef * a[i] * b[j]
    return out


def _dynkin_words(order: int):
    """Yield ``(coefficient, word)`` pairs of the Dynkin BCH series.

    Words are tuples over ``{0: X, 1: Y}``; the term is the right-nested
    bracket of the letters.
    """
    for total in range(1, order + 1):
        for n in range(1, total + 1):
            # compositions of `total` into n blocks, each block (r_k, s_k) with r_k + s_k >= 1
            for blocks in _blocks(total, n):
                denom = total
                word: list[int] = []
                for r, s in blocks:
                    denom *= math.factorial(r) * math.factorial(s)
                    word.extend([0] * r + [1] * s)
                coef = Fraction((-1) ** (n - 1), n * denom)
                yield coef, tuple(word)


def _blocks(total: int, n: int):
    if n == 0:
        if total == 0:
            yield ()
        return
    for size in range(1, total - (n - 1) + 1):
        for r in range(size + 1):
            for rest in _blocks(total - size, n - 1):
                yield ((r, size - r),) + rest


class StratifiedAlgebra:
    """Stratified nilpotent Lie algebra with derived group structure.

    Parameters
    ----------
    layer_dims : sequence of int
        Dimensions ``m_1, ..., m_kappa`` of the layers.
    structure : ndarray, shape (n, n, n)
        Structure constants ``c[i, j, k]`` (0-based indices).
    name : str, optional
        Label used in reports.
    """

    def __init__(self, layer_dims: Sequence[int], structure: np.ndarray, name: str = "custom"):
        dims = tuple(int(m) for m in layer_dims)
        if not dims or any(m <= 0 for m in dims):
            raise GroupError(f"layer dimensions must be positive integers, got {layer_dims!r}")
        n = sum(dims)
        c = np.asarray(structure, dtype=float)
        if c.shape != (n, n, n):
            raise GroupError(f"structure constants must have shape {(n, n, n)}, got {c.shape}")
        self.name = name
        self.layer_dims = dims
        self.step = len(dims)
        self.n = n
        self.structure = c
        self.degrees = np.concatenate([np.full(m, i + 1) for i, m in enumerate(dims)])
        self.layer_offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.homogeneous_dimension = int(sum((i + 1) * m for i, m in enumerate(dims)))
        self._validate()
        self._build_tables()

    # ------------------------------------------------------------------ checks
    def _validate(self) -> None:
        c, d = self.structure, self.degrees
        if not np.allclose(c, -np.transpose(c, (1, 0, 2)), atol=1e-12):
            bad = np.argwhere(np.abs(c + np.transpose(c, (1, 0, 2))) > 1e-12)[0]
            i, j, k = (int(v) + 1 for v in bad)
            raise GroupError(
                f"antisymmetry violated: c^{k}_{{{i}{j}}} = {c[i-1, j-1, k-1]} but "
                f"c^{k}_{{{j}{i}}} = {c[j-1, i-1, k-1]}"
            )
        for i, j, k in np.argwhere(np.abs(c) > 1e-12):
            if d[k] != d[i] + d[j]:
                raise GroupError(
                    f"grading violated: [X_{i+1}, X_{j+1}] has a component on X_{k+1} "
                    f"(degrees {d[i]} + {d[j]} != {d[k]})"
                )
        # Jacobi: [X_a,[X_b,X_e]] + [X_b,[X_e,X_a]] + [X_e,[X_a,X_b]] = 0
        # inner[b, e, :] = [X_b, X_e]; outer term via contraction with c
        jac = (
            np.einsum("bek,akl->abel", c, c)
            + np.einsum("eak,bkl->abel", c, c)
            + np.einsum("abk,ekl->abel", c, c)
        )
        if np.max(np.abs(jac), initial=0.0) > 1e-10:
            a, b, e, _ = np.argwhere(np.abs(jac) > 1e-10)[0]
            raise GroupError(f"Jacobi identity fails on (X_{a+1}, X_{b+1}, X_{e+1})")
        # bracket generation: V_i = [V_1, V_{i-1}]
        off = self.layer_offsets
        for layer in range(1, self.step):
            lo, hi = off[layer], off[layer + 1]
            plo, phi = off[layer - 1], off[layer]
            vecs = c[0:off[1], plo:phi, lo:hi].reshape(-1, hi - lo)
            rank = np.linalg.matrix_rank(vecs, tol=1e-10) if vecs.size else 0
            if rank != hi - lo:
                raise GroupError(
                    f"first layer is not bracket-generating: [V_1, V_{layer}] spans a "
                    f"{rank}-dimensional subspace of V_{layer + 1} (dim {hi - lo})"
                )

    # ---------------------------------------------------------------- symbolic
    def _build_tables(self) -> None:
        n = self.n
        xs = sp.symbols(f"x0:{n}", real=True)
        ys = sp.symbols(f"y0:{n}", real=True)
        z = [sp.Integer(0)] * n
        cache: dict[tuple[int, ...], list[sp.Expr]] = {}

        def nested(word: tuple[int, ...]) -> list[sp.Expr]:
            if word in cache:
                return cache[word]
            if len(word) == 1:
                res = list(xs) if word[0] == 0 else list(ys)
            else:
                head = list(xs) if word[0] == 0 else list(ys)
                res = _bracket_sym(self.structure, head, nested(word[1:]))
            cache[word] = res
            return res

        for coef, word in _dynkin_words(self.step):
            if len(word) > 1 and word[-1] == word[-2]:
                continue  # innermost bracket [X, X] or [Y, Y] vanishes
            term = nested(word)
            q = sp.Rational(coef.numerator, coef.denominator)
            z = [zi + q * ti for zi, ti in zip(z, term)]
        z = [sp.expand(zi) for zi in z]
        self.product_polynomials = tuple(z)
        self._mul = _compile(z, list(xs) + list(ys))
        # frame: column i of d/dy (x * y) at y = 0 is X_i(x)
        jac = [[sp.expand(sp.diff(z[k], ys[i]).subs({y: 0 for y in ys})) for k in range(n)] for i in range(n)]
        self.frame_polynomials = tuple(tuple(row) for row in jac)
        flat = [e for row in jac for e in row]
        self._frame = _compile(flat, list(xs))
        self._frame_is_constant = all(sp.sympify(e).is_number for e in flat)
        self._xs = xs

    # --------------------------------------------------------------- numerics
    def product(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1] != self.n or y.shape[-1] != self.n:
            raise GroupError(f"points must have {self.n} coordinates")
        args = [x[..., i] for i in range(self.n)] + [y[..., i] for i in range(self.n)]
        return self._mul(*args)

    def frame(self, x: np.ndarray) -> np.ndarray:
        """All left-invariant fields at ``x``: shape ``(..., n, n)``, row i = X_i(x)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise GroupError(f"points must have {self.n} coordinates")
        out = self._frame(*[x[..., i] for i in range(self.n)])
        return out.reshape(x.shape[:-1] + (self.n, self.n))

    def bracket(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.einsum("...i,...j,ijk->...k", a, b, self.structure)

    def layer_slice(self, i: int) -> slice:
        if not 1 <= i <= self.step:
            raise GroupError(f"layer index {i} out of range 1..{self.step}")
        return slice(int(self.layer_offsets[i - 1]), int(self.layer_offsets[i]))

    @property
    def m1(self) -> int:
        return self.layer_dims[0]

    @property
    def is_commutative(self) -> bool:
        return not np.any(self.structure)

    def __repr__(self) -> str:
        return f"StratifiedAlgebra({self.name!r}, layers={self.layer_dims}, Q={self.homogeneous_dimension})"


# ---------------------------------------------------------------------------
# construction


def make_group(layers: Sequence[int], brackets: Iterable[dict] | None = None, name: str = "custom") -> StratifiedAlgebra:
    """Build and validate a group from layer dimensions and bracket entries.

    ``brackets`` holds dicts ``{"i", "j", "k", "c"}`` with 1-based indices
    meaning ``[X_i, X_j]`` has coefficient ``c`` on ``X_k``.  Entries given
    for a single ordering are extended by antisymmetry; entries given for
    both orderings must agree with antisymmetry.
    """
    n = int(sum(layers))
    c = np.zeros((n, n, n))
    given = np.zeros((n, n, n), dtype=bool)
    for entry in brackets or ():
        try:
            i, j, k = int(entry["i"]) - 1, int(entry["j"]) - 1, int(entry["k"]) - 1
            val = float(entry["c"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GroupError(f"malformed bracket entry {entry!r}") from exc
        if not (0 <= i < n and 0 <= j < n and 0 <= k < n):
            raise GroupError(f"bracket index out of range in {entry!r}")
        if i == j and val != 0:
            raise GroupError(f"antisymmetry violated: [X_{i+1}, X_{i+1}] must vanish")
        c[i, j, k] += val
        given[i, j, k] = True
    for i, j, k in np.argwhere(given):
        if not given[j, i, k]:
            c[j, i, k] = -c[i, j, k]
    return StratifiedAlgebra(layers, c, name=name)


def preset(name: str) -> StratifiedAlgebra:
    """Built-in groups: ``r1``, ``r2``, ``r3``, ``h1`` (Heisenberg), ``h1xr``."""
    key = name.lower()
    if key in ("r1", "r2", "r3"):
        return make_group([int(key[1])], [], name=key)
    if key == "h1":
        return make_group([2, 1], [{"i": 1, "j": 2, "k": 3, "c": 1.0}], name="h1")
    if key == "h1xr":
        return make_group([3, 1], [{"i": 1, "j": 2, "k": 4, "c": 1.0}], name="h1xr")
    raise GroupError(f"unknown group preset {name!r}; available: {', '.join(PRESETS)}")


def group_from_json(spec: str | dict) -> StratifiedAlgebra:
    """Group from a preset name or a ``{"layers": [...], "brackets": [...]}`` descriptor."""
    if isinstance(spec, str):
        spec = spec.strip()
        if spec.startswith("{"):
            spec = json.loads(spec)
        else:
            return preset(spec)
    if "preset" in spec:
        return preset(spec["preset"])
    if "layers" not in spec:
        raise GroupError("custom group descriptor needs a 'layers' list")
    return make_group(spec["layers"], spec.get("brackets", []), name=spec.get("name", "custom"))


# ---------------------------------------------------------------------------
# group operations


def multiply(g: StratifiedAlgebra, x, y) -> np.ndarray:
    return g.product(x, y)


def inverse(g: StratifiedAlgebra, x) -> np.ndarray:
    return -np.asarray(x, dtype=float)


def dilate(g: StratifiedAlgebra, lam: float, x) -> np.ndarray:
    if lam < 0:
        raise GroupError(f"dilation factor must be nonnegative, got {lam}")
    return np.asarray(x, dtype=float) * float(lam) ** g.degrees


@dataclass(frozen=True)
class BoxNormParams:
    """Layer weights of the homogeneous box norm; ``c[0]`` must be 1."""

    c: tuple[float, ...]

    def __post_init__(self):
        if not self.c or self.c[0] != 1.0:
            raise GroupError("box norm needs c_1 = 1")
        if any(ci <= 0 or ci > 1 for ci in self.c):
            raise GroupError("box norm constants must lie in (0, 1]")

    @classmethod
    def default(cls, g: StratifiedAlgebra) -> "BoxNormParams":
        return cls(tuple([1.0] * g.step))


def box_norm(g: StratifiedAlgebra, params: BoxNormParams | None, x) -> np.ndarray:
    params = params or BoxNormParams.default(g)
    if len(params.c) != g.step:
        raise GroupError(f"box norm needs {g.step} constants, got {len(params.c)}")
    x = np.asarray(x, dtype=float)
    parts = []
    for i in range(1, g.step + 1):
        block = x[..., g.layer_slice(i)]
        parts.append(params.c[i - 1] * np.linalg.norm(block, axis=-1) ** (1.0 / i))
    return np.max(np.stack(parts, axis=-1), axis=-1)


def box_distance(g: StratifiedAlgebra, params: BoxNormParams | None, x, y) -> np.ndarray:
    """``d_inf(x, y) = max_i c_i |layer_i(y^{-1} x)|^{1/i}``."""
    return box_norm(g, params, g.product(-np.asarray(y, dtype=float), x))


def horizontal_frame(g: StratifiedAlgebra, x) -> np.ndarray:
    """Coefficient rows of ``X_1..X_{m1}`` at ``x``: shape ``(..., m1, n)``."""
    return g.frame(x)[..., : g.m1, :]


def layer_frame(g: StratifiedAlgebra, x, i: int) -> np.ndarray:
    return g.frame(x)[..., g.layer_slice(i), :]


# ---------------------------------------------------------------------------
# Riemannian approximation


def ricci_constant(g: StratifiedAlgebra) -> float:
    """``K`` with ``Ric_1 >= -K`` for the metric making ``X_1..X_n`` orthonormal.

    Uses the Ricci formula for nilpotent metric Lie algebras,
    ``Ric(x, y) = -1/2 sum_i <[x,e_i],[y,e_i]> + 1/4 sum_ij <[e_i,e_j],x><[e_i,e_j],y>``.
    """
    c = g.structure
    ric = -0.5 * np.einsum("aik,bik->ab", c, c) + 0.25 * np.einsum("ija,ijb->ab", c, c)
    lam = float(np.linalg.eigvalsh(ric).min())
    return max(-lam, 0.0)


@dataclass
class EpsilonMetric:
    """The metric ``g_eps`` making ``eps^{d(i)-1} X_i`` orthonormal."""

    group: StratifiedAlgebra
    eps: float
    K: float | None = None
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.eps <= 0:
            raise GroupError(f"eps must be positive, got {self.eps}")
        # squared length of X_i is eps^{2(1 - d(i))}: the diagonal of D_eps
        self.weights = self.eps ** (2.0 * (1 - self.group.degrees))
        if self.K is None:
            self.K = ricci_constant(self.group)

    def norm2(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Squared ``g_eps`` length of coordinate vectors ``u`` based at ``x``."""
        frame = self.group.frame(x)  # rows X_i(x)
        # u = sum_i a_i X_i(x)  ->  a = u F^{-1}
        a = np.linalg.solve(np.swapaxes(frame, -1, -2), u[..., None])[..., 0]
        return np.sum(self.weights * a * a, axis=-1)


class RiemannianEpsDistance:
    """Shortest-path approximation of ``d_eps`` on a lattice graph.

    Nodes are the lattice nodes; each node links to its ``3^n - 1`` stencil
    neighbours with edge length the midpoint-rule ``g_eps`` length of the
    straight coordinate segment.
    """

    def __init__(self, group: StratifiedAlgebra, lattice: "Lattice", eps: float = 0.1):
        from scipy import sparse

        self.group = group
        self.lattice = lattice
        self.metric = EpsilonMetric(group, eps)
        coords = lattice.coords()
        shape = lattice.shape
        idx = np.arange(lattice.size).reshape(shape)
        rows, cols, vals = [], [], []
        for off in itertools.product((-1, 0, 1), repeat=group.n):
            if not any(off) or _first_nonzero(off) < 0:
                continue  # each undirected edge once
            src = [slice(max(0, -o), s - max(0, o)) for o, s in zip(off, shape)]
            dst = [slice(max(0, o), s - max(0, -o)) for o, s in zip(off, shape)]
            a = idx[tuple(src)].ravel()
            b = idx[tuple(dst)].ravel()
            pa, pb = coords[a], coords[b]
            length = np.sqrt(self.metric.norm2(0.5 * (pa + pb), pb - pa))
            rows.append(a), cols.append(b), vals.append(length)
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        n = lattice.size
        self.graph = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    def from_nodes(self, sources: np.ndarray) -> np.ndarray:
        from scipy.sparse.csgraph import dijkstra

        dist = dijkstra(self.graph, directed=False, indices=np.asarray(sources, dtype=int))
        if not np.all(np.isfinite(dist)):
            raise GroupError("lattice graph is disconnected: unreachable node")
        return dist

    def pairwise(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Distances between point sets (snapped to the nearest nodes)."""
        ix = self.lattice.nearest_node(x)
        iy = self.lattice.nearest_node(y)
        uniq, inv = np.unique(ix, return_inverse=True)
        d = self.from_nodes(uniq)
        return d[inv][:, iy]


def _first_nonzero(off) -> int:
    for o in off:
        if o:
            return o
    return 0


def cc_distance(g: StratifiedAlgebra, backend, x, y, params: BoxNormParams | None = None) -> np.ndarray:
    """Distance with backend ``"box"`` or a :class:`RiemannianEpsDistance`.

    The box backend returns ``d_inf``, equivalent to the Carnot-Caratheodory
    distance up to an unspecified bi-Lipschitz factor.
    """
    if isinstance(backend, str):
        if backend != "box":
            raise GroupError(f"unknown distance backend {backend!r}")
        return box_distance(g, params, x, y)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if not (backend.lattice.contains(x).all() and backend.lattice.contains(y).all()):
        raise GroupError("point outside the lattice box")
    ix = backend.lattice.nearest_node(x)
    iy = backend.lattice.nearest_node(y)
    uniq, inv = np.unique(ix, return_inverse=True)
    d = backend.from_nodes(uniq)
    return d[inv, iy]
