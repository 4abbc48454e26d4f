import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carnot_flow.functionals import entropy, stencil_interior
from carnot_flow.group_core import preset
from carnot_flow.heat_engine import (
    HeatError,
    assemble_eps_laplacian,
    assemble_sublaplacian,
    discrete_delta,
    heat_solve,
    heat_step,
    kernel_estimate,
    kernel_report,
    semigroup_apply,
    stability_bound,
)
from carnot_flow.lattice import Lattice, discretize


@pytest.fixture(scope="module")
def h1_op():
    g = preset("h1")
    return assemble_sublaplacian(g, Lattice.for_group(g, 0.25, [2.0, 2.0, 1.5]))


def _interior(op):
    # nodes whose whole translation stencil stays in the box
    return stencil_interior(op.group, op.lattice)


def test_sublaplacian_on_polynomials(h1_op):
    x = h1_op.lattice.coords()
    inner = _interior(h1_op)
    assert np.max(np.abs(h1_op.apply(x[:, 0])[inner])) <= 1e-12
    assert np.allclose(h1_op.apply(x[:, 0] ** 2)[inner], 2.0, atol=1e-10)
    assert np.max(np.abs(h1_op.apply(x[:, 2])[inner])) <= 1e-12
    # X1^2 + X2^2 applied symbolically to x3^2 gives (x1^2 + x2^2) / 2
    assert np.allclose(h1_op.apply(x[:, 2] ** 2)[inner], 0.5 * (x[inner, 0] ** 2 + x[inner, 1] ** 2), atol=1e-9)


def test_flat_operator_is_five_point_laplacian(r2):
    lat = Lattice.symmetric([1.0, 1.0], [11, 11])
    op = assemble_sublaplacian(r2, lat)
    f = np.random.default_rng(0).random(lat.shape)
    h = lat.spacing[0]
    ref = (f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4 * f[1:-1, 1:-1]) / h**2
    assert np.allclose(op.apply(f.ravel()).reshape(lat.shape)[1:-1, 1:-1], ref, atol=1e-12)


def test_operator_symmetric_and_conservative(h1_op):
    A = h1_op.matrix
    assert abs(A - A.T).max() <= 1e-12
    f = np.random.default_rng(1).random(h1_op.lattice.size)
    assert abs(h1_op.boundary_flux(f)) <= 1e-10


def test_eps_laplacian_limits(h1):
    lat = Lattice.for_group(h1, 0.25, [1.0, 1.0, 1.0])
    L0 = assemble_eps_laplacian(h1, lat, 0.0).matrix
    L = assemble_sublaplacian(h1, lat).matrix
    assert abs(L0 - L).max() <= 1e-12


def _centred_box(lat, w):
    return discretize(lat, lambda x: np.all(np.abs(x) <= w, axis=-1).astype(float))


def test_heat_trace_mass_and_entropy(h1_op):
    mu0 = _centred_box(h1_op.lattice, [0.5, 0.5, 0.375])
    tr = heat_solve(h1_op, mu0, 0.1, frames=6)
    assert all(abs(m.mass - 1) <= 1e-9 for m in tr.measures)
    ents = [entropy(m) for m in tr.measures]
    assert all(b <= a + 1e-12 for a, b in zip(ents, ents[1:]))


def test_line_heat_matches_gaussian(r1):
    lat = Lattice.for_group(r1, 1 / 64, [6.0])
    s0, T = 0.1, 0.25
    mu0 = discretize(lat, lambda x: np.exp(-x[:, 0] ** 2 / (2 * s0)))
    tr = heat_solve(assemble_sublaplacian(r1, lat), mu0, T, frames=2)
    x = lat.coords()[:, 0]
    exact = np.exp(-x**2 / (2 * (s0 + 2 * T))) / math.sqrt(2 * math.pi * (s0 + 2 * T))
    l1 = np.sum(np.abs(tr.measures[-1].density - exact)) * lat.cellvol
    assert l1 <= 0.01


def test_implicit_and_explicit_agree(r1):
    lat = Lattice.symmetric([4.0], [161])
    op = assemble_sublaplacian(r1, lat)
    mu0 = discretize(lat, lambda x: np.exp(-x[:, 0] ** 2))
    a = heat_solve(op, mu0, 0.2, frames=3).measures[-1].density
    b = heat_solve(op, mu0, 0.2, dt=1e-4, scheme="implicit", frames=3).measures[-1].density
    assert np.sum(np.abs(a - b)) * lat.cellvol <= 1e-3


def test_explicit_step_beyond_bound_rejected(h1_op):
    with pytest.raises(HeatError):
        heat_step(h1_op, np.ones(h1_op.lattice.size), 2 * stability_bound(h1_op))


def test_semigroup_identities(h1_op):
    f = np.random.default_rng(2).random(h1_op.lattice.size)
    assert np.array_equal(semigroup_apply(h1_op, f, 0.0), f)
    one = semigroup_apply(h1_op, np.ones_like(f), 0.3)
    assert np.allclose(one, 1.0, atol=1e-9)


@given(st.floats(0.01, 0.2), st.floats(0.01, 0.2))
def test_semigroup_property(s, t):
    g = preset("h1")
    op = assemble_sublaplacian(g, Lattice.for_group(g, 0.5, [2.0, 2.0, 1.0]))
    f = np.cos(op.lattice.coords() @ np.array([1.0, 0.5, 2.0]))
    two = semigroup_apply(op, semigroup_apply(op, f, s), t)
    one = semigroup_apply(op, f, s + t)
    assert np.max(np.abs(two - one)) <= 1e-6


def test_balanced_delta_excites_both_parity_classes(h1_op):
    rho, _ = discrete_delta(h1_op)
    lat = h1_op.lattice
    assert np.sum(rho) * lat.cellvol == pytest.approx(1.0, abs=1e-12)
    idx = np.array(np.unravel_index(np.arange(lat.size), lat.shape))
    parity = (idx[2] + idx[0] * idx[1]) % 2
    assert np.sum(rho[parity == 0]) > 0 and np.sum(rho[parity == 1]) > 0


def test_kernel_report_on_small_box():
    g = preset("h1")
    op = assemble_sublaplacian(g, Lattice.for_group(g, 0.125, [2.0, 2.0, 2.5]))
    rep = kernel_report(op, 0.05)
    assert rep["mass_err"] <= 1e-6
    assert rep["symmetry_err"] <= 1e-3
    assert rep["scaling_err"] <= 0.05
    env = rep["envelope"]
    assert 0 < env["lower_C"] <= env["upper_C"] < math.inf


def test_kernel_below_resolvable_time_rejected(h1_op):
    with pytest.raises(HeatError, match="resolvable"):
        kernel_estimate(h1_op, 1e-4)
