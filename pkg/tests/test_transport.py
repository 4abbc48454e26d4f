import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from carnot_flow.functionals import horizontal_fisher
from carnot_flow.group_core import box_distance, preset
from carnot_flow.heat_engine import assemble_sublaplacian, heat_solve
from carnot_flow.lattice import FlowTrace, GridMeasure, Lattice, discretize, second_moment
from carnot_flow.transport import (
    DiscreteMeasure,
    TransportError,
    WassersteinOptions,
    cost_matrix,
    export_plan_csv,
    linearized_w2,
    metric_derivative,
    quantile_w2,
    round_plan,
    solve_exact,
    solve_sinkhorn,
    support_compress,
    wasserstein,
)


def lp_cost(a, b, C):
    n, m = C.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m : (i + 1) * m] = 1
    for j in range(m):
        A[n + j, j::m] = 1
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    return res.fun


A3 = np.array([1 / 2, 1 / 3, 1 / 6])
B3 = np.array([1 / 6, 1 / 3, 1 / 2])


def test_single_points_pay_full_cost(h1):
    x, y = np.array([[0.3, 0.1, 0.2]]), np.array([[-0.5, 0.4, 0.0]])
    C = cost_matrix(h1, "box", x, y)
    plan = solve_exact(np.ones(1), np.ones(1), C)
    assert plan.plan[0, 0] == 1.0
    assert plan.cost == pytest.approx(float(box_distance(h1, None, x[0], y[0]) ** 2))


def test_identical_measures_cost_zero(h1, rng):
    pts = rng.normal(size=(6, 3))
    C = cost_matrix(h1, "box", pts, pts)
    assert np.allclose(np.diag(C), 0)
    assert np.allclose(C, C.T, atol=1e-12)
    w = rng.random(6)
    w /= w.sum()
    assert solve_exact(w, w, C).cost == pytest.approx(0.0, abs=1e-15)


def test_flat_cost_is_squared_euclidean(r2, rng):
    a, b = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    C = cost_matrix(r2, "box", a, b)
    assert np.allclose(C, np.sum((a[:, None] - b[None]) ** 2, axis=-1))


def test_exact_matches_linear_program_on_reference_instance():
    C = np.random.default_rng(7).random((3, 3))
    plan = solve_exact(A3, B3, C)
    assert plan.cost == pytest.approx(lp_cost(A3, B3, C), abs=1e-9)
    assert plan.certified
    assert plan.row_residual <= 1e-15 and plan.col_residual <= 1e-15


@given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 10_000))
def test_exact_solver_against_highs(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(n) + 0.05, rng.random(m) + 0.05
    a, b = a / a.sum(), b / b.sum()
    C = rng.random((n, m))
    plan = solve_exact(a, b, C)
    assert plan.cost == pytest.approx(lp_cost(a, b, C), abs=1e-9)
    assert plan.certified
    assert np.all(plan.plan >= 0)


def test_exact_rejects_bad_shapes():
    with pytest.raises(TransportError):
        solve_exact(A3, B3, np.zeros((3, 2)))


def test_discrete_measure_validation():
    with pytest.raises(TransportError):
        DiscreteMeasure(np.zeros((2, 1)), [0.5, 0.5])
    with pytest.raises(TransportError):
        DiscreteMeasure([[0.0], [1.0]], [0.7, 0.7])


def test_sinkhorn_large_regularization_gives_product():
    C = np.random.default_rng(8).random((3, 3))
    res = solve_sinkhorn(A3, B3, C, reg=1e6, scaling=False)
    assert np.allclose(res.plan.plan, np.outer(A3, B3), atol=1e-6)


def test_sinkhorn_cost_monotone_and_bracket():
    C = np.random.default_rng(9).random((3, 3))
    exact = solve_exact(A3, B3, C).cost
    costs = []
    for reg in (1.0, 0.3, 0.1, 0.03, 0.01):
        res = solve_sinkhorn(A3, B3, C, reg)
        costs.append(res.plan.cost)
        assert res.lower - 1e-12 <= exact <= res.upper + 1e-12
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    fine = solve_sinkhorn(A3, B3, C, 1e-3 * np.median(C))
    assert fine.upper == pytest.approx(exact, rel=0.01)


@given(st.integers(0, 10_000))
def test_round_plan_marginals(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(4) + 0.1, rng.random(5) + 0.1
    a, b = a / a.sum(), b / b.sum()
    P = round_plan(rng.random((4, 5)), a, b)
    assert np.allclose(P.sum(1), a, atol=1e-14) and np.allclose(P.sum(0), b, atol=1e-14)
    assert np.all(P >= 0)


def test_support_compress(h1):
    lat = Lattice.for_group(h1, 0.25, [1.5, 1.5, 1.0])
    small = np.zeros(lat.size)
    small[[5, 700, 2000]] = [1.0, 2.0, 3.0]
    mu = GridMeasure.normalized(lat, small)
    d = support_compress(h1, mu, 16)
    assert np.allclose(np.sort(d.points, axis=0), np.sort(lat.coords()[[5, 700, 2000]], axis=0))
    assert d.block_diameter == 0.0
    big = discretize(lat, lambda x: np.exp(-np.sum(x**2, axis=-1)))
    dc = support_compress(h1, big, 64)
    assert len(dc) <= 64
    assert dc.weights.sum() == 1.0
    m0 = second_moment(h1, big)
    m1 = float(np.sum(dc.weights * box_distance(h1, None, dc.points, np.zeros(3)) ** 2))
    D = dc.block_diameter
    assert abs(m1 - m0) <= D * D + 2 * D * np.sqrt(m0)


def _bump1(lat, c, w=0.05):
    return discretize(lat, lambda x: np.exp(-((x[:, 0] - c) ** 2) / w))


def test_quantile_translation_exact():
    lat = Lattice.symmetric([4.0], [401])
    h = lat.spacing[0]
    mu = _bump1(lat, 0.0)
    nu = GridMeasure(lat, np.roll(mu.density, 7))
    assert np.sqrt(quantile_w2(mu, nu)) == pytest.approx(7 * h, rel=1e-12)
    assert quantile_w2(mu, mu) == 0.0


def test_quantile_w2_against_dense_quadrature():
    lat = Lattice.symmetric([3.0], [121])
    mu = _bump1(lat, -0.4, 0.3)
    nu = discretize(lat, lambda x: np.exp(-np.abs(x[:, 0] - 0.5)))
    s = (np.arange(200_000) + 0.5) / 200_000

    def q(m):
        h = lat.spacing[0]
        edges = np.concatenate([[lat.lower[0] - h / 2], lat.axes()[0] + h / 2])
        cdf = np.concatenate([[0], np.cumsum(m.density * h)])
        return np.interp(s, cdf / cdf[-1], edges)

    ref = np.mean((q(mu) - q(nu)) ** 2)
    assert quantile_w2(mu, nu) == pytest.approx(ref, rel=1e-6)


def test_wasserstein_axioms_box(h1):
    lat = Lattice.for_group(h1, 0.25, [1.5, 1.5, 1.0])
    ms = [discretize(lat, lambda x, c=c: np.exp(-np.sum((x - c) ** 2, axis=-1) / 0.1)) for c in ([0.3, 0, 0], [-0.3, 0.2, 0], [0, -0.3, 0.2])]
    opts = WassersteinOptions(backend="box", max_points=128, uncertainty=False)
    w = lambda a, b: wasserstein(h1, a, b, opts).value
    assert w(ms[0], ms[0]) == pytest.approx(0.0, abs=1e-12)
    assert w(ms[0], ms[1]) == pytest.approx(w(ms[1], ms[0]), rel=1e-9)
    assert w(ms[0], ms[2]) <= (w(ms[0], ms[1]) + w(ms[1], ms[2])) * 1.10


def test_near_dirac_bumps_give_point_distance(r2):
    lat = Lattice.symmetric([2.0, 2.0], [81, 81])
    x, y = np.array([-0.5, 0.25]), np.array([0.5, -0.25])
    a = discretize(lat, lambda z: np.exp(-np.sum((z - x) ** 2, axis=-1) / 0.002))
    b = discretize(lat, lambda z: np.exp(-np.sum((z - y) ** 2, axis=-1) / 0.002))
    res = wasserstein(r2, a, b, WassersteinOptions(backend="box", max_points=256, uncertainty=False))
    assert res.value == pytest.approx(np.linalg.norm(x - y), abs=0.05)


def test_sinkhorn_backend_reports_bracket(r2):
    lat = Lattice.symmetric([1.0, 1.0], [21, 21])
    a = discretize(lat, lambda z: np.exp(-np.sum((z - 0.3) ** 2, axis=-1) / 0.05))
    b = discretize(lat, lambda z: np.exp(-np.sum((z + 0.3) ** 2, axis=-1) / 0.05))
    res = wasserstein(r2, a, b, WassersteinOptions(backend="sinkhorn", max_points=64, uncertainty=False))
    lo, hi = res.bracket
    assert lo <= res.value <= hi + 1e-12


def test_linearized_matches_quantile_for_nearby_measures():
    g = preset("r1")
    lat = Lattice.symmetric([4.0], [401])
    mu = _bump1(lat, 0.0, 0.5)
    nu = _bump1(lat, 0.02, 0.5)
    assert linearized_w2(g, mu, nu) == pytest.approx(quantile_w2(mu, nu), rel=0.02)


def test_metric_derivative_translation_and_constant():
    g = preset("r1")
    lat = Lattice.symmetric([4.0], [801])
    v = 0.8
    times = np.linspace(0, 0.5, 11)
    tr = FlowTrace(times, [_bump1(lat, v * t, 0.1) for t in times])
    opts = WassersteinOptions(backend="quantile")
    assert metric_derivative(g, tr, 5, opts) == pytest.approx(v, rel=0.05)
    const = FlowTrace(times, [tr.measures[0]] * 11)
    assert metric_derivative(g, const, 5, opts) == 0.0
    with pytest.raises(TransportError):
        metric_derivative(g, tr, 0, opts)


def test_heat_metric_derivative_bounded_by_fisher():
    g = preset("r1")
    lat = Lattice.symmetric([6.0], [601])
    mu0 = discretize(lat, lambda x: np.exp(-x[:, 0] ** 2 / 0.2) + np.exp(-(x[:, 0] - 1) ** 2 / 0.1))
    tr = heat_solve(assemble_sublaplacian(g, lat), mu0, 0.4, frames=21)
    opts = WassersteinOptions(backend="quantile")
    for k in range(5, 16):
        md = metric_derivative(g, tr, k, opts)
        assert md**2 <= horizontal_fisher(g, tr.measures[k]) * 1.10


def test_plan_csv_export(tmp_path):
    C = np.random.default_rng(2).random((3, 3))
    plan = solve_exact(A3, B3, C)
    export_plan_csv(plan, tmp_path / "plan.csv")
    rows = (tmp_path / "plan.csv").read_text().splitlines()
    assert rows[0] == "a,b,mass"
    assert sum(float(r.split(",")[2]) for r in rows[1:]) == pytest.approx(1.0, abs=1e-15)
