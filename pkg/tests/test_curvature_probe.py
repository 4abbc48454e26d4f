import json

import pytest

from carnot_flow import curvature_probe as cp
from carnot_flow.group_core import preset
from carnot_flow.heat_engine import HeatError, assemble_sublaplacian
from carnot_flow.lattice import Lattice


@pytest.fixture(scope="module")
def h1_table():
    g = preset("h1")
    lat = Lattice.for_group(g, 0.125, [2.0, 2.0, 1.5])
    op = assemble_sublaplacian(g, lat)
    return cp.probe_table(op, [0.02, 0.04, 0.08], cp.probe_bank(g, [1.2, 1.2, 0.9]))


@pytest.fixture(scope="module")
def r2_table():
    g = preset("r2")
    lat = Lattice.for_group(g, 0.05, [4.0, 4.0])
    op = assemble_sublaplacian(g, lat)
    return cp.probe_table(op, cp.geometric_times(0.02, 0.32), cp.probe_bank(g, [2.4, 2.4]))


def test_bank_contents():
    assert len(cp.probe_bank(preset("r2"), [1, 1])) == 1 + 2 + 3
    names = [p.fid for p in cp.probe_bank(preset("h1"), [1, 1, 1])]
    assert "x2-10x1x3*bump" in names and "x1+10x2x3*bump" in names
    with pytest.raises(cp.ProbeError):
        cp.probe_bank(preset("h1"), [1, 1])


def test_geometric_times():
    assert cp.geometric_times() == [0.02, 0.04, 0.08, 0.16, 0.32, 0.64]


def test_flat_plane_has_no_witness(r2_table):
    for K in (-1.0, 0.0):
        w, scanned = cp.be_violation_search(r2_table, K)
        assert w is None and scanned


def test_flat_plane_bound_is_tight_for_linear_data(r2_table):
    # P_t commutes with the gradient on the plane: x1*bump is linear near the origin
    r = next(r for r in r2_table if r.function_id == "x1*bump" and r.t == 0.02)
    assert r.lhs / r.pt_grad2 == pytest.approx(1.0, abs=0.02)


def test_heisenberg_witness_at_zero_and_negative_curvature(h1_table):
    for K in (0.0, -10.0):
        w, _ = cp.be_violation_search(h1_table, K)
        assert w is not None and w.margin > cp.MARGIN_GUARD
        assert w.lhs > w.rhs and w.margin == pytest.approx(w.lhs / w.rhs - 1)
        assert w.node == (0.0, 0.0, 0.0)


def test_score_functions_are_excluded_by_default(h1_table):
    _, scanned = cp.be_violation_search(h1_table, 0.0)
    assert not any(s["function_id"].startswith(cp.SCORE_ID) for s in scanned)
    _, scanned = cp.be_violation_search(h1_table, 0.0, exclude_score=False)
    assert any(s["function_id"].startswith(cp.SCORE_ID) for s in scanned)


def test_reverse_poincare_ratio_shrinks_with_time(h1_table):
    rows = sorted((r for r in h1_table if r.function_id == "x1*bump"), key=lambda r: r.t)
    ratios = [cp.reverse_poincare_ratio(r)[0] for r in rows]
    assert ratios[0] < ratios[1] < ratios[2]
    # short-time behaviour Var ~ 2t |grad f|^2
    assert ratios[0] / rows[0].t == pytest.approx(2.0, rel=0.15)
    assert ratios[2] / rows[2].t > ratios[0] / rows[0].t


def test_flat_lambda_estimate_is_one_half(r2_table):
    est = cp.lambda_estimate(r2_table)
    assert est["lambda_hat"] == pytest.approx(0.5, rel=0.02)
    assert est["min_variance"] >= 0


def test_refinement_check_roundtrip(h1_table):
    w, _ = cp.be_violation_search(h1_table, 0.0)
    rep = cp.refinement_check(w, h1_table)
    assert rep["persists"] and rep["fine_margin"] == pytest.approx(w.margin)
    with pytest.raises(cp.ProbeError):
        cp.refinement_check(cp.BEWitness(0.0, 0.5, "bump", (), 1, 1, 1), h1_table)


def test_unresolvable_time_rejected():
    g = preset("r2")
    op = assemble_sublaplacian(g, Lattice.for_group(g, 0.25, [2.0, 2.0]))
    with pytest.raises(HeatError, match="resolvable"):
        cp.probe_table(op, [1e-4], cp.probe_bank(g, [1.0, 1.0]))


def test_unsupported_bump_rejected():
    g = preset("r2")
    op = assemble_sublaplacian(g, Lattice.for_group(g, 0.25, [1.0, 1.0]))
    with pytest.raises(cp.ProbeError, match="supported"):
        cp.probe_table(op, [0.1], cp.probe_bank(g, [2.0, 2.0]))


def test_witness_file(tmp_path, h1_table):
    w, _ = cp.be_violation_search(h1_table, 0.0)
    cp.write_witness_json(tmp_path / "w.json", {0.0: w, 1.0: None})
    data = json.loads((tmp_path / "w.json").read_text())
    assert data["witnesses"]["1"] is None
    assert "inconclusive" in data["note"]
    assert data["witnesses"]["0"]["function_id"] == w.function_id
    cp.write_lambda_csv(tmp_path / "l.csv", cp.lambda_estimate(h1_table))
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "t,lambda_hat,function_id"
