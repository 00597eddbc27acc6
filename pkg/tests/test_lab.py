from __future__ import annotations

import json
import math

import numpy as np
import pytest

from riemstab import geometry as geo
from riemstab import lab
from riemstab import system as S
from riemstab.discretization import Grid, sample
from riemstab.errors import BallExceedsDomain, EmptyLevelSet, GradientBelowFloor

TORUS = geo.make_chart("flat_torus")
SPHERE = geo.make_chart("sphere")


def test_report_rejects_unknown_verdict():
    with pytest.raises(ValueError):
        lab.ExperimentReport("x", {}, [], "passed", {})


def test_jsonable_handles_numpy_and_non_finite():
    out = lab.jsonable({"a": np.float64(np.inf), "b": np.arange(2), (1, 2): np.bool_(True), "c": float("nan")})
    assert out == {"a": "inf", "b": [0, 1], "(1, 2)": True, "c": "nan"}
    json.dumps(out, allow_nan=False)


def test_report_table_and_digest_are_stable():
    rep = lab.ExperimentReport("x", {"b": 1, "a": [1.0, 2.0]}, [{"n": 1, "v": 0.5}, {"n": 2, "w": [1]}], "consistent", {})
    assert rep.table() == (["n", "v"], [[1, 0.5], [2, ""]])
    other = lab.ExperimentReport("x", {"a": [1.0, 2.0], "b": 1}, [], "consistent", {})
    assert rep.inputs_digest == other.inputs_digest


def test_fit_order_recovers_exact_power():
    h = np.array([0.4, 0.2, 0.1])
    assert lab.fit_order(h, 3.0 * h**2) == pytest.approx(2.0, abs=1e-12)
    assert math.isnan(lab.fit_order(h, [1.0, 0.0, 1.0]))


def test_interior_mask_respects_margin_and_stride():
    g = Grid.cells(SPHERE, 16)
    m = lab.interior_mask(g, 0.3, stride=2)
    assert not m[0].any() and not m[-1].any()
    assert not m[1::2].any() and not m[:, 1::2].any()
    assert lab.interior_mask(Grid.uniform(TORUS, 8), 0.3).all()


def test_bochner_sweep_torus_small():
    fns = lab.trig_test_functions(TORUS, 3, seed=1)
    rep = lab.bochner_sweep(TORUS, fns, (16, 32, 64), order_band=(1.7, 2.3))
    assert rep.verdict == "consistent"
    assert len(rep.records) == 9
    with pytest.raises(ValueError):
        lab.bochner_sweep(TORUS, fns, (16, 24, 32))


def test_bochner_sweep_flags_exact_functions():
    lin = geo.constant_function(1.0, 2)
    rep = lab.bochner_sweep(TORUS, [lin], (8, 16, 32))
    assert rep.summary["orders"] == {"const": None} or list(rep.summary["orders"].values()) == [None]
    assert rep.verdict == "consistent"


def test_laplacian_convergence_torus():
    f = geo.trig_series([1.0], [[1.0, 0.0]], [-np.pi / 2])
    minus_f = geo.trig_series([-1.0], [[1.0, 0.0]], [-np.pi / 2])
    rep = lab.laplacian_convergence(TORUS, f, minus_f, (16, 32, 64))
    assert rep.verdict == "consistent"
    assert rep.summary["C_max"] == pytest.approx(1 / 12, rel=0.02)


def test_hessian_inequality_at_a_hand_computed_point():
    # f = sin x sin y at (pi/4, pi/2): |grad f|^2 = 1/2, |grad |grad f||^2 = 1/2, |Hess f|^2 = 1
    metric = TORUS.metric_field()
    f = geo.trig_series([0.5, -0.5], [[1.0, -1.0], [1.0, 1.0]], label="sinsin")  # sin x sin y
    x = np.array([[np.pi / 4, np.pi / 2]])
    _, q = geo.gradient(metric, f, x)
    assert q[0] == pytest.approx(0.5, abs=1e-15)
    assert geo.grad_of_grad_norm_sq(metric, f, x)[0] == pytest.approx(0.5, abs=1e-14)
    ginv, _ = geo.metric_inverse_det(metric, x)
    assert geo.tensor_norm_sq(ginv, geo.hessian(metric, f, x))[0] == pytest.approx(1.0, abs=1e-14)
    rep = lab.hessian_inequality_scan(TORUS, [f], n=64)
    assert rep.verdict == "consistent" and rep.records[0]["max_excess"] <= 1e-12


def test_hessian_scan_equality_case_is_collinear():
    f = geo.trig_series([1.0], [[1.0, 0.0]], [-np.pi / 2])  # sin x on flat T^2: equality wherever cos x != 0
    rep = lab.hessian_inequality_scan(TORUS, [f], n=64)
    rec = rep.records[0]
    assert rep.verdict == "consistent"
    assert rec["equality_nodes"] == rec["nodes"] > 0
    assert rec["max_collinearity_defect"] <= 1e-6
    with pytest.raises(ValueError):
        lab.hessian_inequality_scan(TORUS, [f], eps_grad=0.0)


def test_hessian_scan_reports_offender_for_a_fake_lhs(monkeypatch):
    f = lab.trig_test_functions(TORUS, 1)[0]
    monkeypatch.setattr(geo, "grad_of_grad_norm_sq", lambda m, f, x: np.full(x.shape[:-1], 1e3))
    rep = lab.hessian_inequality_scan(TORUS, [f], n=16)
    assert rep.verdict == "violation" and rep.replay[0]["function"] == f.label


def test_liouville_small_run_and_failing_control():
    ok = lab.liouville_compact(TORUS, S.allen_cahn_scalar(), n_starts=3, n=24, controls=[0.0])
    assert ok.verdict == "consistent"
    assert ok.summary["stable_nonconstant"] == 0
    assert ok.summary["controls"][0]["mu"] == pytest.approx(-1.0, abs=1e-10)
    # the Bose zero state is degenerate (mu = 0): as a control it must be reported
    bad = lab.liouville_compact(TORUS, S.bose(), n_starts=2, n=24, controls=[[0.0, 0.0]])
    assert bad.verdict == "violation" and bad.replay == [{"control": [0.0, 0.0], "expected": "unstable"}]


def test_liouville_threaded_matches_serial():
    a = lab.liouville_compact(TORUS, S.allen_cahn_scalar(), n_starts=3, n=16, seed=4)
    b = lab.liouville_compact(TORUS, S.allen_cahn_scalar(), n_starts=3, n=16, seed=4, jobs=3)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_stability_suite_small():
    rep = lab.stability_suite(TORUS, S.gradient_double_well(1.0), n=24, family_count=40, poincare_count=10, seed=3)
    assert rep.verdict == "consistent" and rep.summary["classification"] == "stable"
    checks = [r["check"] for r in rep.records]
    assert checks.count("stability") == 40 and checks.count("poincare") == 10
    cols, _ = rep.table()
    assert cols[:6] == ["check", "seed", "index", "lhs", "rhs", "margin"]


def test_stability_suite_unstable_solution_is_inconclusive():
    rep = lab.stability_suite(
        TORUS, S.allen_cahn_scalar(), n=16, initial={"kind": "constant", "value": 0.0}, steps=1, family_count=5
    )
    assert rep.verdict == "inconclusive" and rep.summary["classification"] == "unstable"


def test_volume_growth_2d_and_inconclusive_rows():
    rep = lab.volume_growth(2, (2.0, 4.0, 8.0, 16.0))
    assert rep.verdict == "consistent"
    assert [r["conclusive"] for r in rep.records] == [True, True, True, True]
    for fac in rep.summary["factors"]:
        assert fac["factor"] == pytest.approx(4.0, rel=0.15)
    coarse = lab.volume_growth(2, (1.0, 2.0), h=0.5)
    assert coarse.verdict == "inconclusive"
    with pytest.raises(ValueError):
        lab.volume_growth(4)


def test_capacity_closed_forms():
    assert lab.radial_capacity(2, 8.0) == pytest.approx(2 * math.pi / math.log(8.0), rel=1e-3)
    assert lab.radial_capacity(3, 8.0) == pytest.approx(4 * math.pi / (1 - 1 / 8), rel=1e-2)
    assert lab.radial_capacity(2, 1.0) == math.inf


def test_capacity_inner_outer_overlap_rejected():
    g = Grid.uniform(TORUS, 8)
    from riemstab.discretization import assemble_laplacian

    lap = assemble_laplacian(g, TORUS.metric_field())
    mask = np.zeros(g.shape, bool)
    mask[0, 0] = True
    with pytest.raises(ValueError):
        lab.capacity(lap, mask, mask)


def test_annulus_capacity_on_cartesian_grid():
    chart = geo.make_chart("flat_box", lower=-12.0, upper=12.0)
    g = Grid.uniform(chart, 193)
    cap = lab.annulus_capacity(g, chart.metric_field(), (96, 96), 1.0, 8.0)
    # graph-distance discs are polygonal; close to the radial value within a few percent
    assert cap == pytest.approx(2 * math.pi / math.log(8.0), rel=0.05)
    with pytest.raises(BallExceedsDomain):
        lab.annulus_capacity(g, chart.metric_field(), (96, 96), 1.0, 13.0)


def test_parabolicity_reports():
    two = lab.parabolicity_capacity(2)
    assert two.verdict == "consistent" and two.summary["classification"] == "parabolic-consistent"
    three = lab.parabolicity_capacity(3)
    assert three.verdict == "consistent" and three.summary["limit"] == pytest.approx(4 * math.pi)


def _sphere_field(n, fn):
    g = Grid.uniform(SPHERE, n)
    return g, fn(g.points[..., 0], g.points[..., 1])


def test_equator_is_geodesic_and_latitude_is_not():
    g, v = _sphere_field(128, lambda t, p: np.cos(t))
    eq = lab.level_set_geodesic_check(g, SPHERE.metric_field(), v, 0.0, expect_geodesic=True)
    assert eq.verdict == "consistent" and eq.summary["max_defect"] <= 2e-3
    assert eq.records[0]["length"] == pytest.approx(2 * math.pi, rel=1e-2)
    lat = lab.level_set_geodesic_check(g, SPHERE.metric_field(), v, 0.5, expect_geodesic=False)
    assert lat.verdict == "consistent"
    assert lat.summary["max_defect"] == pytest.approx(1 / math.sqrt(3), rel=0.05)


def test_level_set_without_expectation_is_inconclusive():
    g, v = _sphere_field(64, lambda t, p: np.cos(t))
    assert lab.level_set_geodesic_check(g, SPHERE.metric_field(), v, 0.0).verdict == "inconclusive"


def test_straight_line_on_box_is_geodesic():
    chart = geo.make_chart("flat_box", upper=4.0)
    g = Grid.uniform(chart, 65)
    v = sample(g, geo.linear_function([1.0, 2.0]))
    rep = lab.level_set_geodesic_check(g, chart.metric_field(), v, 4.0, expect_geodesic=True)
    assert rep.summary["max_defect"] <= 1e-8


def test_level_set_errors():
    g, v = _sphere_field(64, lambda t, p: np.cos(t))
    with pytest.raises(EmptyLevelSet):
        lab.extract_level_curves(g, SPHERE.metric_field(), v, 5.0, 1e-3)
    with pytest.raises(GradientBelowFloor):
        lab.extract_level_curves(g, SPHERE.metric_field(), v, 0.0, 10.0)
    with pytest.raises(ValueError):
        lab.extract_level_curves(Grid.uniform(geo.make_chart("flat_spherical"), 8), None, np.zeros((8, 8, 8)), 0.0, 1.0)


def test_level_curves_are_unit_speed():
    g, v = _sphere_field(128, lambda t, p: np.cos(t) + 0.3 * np.sin(t) * np.cos(p))
    curves = lab.extract_level_curves(g, SPHERE.metric_field(), v, 0.1, 1e-3)
    assert curves and all(c.speed_error < 1e-3 for c in curves)
