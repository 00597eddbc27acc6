from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riemstab import system as S
from riemstab.discretization import Grid, assemble_laplacian
from riemstab.errors import BlowUp, MaxIterExceeded, SingularJacobian
from riemstab.geometry import make_chart

TORUS = make_chart("flat_torus")


@pytest.fixture(scope="module")
def torus32():
    g = Grid.uniform(TORUS, 32)
    return g, assemble_laplacian(g, TORUS.metric_field())


@pytest.mark.parametrize("name", sorted(S.NONLINEARITY_PRESETS))
def test_jacobians_match_finite_differences(name):
    nl = S.make_nonlinearity(name)
    assert S.jacobian_defect(nl, S.sample_states(nl.m, count=100, seed=1)) <= 1e-6


def test_double_well_is_minus_gradient_of_potential():
    nl = S.gradient_double_well(beta=0.7)
    u = S.sample_states(2, count=50, seed=2)
    step = 1e-6
    for j in range(2):
        e = np.zeros((2, 1))
        e[j] = step
        dW = (nl.potential(u + e) - nl.potential(u - e)) / (2 * step)
        np.testing.assert_allclose(nl.H(u)[j], -dW, atol=1e-7)


def test_bose_values():
    nl = S.bose()
    u = np.array([[2.0], [3.0]])
    np.testing.assert_allclose(nl.H(u)[:, 0], [-18.0, -12.0])
    np.testing.assert_allclose(nl.DH(u)[:, :, 0], [[-9.0, -12.0], [-12.0, -4.0]])


@pytest.mark.parametrize("name", ["bose", "allen_cahn_scalar", "gradient_double_well", "linear_symmetric"])
def test_symmetric_presets(name):
    ok, asym = S.check_symmetric(S.make_nonlinearity(name), S.sample_states(S.make_nonlinearity(name).m, count=1000))
    assert ok and asym <= 1e-10


def test_asymmetric_linear_reports_unit_asymmetry():
    ok, asym = S.check_symmetric(S.linear([[0.0, 1.0], [2.0, 0.0]]), S.sample_states(2))
    assert not ok and asym == 1.0


def test_coupling_reports():
    states = S.sample_states(2, box=(0.1, 2.0), count=100)
    rep = S.check_coupling(S.bose(), states)
    assert rep.ok
    u, v = states
    assert rep.products[(0, 1)] == pytest.approx(np.min(4 * u**2 * v**2))
    decoupled = S.linear_symmetric(np.diag([-1.0, -2.0]))
    assert S.check_coupling(decoupled, states).flagged == [(0, 1), (1, 0)]
    assert S.check_coupling(S.allen_cahn_scalar(), S.sample_states(1)).ok
    # literal reading: i = j demands (d_i H_i)^2 > 0
    swap = S.linear_symmetric([[0.0, 1.0], [1.0, 0.0]])
    assert S.check_coupling(swap, states).ok
    assert S.check_coupling(swap, states, mode="all-pairs").flagged == [(0, 0), (1, 1)]


def test_residual_cases(torus32):
    g, lap = torus32
    assert np.all(S.residual(lap, S.allen_cahn_scalar(), np.ones((1,) + g.shape)) == 0.0)
    assert np.all(S.residual(lap, S.bose(), np.zeros((2,) + g.shape)) == 0.0)
    x = g.points[..., 0]
    r = S.residual(lap, S.zero(1), np.sin(x)[None])
    assert np.abs(r[0] - np.sin(x)).max() <= (2 * np.pi / 32) ** 2 / 12 * 1.01


def test_newton_converges_to_constant_root(torus32):
    g, lap = torus32
    u, rep = S.newton_solve(lap, S.allen_cahn_scalar(), np.full((1,) + g.shape, 0.9))
    assert rep.converged and rep.residual <= 1e-9
    assert np.abs(u - 1.0).max() <= 1e-9
    # reported and recomputed residual agree
    assert abs(np.abs(S.residual(lap, S.allen_cahn_scalar(), u)).max() - rep.residual) <= 1e-12


def test_newton_accepts_exact_solution_without_iterating(torus32):
    g, lap = torus32
    u0 = np.ones((1,) + g.shape)
    u, rep = S.newton_solve(lap, S.allen_cahn_scalar(), u0)
    assert rep.iterations == 0 and np.array_equal(u, u0)


def test_pure_neumann_kernel_is_singular_without_pinning(torus32):
    g, lap = torus32
    u0 = (0.2 * np.sin(g.points[..., 0]))[None]
    with pytest.raises(SingularJacobian) as info:
        S.newton_solve(lap, S.zero(1), u0, pin_mean=False)
    assert info.value.state is not None
    u, rep = S.newton_solve(lap, S.zero(1), u0)
    assert rep.converged and rep.bordered[0] == [0]
    assert np.ptp(u) <= 1e-12


def test_max_iter_exceeded_carries_state(torus32):
    g, lap = torus32
    rng = np.random.default_rng(0)
    u0 = 0.3 * rng.standard_normal((1,) + g.shape)
    with pytest.raises(MaxIterExceeded) as info:
        S.newton_solve(lap, S.allen_cahn_scalar(), u0, max_iter=1)
    assert info.value.report.iterations == 1


def test_newton_translation_equivariance(torus32):
    g, lap = torus32
    nl = S.allen_cahn_scalar()
    x, y = g.points[..., 0], g.points[..., 1]
    u0 = (1.1 * np.sin(x) + 0.2 * np.cos(y))[None]
    u, _ = S.newton_solve(lap, nl, u0)
    us, _ = S.newton_solve(lap, nl, np.roll(u0, 1, axis=1))
    np.testing.assert_allclose(us, np.roll(u, 1, axis=1), atol=1e-12, rtol=0)


def test_gradient_flow_fixed_point_and_attraction(torus32):
    g, lap = torus32
    nl = S.allen_cahn_scalar()
    one = np.ones((1,) + g.shape)
    assert np.abs(S.gradient_flow(lap, nl, one, 0.1, 50) - 1.0).max() <= 1e-12
    rng = np.random.default_rng(1)
    u0 = 0.6 + 0.01 * rng.standard_normal((1,) + g.shape)
    # ODE oracle u' = u - u^3 from 0.6: u(t)^2 = 1 / (1 + (1/0.36 - 1) e^{-2t})
    t = 3.0
    u = S.gradient_flow(lap, nl, u0, 1e-3, 3000, scheme="explicit")
    assert np.mean(u) == pytest.approx((1 / (1 + (1 / 0.36 - 1) * np.exp(-2 * t))) ** 0.5, abs=2e-3)
    u = S.gradient_flow(lap, nl, u0, 0.2, 300)
    assert np.abs(u - 1.0).max() <= 1e-10


def test_gradient_flow_departs_from_unstable_constant(torus32):
    g, lap = torus32
    rng = np.random.default_rng(2)
    u0 = 1e-6 * rng.standard_normal((1,) + g.shape) + 1e-6
    u = S.gradient_flow(lap, S.allen_cahn_scalar(), u0, 0.01, 200)
    # growth factor of the constant mode close to e^{t}, t = 2
    assert np.abs(u.mean()) / np.abs(u0.mean()) == pytest.approx(np.exp(2.0), rel=0.05)


def test_explicit_step_bound_enforced(torus32):
    g, lap = torus32
    h = 2 * np.pi / 32
    assert S.explicit_dt_bound(lap) == pytest.approx(0.9 * h**2 / 4)
    with pytest.raises(ValueError):
        S.gradient_flow(lap, S.allen_cahn_scalar(), np.ones((1,) + g.shape), h**2, 1, scheme="explicit")


def test_blowup_detected(torus32):
    g, lap = torus32
    nl = S.linear_symmetric([[5.0]])
    with pytest.raises(BlowUp):
        S.gradient_flow(lap, nl, np.ones((1,) + g.shape), 0.5, 200, blowup=1e3)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), beta=st.floats(0.5, 2.0))
def test_energy_nonincreasing_along_flow(seed, beta):
    g = Grid.uniform(TORUS, 16)
    lap = assemble_laplacian(g, TORUS.metric_field())
    nl = S.gradient_double_well(beta)
    u = S.initial_data(g, 2, "random", seed=seed)
    e = S.energy(lap, nl, u)
    for _ in range(5):
        u = S.gradient_flow(lap, nl, u, 0.05, 4)
        e_new = S.energy(lap, nl, u)
        assert e_new <= e + 1e-12 * (1 + abs(e))
        e = e_new


def test_initial_data_presets(tmp_path):
    from riemstab.discretization import write_binary

    g = Grid.uniform(TORUS, 8)
    c = S.initial_data(g, 2, "constant", value=[1.0, -2.0])
    assert np.all(c[0] == 1.0) and np.all(c[1] == -2.0)
    a, b = S.initial_data(g, 2, "random", seed=5), S.initial_data(g, 2, "random", seed=5)
    assert np.array_equal(a, b)
    write_binary(a, tmp_path / "u.bin")
    assert np.array_equal(S.initial_data(g, 2, "file", path=tmp_path / "u.bin"), a)
    assert S.initial_data(g, 1, "bump", amplitude=1.0).max() <= 1.0
