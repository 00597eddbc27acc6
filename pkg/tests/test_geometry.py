"""Metric calculus against an independent symbolic oracle and structural invariants."""

from __future__ import annotations

import numpy as np
import pytest
import sympy as sy
from hypothesis import given, settings
from hypothesis import strategies as st

from riemstab import geometry as geo
from riemstab.errors import NonPositiveDefinite

th, ph, s, r = sy.symbols("theta phi s r", real=True)
x0, x1, x2 = sy.symbols("x0 x1 x2", real=True)


def symbolic_christoffel(g, coords):
    n = len(coords)
    ginv = g.inv()
    return [
        [
            [
                sy.simplify(
                    sum(
                        ginv[k, h] * (sy.diff(g[h, j], coords[i]) + sy.diff(g[i, h], coords[j]) - sy.diff(g[i, j], coords[h]))
                        for h in range(n)
                    )
                    / 2
                )
                for j in range(n)
            ]
            for i in range(n)
        ]
        for k in range(n)
    ]


def symbolic_ricci(g, coords):
    n = len(coords)
    G = symbolic_christoffel(g, coords)
    R = sy.zeros(n, n)
    for i in range(n):
        for j in range(n):
            R[i, j] = sy.simplify(
                sum(sy.diff(G[k][i][j], coords[k]) - sy.diff(G[k][i][k], coords[j]) for k in range(n))
                + sum(G[k][k][l] * G[l][i][j] - G[k][j][l] * G[l][i][k] for k in range(n) for l in range(n))
            )
    return G, R


# (preset params, symbolic metric, coordinates, sampling box)
CASES = {
    "sphere": (
        {"radius": 1.3},
        sy.diag(1.69, 1.69 * sy.sin(th) ** 2),
        (th, ph),
        [(0.3, np.pi - 0.3), (0, 2 * np.pi)],
    ),
    "revolution_torus": (
        {"major": 2.0, "minor": 0.7},
        sy.diag(1, (2 + sy.Rational(7, 10) * sy.cos(s / sy.Rational(7, 10))) ** 2),
        (s, ph),
        [(0, 2 * np.pi * 0.7), (0, 2 * np.pi)],
    ),
    "sheared_torus": (
        {"shear": 0.4},
        sy.Matrix([[1, sy.Rational(2, 5)], [sy.Rational(2, 5), 1]]),
        (x0, x1),
        [(0, 2 * np.pi), (0, 2 * np.pi)],
    ),
    "flat_polar": ({}, sy.diag(1, r**2), (r, ph), [(1, 8), (0, 2 * np.pi)]),
    "flat_spherical": (
        {},
        sy.diag(1, r**2, r**2 * sy.sin(th) ** 2),
        (r, th, ph),
        [(1, 8), (0.2, np.pi - 0.2), (0, 2 * np.pi)],
    ),
}


def _points(box, count, seed):
    rng = np.random.default_rng(seed)
    return np.stack([rng.uniform(a, b, count) for a, b in box], axis=-1)


@pytest.mark.parametrize("name", sorted(CASES))
def test_christoffel_and_ricci_match_symbolic_oracle(name):
    params, g, coords, box = CASES[name]
    chart = geo.make_chart(name, **params)
    metric = chart.metric_field()
    G, R = symbolic_ricci(g, coords)
    n = len(coords)
    Gf = sy.lambdify(coords, sy.Array(G), "numpy")
    Rf = sy.lambdify(coords, R, "numpy")
    x = _points(box, 40, 1)
    gam = geo.christoffel(metric, x)
    ric = geo.ricci(metric, x)
    for p in range(len(x)):
        want_g = np.array(Gf(*x[p]), dtype=float).reshape(n, n, n)
        want_r = np.array(Rf(*x[p]), dtype=float).reshape(n, n)
        np.testing.assert_allclose(gam[p], want_g, atol=1e-11)
        np.testing.assert_allclose(ric[p], want_r, atol=1e-10)


def _symbolic_operators(g, coords, f):
    n = len(coords)
    ginv = g.inv()
    det = g.det()
    grad = [sum(ginv[i, j] * sy.diff(f, coords[j]) for j in range(n)) for i in range(n)]
    lap = sum(sy.diff(sy.sqrt(det) * grad[i], coords[i]) for i in range(n)) / sy.sqrt(det)
    G = symbolic_christoffel(g, coords)
    hess = sy.Matrix(
        n, n, lambda i, j: sy.diff(f, coords[i], coords[j]) - sum(G[k][i][j] * sy.diff(f, coords[k]) for k in range(n))
    )
    return grad, lap, hess


@pytest.mark.parametrize("name", ["sphere", "revolution_torus", "sheared_torus", "flat_polar"])
def test_gradient_laplacian_hessian_match_symbolic_oracle(name):
    params, g, coords, box = CASES[name]
    metric = geo.make_chart(name, **params).metric_field()
    a, b = coords
    f_sym = 0.8 * sy.cos(a + 2 * b + 0.3) + 0.5 * sy.cos(2 * a - b + 1.1)
    f = geo.trig_series([0.8, 0.5], [[1, 2], [2, -1]], [0.3, 1.1])
    grad, lap, hess = _symbolic_operators(g, coords, f_sym)
    grad_f = sy.lambdify(coords, grad, "numpy")
    lap_f = sy.lambdify(coords, lap, "numpy")
    hess_f = sy.lambdify(coords, hess, "numpy")
    x = _points(box, 30, 2)
    v, q = geo.gradient(metric, f, x)
    L = geo.laplace_beltrami(metric, f, x)
    H = geo.hessian(metric, f, x)
    for p in range(len(x)):
        np.testing.assert_allclose(v[p], np.array(grad_f(*x[p]), float), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(L[p], float(lap_f(*x[p])), rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(H[p], np.array(hess_f(*x[p]), float), rtol=1e-10, atol=1e-10)


def test_sphere_closed_forms():
    metric = geo.make_chart("sphere").metric_field()
    x = _points([(0.2, np.pi - 0.2), (0, 2 * np.pi)], 100, 3)
    gam = geo.christoffel(metric, x)
    t = x[:, 0]
    np.testing.assert_allclose(gam[:, 0, 1, 1], -np.sin(t) * np.cos(t), atol=1e-12)
    np.testing.assert_allclose(gam[:, 1, 0, 1], np.cos(t) / np.sin(t), atol=1e-12)
    np.testing.assert_allclose(geo.ricci(metric, x), metric.g(x), atol=1e-12)


@pytest.mark.parametrize("name", ["flat_torus", "flat_box", "sheared_torus"])
def test_flat_presets_have_exactly_zero_curvature(name):
    metric = geo.make_chart(name).metric_field()
    x = _points([(0, 1), (0, 1)], 50, 4)
    assert np.all(geo.christoffel(metric, x) == 0.0)
    assert np.all(geo.ricci(metric, x) == 0.0)


def test_revolution_torus_gaussian_curvature():
    # Ric = K g in 2D
    metric = geo.make_chart("revolution_torus").metric_field()
    x = _points([(0, 2 * np.pi), (0, 2 * np.pi)], 50, 5)
    K = metric.gaussian_curvature(x)
    np.testing.assert_allclose(geo.ricci(metric, x), K[:, None, None] * metric.g(x), atol=1e-12)
    np.testing.assert_allclose(K, np.cos(x[:, 0]) / (2 + np.cos(x[:, 0])), atol=1e-12)


def test_scaled_sphere_has_ricci_equal_metric_over_radius_squared():
    chart = geo.make_chart("sphere", radius=2.0)
    metric = chart.metric_field()
    x = _points([(0.3, 2.8), (0, 6)], 20, 6)
    np.testing.assert_allclose(geo.ricci(metric, x), metric.g(x) / 4.0, atol=1e-12)


def test_non_positive_definite_metric_rejected():
    metric = geo.ConstantMetric([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NonPositiveDefinite):
        geo.metric_inverse_det(metric, np.zeros((3, 2)))


def test_unknown_preset_is_named_in_error():
    with pytest.raises(KeyError, match="hyperbolic_disc"):
        geo.make_chart("hyperbolic_disc")


def test_periodic_axes_are_consistent():
    for name in ["flat_torus", "sheared_torus", "sphere", "revolution_torus", "flat_polar"]:
        assert geo.make_chart(name).check_periodic() <= 1e-12


# ---------------------------------------------------------------------------
# identities as properties
# ---------------------------------------------------------------------------

angles = st.floats(0.25, np.pi - 0.25)
anywhere = st.floats(0.0, 2 * np.pi)
wave = st.integers(-2, 2)
amps = st.floats(-1.5, 1.5).filter(lambda a: abs(a) > 0.1)


@settings(max_examples=40, deadline=None)
@given(name=st.sampled_from(["sphere", "revolution_torus", "sheared_torus", "flat_torus"]),
       t=angles, p=anywhere, k1=wave, k2=wave, a=amps, phase=anywhere)
def test_bochner_identity_holds_pointwise(name, t, p, k1, k2, a, phase):
    metric = geo.make_chart(name).metric_field()
    f = geo.trig_series([a, 0.4], [[k1, k2], [1, -1]], [phase, 0.2])
    x = np.array([[t, p]])
    terms = geo.bochner_terms(metric, f, x)
    scale = 1.0 + sum(abs(float(v[0])) for v in terms.values())
    assert abs(float(geo.bochner_residual(metric, f, x)[0])) <= 1e-11 * scale


@settings(max_examples=60, deadline=None)
@given(name=st.sampled_from(["sphere", "revolution_torus", "sheared_torus"]),
       t=angles, p=anywhere, k1=wave, k2=wave, a=amps, phase=anywhere)
def test_gradient_of_gradient_norm_bounded_by_hessian(name, t, p, k1, k2, a, phase):
    metric = geo.make_chart(name).metric_field()
    f = geo.trig_series([a, 0.7], [[k1, k2], [2, 1]], [phase, 0.0])
    x = np.array([[t, p]])
    _, q = geo.gradient(metric, f, x)
    if q[0] < 1e-8:
        return
    lhs = geo.grad_of_grad_norm_sq(metric, f, x)[0]
    ginv, _ = geo.metric_inverse_det(metric, x)
    rhs = geo.tensor_norm_sq(ginv, geo.hessian(metric, f, x))[0]
    assert lhs <= rhs + 1e-10 * (1 + rhs)


@settings(max_examples=40, deadline=None)
@given(t=angles, p=anywhere, k1=wave, k2=wave)
def test_christoffel_and_hessian_are_symmetric(t, p, k1, k2):
    metric = geo.make_chart("revolution_torus").metric_field()
    x = np.array([[t, p]])
    gam = geo.christoffel(metric, x)
    assert np.array_equal(gam, np.swapaxes(gam, -1, -2))
    H = geo.hessian(metric, geo.trig_series([1.0], [[k1, k2]]), x)
    assert np.array_equal(H, np.swapaxes(H, -1, -2))


def test_hessian_of_constant_and_linear_functions():
    flat = geo.make_chart("sheared_torus").metric_field()
    x = _points([(0, 6), (0, 6)], 10, 7)
    lin = geo.linear_function([0.3, -1.2], 0.5)
    assert np.all(geo.hessian(flat, lin, x) == 0.0)
    assert np.all(geo.laplace_beltrami(flat, geo.constant_function(2.0, 2), x) == 0.0)


def test_sin_x_bochner_terms_on_flat_torus():
    metric = geo.make_chart("flat_torus").metric_field()
    f = geo.trig_series([1.0], [[1.0, 0.0]], [-np.pi / 2])  # sin x
    x = _points([(0, 6), (0, 6)], 10, 8)
    t = geo.bochner_terms(metric, f, x)
    sx, cx = np.sin(x[:, 0]), np.cos(x[:, 0])
    np.testing.assert_allclose(t["hess_sq"], sx**2, atol=1e-13)
    np.testing.assert_allclose(t["grad_lap_dot_grad"], -(cx**2), atol=1e-13)
    np.testing.assert_allclose(t["half_lap_grad_sq"], sx**2 - cx**2, atol=1e-13)
    np.testing.assert_allclose(t["ric_grad_grad"], 0.0, atol=0)
