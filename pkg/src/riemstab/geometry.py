"""Pointwise metric calculus on a single coordinate chart.

Every metric preset carries hand-written first and second partial
derivatives, so Christoffel symbols, Ricci curvature and the Bochner
terms below are exact up to floating point.  All functions are
vectorised: a point argument of shape ``(..., n)`` yields results with
the same leading shape.

Index conventions
-----------------
``dg[..., k, i, j]``       = d_k g_ij
``d2g[..., k, l, i, j]``   = d_k d_l g_ij
``gamma[..., k, i, j]``    = Gamma^k_ij
``dgamma[..., l, k, i, j]`` = d_l Gamma^k_ij
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NonPositiveDefinite

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class Metric:
    """Base class: a metric on R^n given in closed form with its partials."""

    dim: int
    flat: bool = False

    def g(self, x):
        raise NotImplementedError

    def dg(self, x):
        raise NotImplementedError

    def d2g(self, x):
        raise NotImplementedError


class ConstantMetric(Metric):
    """A constant symmetric positive definite matrix, e.g. c * identity."""

    flat = True

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("metric matrix must be square")
        if not np.array_equal(matrix, matrix.T):
            raise ValueError("metric matrix must be symmetric")
        self.matrix = matrix
        self.dim = matrix.shape[0]

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.matrix, x.shape[:-1] + (self.dim, self.dim)).copy()

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def d2g(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 4)


class RoundSphere(Metric):
    """Round sphere of radius ``a`` in colatitude/longitude ``(theta, phi)``."""

    dim = 2

    def __init__(self, radius=1.0):
        self.radius = float(radius)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        a2 = self.radius**2
        s = np.sin(x[..., 0])
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = a2
        out[..., 1, 1] = a2 * s * s
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 1] = self.radius**2 * np.sin(2.0 * x[..., 0])
        return out

    def d2g(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 0, 0, 1, 1] = 2.0 * self.radius**2 * np.cos(2.0 * x[..., 0])
        return out


class WarpedProduct(Metric):
    """``dt^2 + w(t)^2 dphi^2`` for a profile ``w`` with known derivatives."""

    dim = 2

    def __init__(self, w, dw, d2w):
        self.w, self.dw, self.d2w = w, dw, d2w

    def g(self, x):
        x = np.asarray(x, dtype=float)
        w = self.w(x[..., 0])
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = w * w
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        t = x[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 1] = 2.0 * self.w(t) * self.dw(t)
        return out

    def d2g(self, x):
        x = np.asarray(x, dtype=float)
        t = x[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 0, 0, 1, 1] = 2.0 * (self.dw(t) ** 2 + self.w(t) * self.d2w(t))
        return out

    def gaussian_curvature(self, x):
        t = np.asarray(x, dtype=float)[..., 0]
        return -self.d2w(t) / self.w(t)


class FlatSpherical(Metric):
    """Euclidean 3-space in spherical coordinates ``(r, theta, phi)``."""

    dim = 3

    def g(self, x):
        x = np.asarray(x, dtype=float)
        r, s = x[..., 0], np.sin(x[..., 1])
        out = np.zeros(x.shape[:-1] + (3, 3))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = r * r
        out[..., 2, 2] = r * r * s * s
        return out

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        r, th = x[..., 0], x[..., 1]
        out = np.zeros(x.shape[:-1] + (3, 3, 3))
        out[..., 0, 1, 1] = 2.0 * r
        out[..., 0, 2, 2] = 2.0 * r * np.sin(th) ** 2
        out[..., 1, 2, 2] = r * r * np.sin(2.0 * th)
        return out

    def d2g(self, x):
        x = np.asarray(x, dtype=float)
        r, th = x[..., 0], x[..., 1]
        out = np.zeros(x.shape[:-1] + (3, 3, 3, 3))
        out[..., 0, 0, 1, 1] = 2.0
        out[..., 0, 0, 2, 2] = 2.0 * np.sin(th) ** 2
        out[..., 0, 1, 2, 2] = 2.0 * r * np.sin(2.0 * th)
        out[..., 1, 0, 2, 2] = out[..., 0, 1, 2, 2]
        out[..., 1, 1, 2, 2] = 2.0 * r * r * np.cos(2.0 * th)
        return out


class ScaledMetric(Metric):
    """``c * base`` for a constant ``c > 0``."""

    def __init__(self, base: Metric, c: float):
        if not c > 0:
            raise ValueError("scale must be positive")
        self.base, self.c = base, float(c)
        self.dim = base.dim
        self.flat = base.flat

    def g(self, x):
        return self.c * self.base.g(x)

    def dg(self, x):
        return self.c * self.base.dg(x)

    def d2g(self, x):
        return self.c * self.base.d2g(x)


# ---------------------------------------------------------------------------
# presets and charts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricPreset:
    name: str
    build: Callable[..., Metric]
    domain: Callable[..., tuple]  # params -> (ranges, periodic)
    defaults: Mapping[str, object]
    doc: str
    param_docs: Mapping[str, str] = field(default_factory=dict)


def _flat_torus_domain(dim=2, length=TWO_PI, **_):
    return ((0.0, float(length)),) * int(dim), (True,) * int(dim)


def _flat_box_domain(dim=2, lower=0.0, upper=1.0, **_):
    return ((float(lower), float(upper)),) * int(dim), (False,) * int(dim)


def _sphere_domain(theta_min=0.15, **_):
    return ((float(theta_min), np.pi - float(theta_min)), (0.0, TWO_PI)), (False, True)


def _revolution_domain(major=2.0, minor=1.0, **_):
    return ((0.0, TWO_PI * float(minor)), (0.0, TWO_PI)), (True, True)


def _polar_domain(r_min=1.0, r_max=8.0, **_):
    return ((float(r_min), float(r_max)), (0.0, TWO_PI)), (False, True)


def _spherical_domain(r_min=1.0, r_max=8.0, theta_min=0.05, **_):
    tm = float(theta_min)
    return ((float(r_min), float(r_max)), (tm, np.pi - tm), (0.0, TWO_PI)), (False, False, True)


def _revolution_metric(major=2.0, minor=1.0, **_):
    R, r = float(major), float(minor)
    if not R > r > 0:
        raise ValueError("revolution torus needs major > minor > 0")
    return WarpedProduct(
        lambda t: R + r * np.cos(t / r),
        lambda t: -np.sin(t / r),
        lambda t: -np.cos(t / r) / r,
    )


def _polar_metric(**_):
    return WarpedProduct(lambda t: t, np.ones_like, np.zeros_like)


METRIC_PRESETS: dict[str, MetricPreset] = {}


def register_metric_preset(preset: MetricPreset) -> None:
    METRIC_PRESETS[preset.name] = preset


for _p in (
    MetricPreset(
        "flat_torus",
        lambda dim=2, **_: ConstantMetric(np.eye(int(dim))),
        _flat_torus_domain,
        {"dim": 2, "length": TWO_PI},
        "flat torus [0, length)^dim, identity metric, all axes periodic",
        {"dim": "dimension n", "length": "period of every axis"},
    ),
    MetricPreset(
        "flat_box",
        lambda dim=2, **_: ConstantMetric(np.eye(int(dim))),
        _flat_box_domain,
        {"dim": 2, "lower": 0.0, "upper": 1.0},
        "flat rectangle/box [lower, upper]^dim, identity metric, no periodic axis",
        {"dim": "dimension n", "lower": "lower coordinate bound", "upper": "upper coordinate bound"},
    ),
    MetricPreset(
        "sheared_torus",
        lambda shear=0.3, **_: ConstantMetric([[1.0, float(shear)], [float(shear), 1.0]]),
        _flat_torus_domain,
        {"shear": 0.3, "length": TWO_PI},
        "flat 2-torus with constant off-diagonal metric [[1, s], [s, 1]]",
        {"shear": "off-diagonal entry s, |s| < 1", "length": "period of both axes"},
    ),
    MetricPreset(
        "sphere",
        lambda radius=1.0, **_: RoundSphere(radius),
        _sphere_domain,
        {"radius": 1.0, "theta_min": 0.15},
        "round 2-sphere a^2 (dtheta^2 + sin^2 theta dphi^2), band chart excluding polar caps",
        {"radius": "sphere radius a", "theta_min": "colatitude cut-off at each pole (rad)"},
    ),
    MetricPreset(
        "revolution_torus",
        _revolution_metric,
        _revolution_domain,
        {"major": 2.0, "minor": 1.0},
        "torus of revolution ds^2 + (R + r cos(s/r))^2 dphi^2 (arc-length meridian coordinate)",
        {"major": "distance R from axis to tube centre", "minor": "tube radius r"},
    ),
    MetricPreset(
        "flat_polar",
        _polar_metric,
        _polar_domain,
        {"r_min": 1.0, "r_max": 8.0},
        "Euclidean plane in polar coordinates dr^2 + r^2 dphi^2 on an annulus",
        {"r_min": "inner radius", "r_max": "outer radius"},
    ),
    MetricPreset(
        "flat_spherical",
        lambda **_: FlatSpherical(),
        _spherical_domain,
        {"r_min": 1.0, "r_max": 8.0, "theta_min": 0.05},
        "Euclidean 3-space in spherical coordinates on a shell, polar caps excluded",
        {"r_min": "inner radius", "r_max": "outer radius", "theta_min": "polar cut-off (rad)"},
    ),
):
    register_metric_preset(_p)


@dataclass(frozen=True)
class ChartSpec:
    """A coordinate chart: box domain, periodic flags and a metric preset."""

    name: str
    dim: int
    ranges: tuple
    periodic: tuple
    metric: str
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if len(self.ranges) != self.dim or len(self.periodic) != self.dim:
            raise ValueError("ranges and periodic flags must have one entry per axis")
        for a, b in self.ranges:
            if not b > a:
                raise ValueError(f"range ({a}, {b}) has non-positive length")

    @property
    def lengths(self):
        return np.array([b - a for a, b in self.ranges])

    def metric_field(self) -> Metric:
        try:
            preset = METRIC_PRESETS[self.metric]
        except KeyError:
            raise KeyError(f"unknown metric preset {self.metric!r}") from None
        params = {k: v for k, v in self.params.items() if k != "scale"}
        m = preset.build(**params)
        if m.dim != self.dim:
            raise ValueError(f"preset {self.metric!r} has dimension {m.dim}, chart has {self.dim}")
        scale = self.params.get("scale", 1.0)
        return m if scale == 1.0 else ScaledMetric(m, scale)

    def check_periodic(self, samples=33, tol=1e-12) -> float:
        """Largest metric mismatch between the two ends of any periodic axis."""
        m = self.metric_field()
        worst = 0.0
        axes = [np.linspace(a, b, samples) for a, b in self.ranges]
        for k in range(self.dim):
            if not self.periodic[k]:
                continue
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
            lo, hi = pts.copy(), pts.copy()
            lo[:, k], hi[:, k] = self.ranges[k]
            worst = max(worst, float(np.max(np.abs(m.g(lo) - m.g(hi)))))
        if worst > tol:
            raise ValueError(f"periodic axis metric mismatch {worst:.3e} exceeds {tol}")
        return worst


def make_chart(metric: str, name: str | None = None, ranges=None, **params) -> ChartSpec:
    """Build a chart from a preset name, filling default parameters."""
    try:
        preset = METRIC_PRESETS[metric]
    except KeyError:
        raise KeyError(f"unknown metric preset {metric!r}") from None
    full = dict(preset.defaults)
    full.update(params)
    default_ranges, periodic = preset.domain(**full)
    if ranges is not None:
        ranges = tuple((float(a), float(b)) for a, b in ranges)
    else:
        ranges = default_ranges
    dim = len(periodic)
    return ChartSpec(name or metric, dim, ranges, tuple(periodic), metric, full)


# ---------------------------------------------------------------------------
# analytic scalar functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticFunction:
    """A scalar function with closed-form partials up to third order."""

    value: Callable
    grad: Callable
    hess: Callable
    third: Callable
    label: str = "f"

    def __call__(self, x):
        return self.value(x)


def trig_series(amplitudes, wavevectors, phases=None, offset=0.0, label=None) -> AnalyticFunction:
    """``offset + sum_m a_m cos(k_m . x + p_m)``."""
    a = np.atleast_1d(np.asarray(amplitudes, dtype=float))
    k = np.atleast_2d(np.asarray(wavevectors, dtype=float))
    p = np.zeros_like(a) if phases is None else np.atleast_1d(np.asarray(phases, dtype=float))
    offset = float(offset)

    def arg(x):
        return np.asarray(x, dtype=float) @ k.T + p

    def value(x):
        return offset + np.cos(arg(x)) @ a

    def grad(x):
        return -(np.sin(arg(x)) * a) @ k

    def hess(x):
        return -np.einsum("...m,mi,mj->...ij", np.cos(arg(x)) * a, k, k)

    def third(x):
        return np.einsum("...m,mi,mj,mk->...ijk", np.sin(arg(x)) * a, k, k, k)

    if label is None:
        label = " + ".join(f"{ai:g}cos({ki.tolist()}.x+{pi:g})" for ai, ki, pi in zip(a, k, p))
    return AnalyticFunction(value, grad, hess, third, label)


def linear_function(coeffs, offset=0.0) -> AnalyticFunction:
    c = np.asarray(coeffs, dtype=float)
    n = c.size

    def value(x):
        return np.asarray(x, dtype=float) @ c + offset

    def grad(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(c, x.shape).copy()

    def hess(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, n))

    def third(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, n, n))

    return AnalyticFunction(value, grad, hess, third, f"linear{c.tolist()}")


def constant_function(c: float, dim: int) -> AnalyticFunction:
    return linear_function(np.zeros(dim), offset=c)


# ---------------------------------------------------------------------------
# pointwise calculus
# ---------------------------------------------------------------------------


def metric_inverse_det(m: Metric, x):
    """Inverse metric and determinant at ``x``.

    Raises
    ------
    NonPositiveDefinite
        If the smallest eigenvalue of g(x) is not positive.
    """
    g = m.g(x)
    lam = np.linalg.eigvalsh(g)
    if np.any(lam[..., 0] <= 0.0):
        raise NonPositiveDefinite(f"metric has eigenvalue {lam[..., 0].min():.3e} <= 0")
    ginv = np.linalg.inv(g)
    ginv = 0.5 * (ginv + np.swapaxes(ginv, -1, -2))
    return ginv, np.linalg.det(g)


def _inverse_derivatives(ginv, dg, d2g=None):
    dginv = -np.einsum("...ia,...kab,...bj->...kij", ginv, dg, ginv)
    if d2g is None:
        return dginv
    d2ginv = -(
        np.einsum("...lia,...kab,...bj->...klij", dginv, dg, ginv)
        + np.einsum("...ia,...klab,...bj->...klij", ginv, d2g, ginv)
        + np.einsum("...ia,...kab,...lbj->...klij", ginv, dg, dginv)
    )
    return dginv, d2ginv


def _first_kind(dg):
    # Gamma_{h i j} = 1/2 (d_i g_hj + d_j g_ih - d_h g_ij)
    return 0.5 * (
        np.einsum("...ihj->...hij", dg) + np.einsum("...jih->...hij", dg) - dg
    )


def christoffel(m: Metric, x):
    """Christoffel symbols ``gamma[..., k, i, j]``, exactly symmetric in ``i, j``."""
    ginv, _ = metric_inverse_det(m, x)
    if m.flat:
        return np.zeros(ginv.shape[:-2] + (m.dim,) * 3)
    gam = np.einsum("...kh,...hij->...kij", ginv, _first_kind(m.dg(x)))
    return 0.5 * (gam + np.swapaxes(gam, -1, -2))


def christoffel_derivative(m: Metric, x):
    """``dgamma[..., l, k, i, j] = d_l Gamma^k_ij`` from the second metric partials."""
    ginv, _ = metric_inverse_det(m, x)
    if m.flat:
        return np.zeros(ginv.shape[:-2] + (m.dim,) * 4)
    dg, d2g = m.dg(x), m.d2g(x)
    dginv = _inverse_derivatives(ginv, dg)
    first = _first_kind(dg)
    dfirst = 0.5 * (
        np.einsum("...lihj->...lhij", d2g) + np.einsum("...ljih->...lhij", d2g) - d2g
    )
    out = np.einsum("...lkh,...hij->...lkij", dginv, first) + np.einsum(
        "...kh,...lhij->...lkij", ginv, dfirst
    )
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def ricci(m: Metric, x):
    """Ricci tensor, sign fixed so that the unit round sphere has Ric = g."""
    if m.flat:
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (m.dim, m.dim))
    gam = christoffel(m, x)
    dgam = christoffel_derivative(m, x)
    ric = (
        np.einsum("...kkij->...ij", dgam)
        - np.einsum("...jkik->...ij", dgam)
        + np.einsum("...kkl,...lij->...ij", gam, gam)
        - np.einsum("...kjl,...lik->...ij", gam, gam)
    )
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def gradient(m: Metric, f: AnalyticFunction, x):
    """Contravariant gradient ``g^ij d_j f`` and its squared norm."""
    ginv, _ = metric_inverse_det(m, x)
    df = f.grad(x)
    v = np.einsum("...ij,...j->...i", ginv, df)
    return v, np.einsum("...i,...i->...", v, df)


def laplace_beltrami(m: Metric, f: AnalyticFunction, x):
    """Divergence form ``|g|^-1/2 d_i(|g|^1/2 g^ij d_j f)`` expanded analytically."""
    ginv, _ = metric_inverse_det(m, x)
    df, d2f = f.grad(x), f.hess(x)
    out = np.einsum("...ij,...ij->...", ginv, d2f)
    if m.flat:
        return out
    dg = m.dg(x)
    dginv = _inverse_derivatives(ginv, dg)
    dlogdet = np.einsum("...ab,...iba->...i", ginv, dg)
    out = out + np.einsum("...iij,...j->...", dginv, df)
    out = out + 0.5 * np.einsum("...i,...ij,...j->...", dlogdet, ginv, df)
    return out


def hessian(m: Metric, f: AnalyticFunction, x):
    """Covariant Hessian ``d_ij f - Gamma^k_ij d_k f``."""
    d2f = f.hess(x)
    if m.flat:
        return d2f
    gam = christoffel(m, x)
    return d2f - np.einsum("...kij,...k->...ij", gam, f.grad(x))


def tensor_norm_sq(ginv, h):
    """``g^ia g^jb h_ij h_ab`` for a covariant 2-tensor."""
    return np.einsum("...ia,...jb,...ij,...ab->...", ginv, ginv, h, h)


def grad_of_grad_norm_sq(m: Metric, f: AnalyticFunction, x):
    """``|grad |grad f||^2`` from the partials of Q = |grad f|^2 (NaN where Q = 0)."""
    ginv, _ = metric_inverse_det(m, x)
    df, d2f = f.grad(x), f.hess(x)
    q = np.einsum("...ij,...i,...j->...", ginv, df, df)
    dq = 2.0 * np.einsum("...ij,...ik,...j->...k", ginv, d2f, df)
    if not m.flat:
        dginv = _inverse_derivatives(ginv, m.dg(x))
        dq = dq + np.einsum("...kij,...i,...j->...k", dginv, df, df)
    num = np.einsum("...kl,...k,...l->...", ginv, dq, dq)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(q > 0, num / (4.0 * q), np.nan)


def bochner_terms(m: Metric, f: AnalyticFunction, x) -> dict:
    """All four terms of the Bochner-Weitzenboeck identity, analytically.

    Returns a dict with ``half_lap_grad_sq``, ``hess_sq``, ``grad_lap_dot_grad``
    and ``ric_grad_grad``.
    """
    x = np.asarray(x, dtype=float)
    ginv, _ = metric_inverse_det(m, x)
    f1, f2, f3 = f.grad(x), f.hess(x), f.third(x)
    dg, d2g = m.dg(x), m.d2g(x)
    dginv, d2ginv = _inverse_derivatives(ginv, dg, d2g)
    gam = christoffel(m, x)
    dgam = christoffel_derivative(m, x)

    dq = np.einsum("...kij,...i,...j->...k", dginv, f1, f1) + 2.0 * np.einsum(
        "...ij,...ik,...j->...k", ginv, f2, f1
    )
    d2q = (
        np.einsum("...klij,...i,...j->...kl", d2ginv, f1, f1)
        + 2.0 * np.einsum("...kij,...il,...j->...kl", dginv, f2, f1)
        + 2.0 * np.einsum("...lij,...ik,...j->...kl", dginv, f2, f1)
        + 2.0 * np.einsum("...ij,...ikl,...j->...kl", ginv, f3, f1)
        + 2.0 * np.einsum("...ij,...ik,...jl->...kl", ginv, f2, f2)
    )
    lap_q = np.einsum("...kl,...kl->...", ginv, d2q - np.einsum("...mkl,...m->...kl", gam, dq))

    hess = f2 - np.einsum("...kij,...k->...ij", gam, f1)
    hess_sq = tensor_norm_sq(ginv, hess)

    dlap = (
        np.einsum("...kij,...ij->...k", dginv, hess)
        + np.einsum("...ij,...ijk->...k", ginv, f3)
        - np.einsum("...ij,...kmij,...m->...k", ginv, dgam, f1)
        - np.einsum("...ij,...mij,...mk->...k", ginv, gam, f2)
    )
    grad_lap = np.einsum("...kl,...k,...l->...", ginv, dlap, f1)

    v = np.einsum("...ij,...j->...i", ginv, f1)
    ric_term = np.einsum("...ij,...i,...j->...", ricci(m, x), v, v)
    return {
        "half_lap_grad_sq": 0.5 * lap_q,
        "hess_sq": hess_sq,
        "grad_lap_dot_grad": grad_lap,
        "ric_grad_grad": ric_term,
    }


def bochner_residual(m: Metric, f: AnalyticFunction, x):
    """Left side minus right side of the Bochner-Weitzenboeck identity."""
    t = bochner_terms(m, f, x)
    return t["half_lap_grad_sq"] - t["hess_sq"] - t["grad_lap_dot_grad"] - t["ric_grad_grad"]
