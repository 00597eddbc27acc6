"""Nonlinearities H = (H_i), structural checks and solvers for -Lap_g u_i = H_i(u)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .discretization import DiscreteLaplacian, Grid, read_binary
from .errors import BlowUp, LineSearchFailure, MaxIterExceeded, SingularJacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Nonlinearity:
    """The map ``H`` and its Jacobian ``DH[i, j] = d_j H_i``.

    Both act on stacked states ``u`` of shape ``(m, ...)``; ``DH`` returns
    shape ``(m, m, ...)``.  ``potential`` is ``W`` with ``H = -grad W`` when
    the system is a gradient system.
    """

    name: str
    m: int
    H: Callable
    DH: Callable
    params: Mapping = field(default_factory=dict)
    potential: Callable | None = None


def bose() -> Nonlinearity:
    """Two-component condensate coupling ``H = (-u v^2, -v u^2)``."""

    def H(s):
        u, v = s
        return np.stack([-u * v * v, -v * u * u])

    def DH(s):
        u, v = s
        return np.stack([np.stack([-v * v, -2 * u * v]), np.stack([-2 * u * v, -u * u])])

    return Nonlinearity("bose", 2, H, DH, {}, lambda s: 0.5 * s[0] ** 2 * s[1] ** 2)


def allen_cahn_scalar() -> Nonlinearity:
    """``H(u) = u - u^3``."""
    return Nonlinearity(
        "allen_cahn_scalar",
        1,
        lambda s: s - s**3,
        lambda s: (1.0 - 3.0 * s**2)[None],
        {},
        lambda s: 0.25 * (1.0 - s[0] ** 2) ** 2,
    )


def gradient_double_well(beta: float = 1.0) -> Nonlinearity:
    """``H = -grad W`` with ``W = sum (1 - u_i^2)^2 / 4 + beta u_1^2 u_2^2``."""
    beta = float(beta)

    def H(s):
        u, v = s
        return np.stack([u - u**3 - 2 * beta * u * v * v, v - v**3 - 2 * beta * v * u * u])

    def DH(s):
        u, v = s
        off = -4 * beta * u * v
        return np.stack(
            [np.stack([1 - 3 * u * u - 2 * beta * v * v, off]), np.stack([off, 1 - 3 * v * v - 2 * beta * u * u])]
        )

    def W(s):
        u, v = s
        return 0.25 * (1 - u * u) ** 2 + 0.25 * (1 - v * v) ** 2 + beta * u * u * v * v

    return Nonlinearity("gradient_double_well", 2, H, DH, {"beta": beta}, W)


def linear(A, name: str = "linear") -> Nonlinearity:
    """``H(u) = A u`` for any constant square matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m = A.shape[0]

    def H(s):
        return np.einsum("ij,j...->i...", A, s)

    def DH(s):
        s = np.asarray(s)
        return np.broadcast_to(A.reshape((m, m) + (1,) * (s.ndim - 1)), (m, m) + s.shape[1:]).copy()

    potential = None
    if np.array_equal(A, A.T):
        potential = lambda s: -0.5 * np.einsum("i...,ij,j...->...", s, A, s)  # noqa: E731
    return Nonlinearity(name, m, H, DH, {"A": A.tolist()}, potential)


def linear_symmetric(A) -> Nonlinearity:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.array_equal(A, A.T):
        raise ValueError("linear_symmetric needs a symmetric matrix")
    return linear(A, "linear_symmetric")


def zero(m: int = 1) -> Nonlinearity:
    """``H = 0`` (pure Laplace equation)."""
    return linear(np.zeros((int(m), int(m))), "zero")


@dataclass(frozen=True)
class NonlinearityPreset:
    name: str
    build: Callable[..., Nonlinearity]
    defaults: Mapping
    doc: str
    param_docs: Mapping = field(default_factory=dict)


NONLINEARITY_PRESETS: dict[str, NonlinearityPreset] = {}


def register_nonlinearity_preset(preset: NonlinearityPreset) -> None:
    NONLINEARITY_PRESETS[preset.name] = preset


for _p in (
    NonlinearityPreset("bose", lambda **_: bose(), {}, "H = (-u v^2, -v u^2), symmetric, m = 2"),
    NonlinearityPreset("allen_cahn_scalar", lambda **_: allen_cahn_scalar(), {}, "H(u) = u - u^3, m = 1"),
    NonlinearityPreset(
        "gradient_double_well",
        lambda beta=1.0, **_: gradient_double_well(beta),
        {"beta": 1.0},
        "H = -grad W, W = sum (1 - u_i^2)^2/4 + beta u1^2 u2^2, m = 2",
        {"beta": "coupling strength"},
    ),
    NonlinearityPreset(
        "linear_symmetric",
        lambda A=((-1.0, 0.0), (0.0, -1.0)), **_: linear_symmetric(A),
        {"A": [[-1.0, 0.0], [0.0, -1.0]]},
        "H(u) = A u with symmetric A",
        {"A": "symmetric m x m matrix"},
    ),
    NonlinearityPreset(
        "linear",
        lambda A=((0.0, 1.0), (2.0, 0.0)), **_: linear(A),
        {"A": [[0.0, 1.0], [2.0, 0.0]]},
        "H(u) = A u, A arbitrary (may be asymmetric)",
        {"A": "m x m matrix"},
    ),
    NonlinearityPreset("zero", lambda m=1, **_: zero(m), {"m": 1}, "H = 0", {"m": "component count"}),
):
    register_nonlinearity_preset(_p)


def make_nonlinearity(name: str, **params) -> Nonlinearity:
    try:
        preset = NONLINEARITY_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown nonlinearity preset {name!r}") from None
    full = dict(preset.defaults)
    full.update(params)
    return preset.build(**full)


# ---------------------------------------------------------------------------
# structural checks
# ---------------------------------------------------------------------------


def sample_states(m: int, box=(-2.0, 2.0), count: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(box[0], box[1], size=(m, count))


def jacobian_defect(nl: Nonlinearity, states) -> float:
    """Largest normwise relative gap between ``DH`` and central differences of ``H``."""
    states = np.asarray(states, dtype=float)
    worst = 0.0
    J = nl.DH(states)
    for j in range(nl.m):
        step = 1e-5 * np.maximum(1.0, np.abs(states[j]))
        up, dn = states.copy(), states.copy()
        up[j] += step
        dn[j] -= step
        fd = (nl.H(up) - nl.H(dn)) / (2 * step)
        num = np.abs(fd - J[:, j]).max(axis=0)
        den = np.maximum(np.abs(J).max(axis=(0, 1)), 1.0)
        worst = max(worst, float(np.max(num / den)))
    return worst


def check_symmetric(nl: Nonlinearity, states, tol: float = 1e-10):
    """``(is_symmetric, max |d_j H_i - d_i H_j|)`` over the sampled states."""
    J = nl.DH(np.asarray(states, dtype=float))
    asym = float(np.max(np.abs(J - np.swapaxes(J, 0, 1)))) if nl.m > 1 else 0.0
    return asym <= tol, asym


@dataclass
class CouplingReport:
    mode: str
    products: dict  # (i, j) -> min over states of d_i H_j * d_j H_i
    flagged: list

    @property
    def ok(self) -> bool:
        return not self.flagged


def coupling_pairs(m: int, mode: str):
    if mode == "off-diagonal":
        return [(i, j) for i in range(m) for j in range(m) if i != j]
    if mode == "all-pairs":
        return [(i, j) for i in range(m) for j in range(m)]
    raise ValueError(f"unknown coupling mode {mode!r}")


def check_coupling(nl: Nonlinearity, states, mode: str = "off-diagonal") -> CouplingReport:
    """Minimum of ``d_i H_j d_j H_i`` per pair; pairs with a minimum ``<= 0`` are flagged.

    ``mode="off-diagonal"`` skips ``i == j``; ``"all-pairs"`` is the literal
    reading, which at ``i == j`` asks for ``(d_i H_i)^2 > 0``.
    """
    J = nl.DH(np.asarray(states, dtype=float))
    products, flagged = {}, []
    for i, j in coupling_pairs(nl.m, mode):
        p = float(np.min(J[j, i] * J[i, j]))
        products[(i, j)] = p
        if p <= 0.0:
            flagged.append((i, j))
    return CouplingReport(mode, products, flagged)


# ---------------------------------------------------------------------------
# residual and solvers
# ---------------------------------------------------------------------------


def residual(lap: DiscreteLaplacian, nl: Nonlinearity, u) -> np.ndarray:
    """``r_i = -L u_i - H_i(u)`` at every node (0 on Dirichlet-fixed nodes)."""
    u = np.asarray(u, dtype=float)
    r = -lap.apply(u) - nl.H(u)
    if lap.bc == "dirichlet":
        r[:, ~lap.free.reshape(lap.grid.shape)] = 0.0
    return r


def _free_vector(lap, u):
    return np.asarray(u, dtype=float).reshape(u.shape[0], -1)[:, lap.free].ravel()


def _scatter(lap, u_template, x):
    u = np.array(u_template, dtype=float, copy=True)
    flat = u.reshape(u.shape[0], -1)
    flat[:, lap.free] = x.reshape(u.shape[0], -1)
    return u


def newton_jacobian(lap: DiscreteLaplacian, nl: Nonlinearity, u) -> sp.csc_matrix:
    """Jacobian of the residual on free nodes: ``diag(-L) - [d_j H_i(u)]``."""
    m = u.shape[0]
    idx = lap.free_index
    Lff = lap.matrix[idx][:, idx]
    J = nl.DH(u).reshape(m, m, -1)[:, :, idx]
    blocks = [[(-Lff if i == j else None) for j in range(m)] for i in range(m)]
    for i in range(m):
        for j in range(m):
            d = sp.diags(-J[i, j])
            blocks[i][j] = d if blocks[i][j] is None else blocks[i][j] + d
    return sp.bmat(blocks, format="csc")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    damping: list = field(default_factory=list)
    bordered: list = field(default_factory=list)
    message: str = ""


def _factor(J, pivot_tol):
    try:
        lu = splu(J)
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from None
    piv = np.abs(lu.U.diagonal())
    if piv.min() <= pivot_tol * piv.max():
        raise SingularJacobian(f"pivot ratio {piv.min() / piv.max():.2e} below {pivot_tol:.0e}")
    return lu


def _newton_step(lap, J, F, weights_free, m, pin_mean, kernel_tol, pivot_tol):
    """Solve ``J d = -F``; optionally border with near-kernel component constants."""
    n = J.shape[0] // m
    bordered = []
    if pin_mean and lap.bc != "dirichlet":
        scale = abs(J).sum(axis=1).max()
        for c in range(m):
            e = np.zeros(J.shape[0])
            e[c * n : (c + 1) * n] = 1.0
            if np.abs(J @ e).max() <= kernel_tol * scale:
                bordered.append(c)
    if not bordered:
        lu = _factor(J, pivot_tol)
        return lu.solve(-F), bordered
    k = len(bordered)
    E = np.zeros((J.shape[0], k))
    for col, c in enumerate(bordered):
        E[c * n : (c + 1) * n, col] = weights_free
    scale = abs(J).sum(axis=1).max() / max(weights_free.max(), 1e-300)
    B = sp.bmat([[J, sp.csc_matrix(E * scale)], [sp.csc_matrix(E.T * scale), None]], format="csc")
    lu = _factor(B, pivot_tol)
    sol = lu.solve(np.concatenate([-F, np.zeros(k)]))
    return sol[: J.shape[0]], bordered


def newton_solve(
    lap: DiscreteLaplacian,
    nl: Nonlinearity,
    u0,
    tol: float = 1e-9,
    max_iter: int = 50,
    pin_mean: bool = True,
    kernel_tol: float = 1e-6,
    pivot_tol: float = 1e-13,
):
    """Damped Newton iteration for ``-L u = H(u)``.

    Each step halves its length (at most 30 times) until the Euclidean
    residual norm decreases.  With ``pin_mean`` the linear system is bordered
    by the weighted mean of every component whose constant vector is (nearly)
    in the Jacobian kernel, which fixes the constant mode of periodic and
    pure-Neumann problems.

    Returns
    -------
    (u, SolveReport)

    Raises
    ------
    SingularJacobian, LineSearchFailure, MaxIterExceeded
        Each carries the last iterate in ``.state`` and the report in ``.report``.
    """
    u = np.array(u0, dtype=float, copy=True)
    if not np.all(np.isfinite(u)):
        raise ValueError("initial state is not finite")
    m = nl.m
    wf = lap.weights[lap.free]
    report = SolveReport(False, 0, float("nan"))
    F = _free_vector(lap, residual(lap, nl, u))
    report.residual = float(np.abs(F).max())
    for it in range(max_iter + 1):
        if report.residual <= tol:
            report.converged = True
            report.iterations = it
            return u, report
        if it == max_iter:
            break
        J = newton_jacobian(lap, nl, u)
        try:
            delta, bordered = _newton_step(lap, J, F, wf, m, pin_mean, kernel_tol, pivot_tol)
        except SingularJacobian as exc:
            report.iterations = it
            report.message = str(exc)
            raise SingularJacobian(str(exc), u, report) from None
        report.bordered.append(bordered)
        x = _free_vector(lap, u)
        norm0 = np.linalg.norm(F)
        alpha = 1.0
        for _ in range(31):
            trial = _scatter(lap, u, x + alpha * delta)
            Ft = _free_vector(lap, residual(lap, nl, trial))
            if np.all(np.isfinite(Ft)) and np.linalg.norm(Ft) < norm0:
                break
            alpha *= 0.5
        else:
            report.iterations = it
            report.message = "no residual decrease after 30 halvings"
            raise LineSearchFailure(report.message, u, report)
        report.damping.append(alpha)
        u, F = trial, Ft
        report.residual = float(np.abs(F).max())
        log.debug("newton it=%d residual=%.3e alpha=%g", it + 1, report.residual, alpha)
    report.iterations = max_iter
    report.message = f"residual {report.residual:.3e} above {tol:.1e} after {max_iter} iterations"
    raise MaxIterExceeded(report.message, u, report)


def explicit_dt_bound(lap: DiscreteLaplacian, safety: float = 0.9) -> float:
    """``safety * 2 / max_row |L|``; equals ``0.9 h^2 / (2n)`` on a flat grid."""
    idx = lap.free_index
    rows = abs(lap.matrix[idx][:, idx]).sum(axis=1)
    return safety * 2.0 / float(np.max(rows))


def gradient_flow(
    lap: DiscreteLaplacian,
    nl: Nonlinearity,
    u0,
    dt: float,
    steps: int,
    scheme: str = "semi-implicit",
    blowup: float = 1e6,
    stop_tol: float | None = None,
):
    """Relax ``u_t = L u + H(u)``.

    ``scheme="semi-implicit"`` treats diffusion implicitly,
    ``(I - dt L) u_new = u + dt H(u)``, and has no diffusive step bound.
    ``scheme="explicit"`` uses ``u_new = u + dt (L u + H(u))`` and requires
    ``dt <= explicit_dt_bound(lap)``.  Iteration stops early when
    ``stop_tol`` is given and ``max |u_new - u| / dt`` falls below it.

    Raises
    ------
    BlowUp
        If the sup-norm exceeds ``blowup``.
    """
    u = np.array(u0, dtype=float, copy=True)
    m = u.shape[0]
    idx = lap.free_index
    flat = u.reshape(m, -1)
    if scheme == "explicit":
        bound = explicit_dt_bound(lap)
        if dt > bound:
            raise ValueError(f"dt={dt:g} exceeds the explicit stability bound {bound:.3g}")
        solve = None
    elif scheme == "semi-implicit":
        Lff = lap.matrix[idx][:, idx]
        lu = splu((sp.identity(idx.size, format="csc") - dt * Lff).tocsc())
        fixed = np.flatnonzero(~lap.free)
        Lfb = lap.matrix[idx][:, fixed]

        def solve(rhs, ub):
            if fixed.size:
                rhs = rhs + dt * (Lfb @ ub)
            return lu.solve(rhs)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    for _ in range(int(steps)):
        Hu = nl.H(u).reshape(m, -1)
        if solve is None:
            new = flat + dt * (lap.apply(u).reshape(m, -1) + Hu)
            new[:, ~lap.free] = flat[:, ~lap.free]
        else:
            new = flat.copy()
            for i in range(m):
                ub = flat[i, ~lap.free]
                new[i, idx] = solve(flat[i, idx] + dt * Hu[i, idx], ub)
        change = np.abs(new - flat).max()
        flat = new
        u = flat.reshape(u.shape)
        sup = np.abs(flat).max()
        if not np.isfinite(sup) or sup > blowup:
            raise BlowUp(f"sup-norm {sup:.3e} exceeds {blowup:.1e}", u, None)
        if stop_tol is not None and change / dt < stop_tol:
            break
    return u


def energy(lap: DiscreteLaplacian, nl: Nonlinearity, u) -> float:
    """``sum_i 1/2 u_i^T K u_i + int W(u)`` for gradient systems."""
    if nl.potential is None:
        raise ValueError(f"{nl.name} has no potential")
    u = np.asarray(u, dtype=float)
    dirichlet = sum(0.5 * lap.energy(ui) for ui in u)
    return dirichlet + lap.inner(nl.potential(u), np.ones(lap.grid.shape))


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def initial_data(
    grid: Grid,
    m: int,
    kind: str = "random",
    seed: int = 0,
    amplitude: float = 0.5,
    value=0.0,
    offset_range: float = 1.0,
    path=None,
) -> np.ndarray:
    """Initial states of shape ``(m, *grid.shape)``.

    ``constant``: every component equals ``value`` (scalar or length-m).
    ``random``: a uniform random constant in ``[-offset_range, offset_range]``
    per component plus ``amplitude`` times a normalised random combination
    of low-frequency modes.  ``bump``: ``value`` plus a centred Gaussian of
    height ``amplitude``.  ``file``: a binary dump written by ``write_binary``.
    """
    shape = (m,) + grid.shape
    if kind == "constant":
        return np.broadcast_to(np.asarray(value, dtype=float).reshape(-1, *([1] * grid.dim)), shape).copy()
    if kind == "random":
        rng = np.random.default_rng(seed)
        out = np.empty(shape)
        L = grid.chart.lengths
        for i in range(m):
            field_ = np.zeros(grid.shape)
            for _ in range(6):
                k = rng.integers(-2, 3, size=grid.dim)
                arg = sum(
                    2 * np.pi * k[a] * (grid.points[..., a] - grid.chart.ranges[a][0]) / L[a] for a in range(grid.dim)
                )
                field_ += rng.normal() * np.cos(arg + rng.uniform(0, 2 * np.pi))
            field_ /= max(np.abs(field_).max(), 1e-12)
            out[i] = rng.uniform(-offset_range, offset_range) + amplitude * field_
        return out
    if kind == "bump":
        centre = np.array([0.5 * (a + b) for a, b in grid.chart.ranges])
        r2 = np.sum(((grid.points - centre) / grid.chart.lengths) ** 2, axis=-1)
        base = np.asarray(value, dtype=float).reshape(-1, *([1] * grid.dim))
        return np.broadcast_to(base + amplitude * np.exp(-r2 / 0.02), shape).copy()
    if kind == "file":
        data = read_binary(path)
        if data.shape != shape:
            raise ValueError(f"file holds shape {data.shape}, expected {shape}")
        return data
    raise ValueError(f"unknown initial data kind {kind!r}")
