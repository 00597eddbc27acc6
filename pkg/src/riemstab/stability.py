"""Linearized operator, principal eigenpair, stability classification and
the two quadratic-form inequalities satisfied by stable solutions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu

from .discretization import (
    DiscreteLaplacian,
    discrete_hessian,
    grad_norm_sq,
    hessian_norm_sq,
    node_geometry,
    partials,
)
from .errors import NegativeCouplingProduct, NoConvergence, NotSelfAdjoint
from .system import Nonlinearity, check_symmetric, coupling_pairs

log = logging.getLogger(__name__)

DENSE_LIMIT = 400


@dataclass
class LinearizedOperator:
    """``A = blockdiag(-L) - [d_j H_i(u(p))]`` restricted to free nodes.

    ``stiffness = W A`` is the symmetric form of ``A`` when the Jacobian is
    symmetric; ``weights`` repeats the nodal quadrature weights per block.
    """

    lap: DiscreteLaplacian
    m: int
    matrix: sp.csr_matrix
    stiffness: sp.csr_matrix
    weights: np.ndarray
    jacobian: np.ndarray  # (m, m, n_free)

    @property
    def scale(self) -> float:
        """``||A||_inf`` (maximum absolute row sum)."""
        return float(abs(self.matrix).sum(axis=1).max())

    def adjoint_defect(self) -> float:
        """``max |S - S^T| / max |S|`` for ``S = W A``."""
        S = self.stiffness
        D = (S - S.T).tocoo()
        top = float(np.abs(D.data).max()) if D.nnz else 0.0
        return top / float(np.abs(S.data).max())

    def to_full(self, x) -> np.ndarray:
        """Scatter a free-node vector of length ``m * n_free`` to shape ``(m, *grid.shape)``."""
        lap = self.lap
        out = np.zeros((self.m, lap.grid.size))
        out[:, lap.free] = np.asarray(x).reshape(self.m, -1)
        return out.reshape((self.m,) + lap.grid.shape)

    def to_free(self, fields) -> np.ndarray:
        return np.asarray(fields, dtype=float).reshape(self.m, -1)[:, self.lap.free].ravel()


def assemble_linearized(lap: DiscreteLaplacian, nl: Nonlinearity, u) -> LinearizedOperator:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("state is not finite")
    m = nl.m
    idx = lap.free_index
    Lff = lap.matrix[idx][:, idx]
    Kff = lap.stiffness[idx][:, idx]
    w = lap.weights[idx]
    J = nl.DH(u).reshape(m, m, -1)[:, :, idx]
    A = [[None] * m for _ in range(m)]
    S = [[None] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            A[i][j] = sp.diags(-J[i, j])
            S[i][j] = sp.diags(-w * J[i, j])
        A[i][i] = A[i][i] - Lff
        S[i][i] = S[i][i] + Kff
    return LinearizedOperator(
        lap, m, sp.bmat(A, format="csr"), sp.bmat(S, format="csr"), np.tile(w, m), J
    )


@dataclass
class SpectrumReport:
    mu: float
    vector: np.ndarray  # (m, *grid.shape), W-normalised
    iterations: int
    residual: float
    method: str


def _start_vector(n: int) -> np.ndarray:
    return 1.0 + 0.01 * np.cos(np.arange(n) * 0.7071)


def principal_eigenpair(op: LinearizedOperator, residual_tol: float = 1e-8, check: bool = True) -> SpectrumReport:
    """Smallest eigenvalue of ``A`` via shift-and-invert Lanczos on ``S v = mu W v``.

    The shift sits below the spectrum: ``-L`` is positive semidefinite, so
    every eigenvalue exceeds ``-max_p lambda_max(DH(p))``.

    Raises
    ------
    NotSelfAdjoint
        If ``W A`` is not symmetric to 1e-10 relative.
    NoConvergence
        If the iteration stalls or ``||A v - mu v|| > residual_tol ||v||``.
    """
    if check:
        defect = op.adjoint_defect()
        if defect > 1e-10:
            raise NotSelfAdjoint(f"weighted adjoint defect {defect:.2e} exceeds 1e-10")
    S, w = op.stiffness, op.weights
    n = S.shape[0]
    if n <= DENSE_LIMIT:
        vals, vecs = la.eigh(S.toarray(), np.diag(w), subset_by_index=[0, 0])
        mu, v, iters, method = float(vals[0]), vecs[:, 0], 1, "dense"
    else:
        Jsym = 0.5 * (op.jacobian + np.swapaxes(op.jacobian, 0, 1))
        top = np.linalg.eigvalsh(np.moveaxis(Jsym, -1, 0)).max() if op.m > 1 else Jsym.max()
        sigma = -float(top) - 1.0
        lu = splu((S - sigma * sp.diags(w)).tocsc())
        count = [0]

        def solve(x):
            count[0] += 1
            return lu.solve(np.asarray(x, dtype=float).ravel())

        opinv = LinearOperator((n, n), matvec=solve, dtype=float)
        try:
            vals, vecs = eigsh(
                S, k=1, M=sp.diags(w).tocsc(), sigma=sigma, which="LM", OPinv=opinv, v0=_start_vector(n), tol=0.0,
                maxiter=max(1000, n),
            )
        except ArpackNoConvergence as exc:
            raise NoConvergence(f"eigensolver stalled: {exc}") from None
        mu, v, iters, method = float(vals[0]), vecs[:, 0], count[0], "shift-invert"
    v = v / np.sqrt(np.sum(w * v * v))
    res = float(np.linalg.norm(op.matrix @ v - mu * v) / np.linalg.norm(v))
    if res > residual_tol:
        raise NoConvergence(f"eigen-residual {res:.2e} exceeds {residual_tol:.0e}")
    log.debug("principal eigenpair mu=%.6g iterations=%d residual=%.2e", mu, iters, res)
    return SpectrumReport(mu, op.to_full(v), iters, res, method)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass
class StabilityCertificate:
    """Witness ``(zeta, lam)`` of the linearized system with sign reports."""

    zeta: np.ndarray  # (m, *grid.shape)
    lam: float
    residual: float
    tolerance: float
    signs: list  # per component: +1, -1, or 0 (vanishing)
    sign_ok: list
    pairs: dict  # (i, j) -> min over nodes of d_j H_i zeta_i zeta_j
    pair_mode: str
    strict: bool

    @property
    def pairs_ok(self) -> bool:
        if self.strict:
            return all(v > 0 for v in self.pairs.values())
        return all(v >= 0 for v in self.pairs.values())

    @property
    def valid(self) -> bool:
        return self.lam >= 0 and self.residual <= self.tolerance and all(self.sign_ok) and self.pairs_ok


@dataclass
class StabilityResult:
    verdict: str  # "stable" | "unstable" | "indeterminate"
    mu: float | None
    tol: float
    certificate: StabilityCertificate | None = None
    spectrum: SpectrumReport | None = None
    reason: str = ""


def certificate_residual(lap: DiscreteLaplacian, nl: Nonlinearity, u, zeta, lam: float) -> float:
    """``max |-L zeta_i - sum_j d_j H_i zeta_j - lam zeta_i|`` over free nodes."""
    zeta = np.asarray(zeta, dtype=float)
    J = nl.DH(np.asarray(u, dtype=float))
    r = -lap.apply(zeta) - np.einsum("ij...,j...->i...", J, zeta) - lam * zeta
    r = r.reshape(nl.m, -1)[:, lap.free]
    return float(np.abs(r).max())


def verify_certificate(
    lap: DiscreteLaplacian,
    nl: Nonlinearity,
    u,
    zeta,
    lam: float,
    tolerance: float,
    mode: str = "off-diagonal",
    strict: bool = False,
    vanish: float = 1e-8,
) -> StabilityCertificate:
    """Check a candidate ``(zeta, lam)`` against the linearized system.

    A component is treated as identically zero when its sup-norm is below
    ``vanish`` times that of the whole vector; otherwise it must have one
    sign on nodes where ``|zeta_i| > vanish * ||zeta_i||_inf``.  Pair
    products ``d_j H_i zeta_i zeta_j`` are reported for the pairs of ``mode``
    and must be ``>= 0`` (``> 0`` when ``strict``).
    """
    u = np.asarray(u, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    m = nl.m
    flat = zeta.reshape(m, -1)[:, lap.free]
    total = np.abs(flat).max()
    signs, ok = [], []
    cleaned = zeta.copy()
    for i in range(m):
        zi = flat[i]
        top = np.abs(zi).max()
        if top <= vanish * total:
            signs.append(0)
            ok.append(True)
            cleaned[i] = 0.0
            continue
        big = zi[np.abs(zi) > vanish * top]
        pos, neg = np.all(big > 0), np.all(big < 0)
        signs.append(1 if pos else (-1 if neg else 0))
        ok.append(bool(pos or neg))
    J = nl.DH(u).reshape(m, m, -1)[:, :, lap.free]
    zc = cleaned.reshape(m, -1)[:, lap.free]
    pairs = {}
    for i, j in coupling_pairs(m, mode):
        pairs[(i, j)] = float(np.min(J[i, j] * zc[i] * zc[j]))
    res = certificate_residual(lap, nl, u, cleaned, lam)
    return StabilityCertificate(cleaned, float(lam), res, float(tolerance), signs, ok, pairs, mode, strict)


def classify_stability(
    lap: DiscreteLaplacian,
    nl: Nonlinearity,
    u,
    tol: float | None = None,
    mode: str = "off-diagonal",
    strict: bool = False,
    certificate: tuple | None = None,
    states_tol: float = 1e-10,
) -> StabilityResult:
    """Stable / unstable / indeterminate verdict for the solution ``u``.

    For symmetric Jacobians the witness is the principal eigenpair: ``mu_1 <
    -tol`` is Unstable; otherwise the eigenvector (sign-normalised globally)
    with ``lam = max(mu_1, 0)`` is checked as a certificate and the verdict
    is Stable when it passes, Indeterminate otherwise.  ``tol`` defaults to
    ``1e-7 ||A||_inf``.  For asymmetric Jacobians only a user-supplied
    ``certificate = (zeta, lam)`` can be checked.
    """
    u = np.asarray(u, dtype=float)
    states = u.reshape(nl.m, -1)[:, lap.free]
    symmetric, asym = check_symmetric(nl, states, states_tol)
    op = assemble_linearized(lap, nl, u)
    if tol is None:
        tol = 1e-7 * op.scale
    if not symmetric:
        if certificate is None:
            return StabilityResult("indeterminate", None, tol, reason=f"asymmetric Jacobian ({asym:.2e}); no certificate")
        zeta, lam = certificate
        cert = verify_certificate(lap, nl, u, zeta, lam, tol * max(np.abs(zeta).max(), 1.0), mode, strict)
        verdict = "stable" if cert.valid else "indeterminate"
        return StabilityResult(verdict, None, tol, cert, reason="certificate check only")
    spec = principal_eigenpair(op)
    if spec.mu < -tol:
        return StabilityResult("unstable", spec.mu, tol, spectrum=spec, reason="negative principal eigenvalue")
    zeta = spec.vector
    if zeta.sum() < 0:
        zeta = -zeta
    lam = max(spec.mu, 0.0)
    cert_tol = (tol + spec.residual) * np.abs(zeta).max()
    cert = verify_certificate(lap, nl, u, zeta, lam, cert_tol, mode, strict)
    if cert.valid:
        return StabilityResult("stable", spec.mu, tol, cert, spec)
    why = []
    if not all(cert.sign_ok):
        why.append("eigenvector changes sign")
    if not cert.pairs_ok:
        why.append("pair products fail")
    if cert.residual > cert.tolerance:
        why.append("certificate residual too large")
    return StabilityResult("indeterminate", spec.mu, tol, cert, spec, "; ".join(why))


# ---------------------------------------------------------------------------
# inequality checks
# ---------------------------------------------------------------------------


@dataclass
class MarginReport:
    """Rows ``(index, lhs, rhs, margin)``; ``literal`` holds the ``|d_i H_i|`` column."""

    rows: list = field(default_factory=list)
    literal: list = field(default_factory=list)

    @property
    def min_margin(self) -> float:
        return min((r[3] for r in self.rows), default=0.0)

    def worst_relative(self) -> float:
        """Smallest ``margin / max(rhs, tiny)`` over rows with nonzero RHS."""
        vals = [r[3] / r[2] for r in self.rows if r[2] > 0]
        return min(vals, default=0.0)

    def passes(self, rel_slack: float) -> bool:
        return all(r[3] >= -rel_slack * max(r[2], 0.0) for r in self.rows)


def _coupling_roots(J):
    """``sqrt(d_j H_i d_i H_j)`` entrywise; raises on negative products."""
    prod = J * np.swapaxes(J, 0, 1)
    m = J.shape[0]
    off = ~np.eye(m, dtype=bool)
    if m > 1 and prod[off].min() < 0:
        i, j = np.argwhere(off & (prod.min(axis=-1) < 0))[0]
        raise NegativeCouplingProduct(
            f"d_{j}H_{i} * d_{i}H_{j} reaches {prod[i, j].min():.3e} < 0 on the solution"
        )
    return np.sqrt(np.maximum(prod, 0.0))


def _as_fields(phi, m, shape):
    phi = np.asarray(phi, dtype=float)
    if phi.shape == shape and m == 1:
        phi = phi[None]
    if phi.shape != (m,) + shape:
        raise ValueError(f"test field shape {phi.shape} does not match {(m,) + shape}")
    return phi


def stability_inequality_check(lap: DiscreteLaplacian, nl: Nonlinearity, u, family) -> MarginReport:
    """Quadratic-form test against each ``phi`` in ``family``.

    RHS is ``sum_i phi_i^T K phi_i`` (discrete Dirichlet energy).  The
    primary LHS uses the signed diagonal ``d_i H_i`` and the geometric mean
    ``sqrt(d_j H_i d_i H_j)`` off the diagonal; the literal column replaces
    the diagonal by ``|d_i H_i|``.
    """
    u = np.asarray(u, dtype=float)
    m, shape = nl.m, lap.grid.shape
    J = nl.DH(u).reshape(m, m, -1)
    root = _coupling_roots(J)
    diag = np.stack([J[i, i] for i in range(m)])
    w = lap.weights
    report = MarginReport()
    for k, phi in enumerate(family):
        phi = _as_fields(phi, m, shape).reshape(m, -1)
        rhs = float(sum(lap.energy(phi[i]) for i in range(m)))
        off = 0.0
        for i in range(m):
            for j in range(m):
                if i != j:
                    off += float(np.sum(w * root[i, j] * phi[i] * phi[j]))
        signed = float(np.sum(w * diag * phi * phi)) + off
        literal = float(np.sum(w * np.abs(diag) * phi * phi)) + off
        report.rows.append((k, signed, rhs, rhs - signed))
        report.literal.append((k, literal, rhs, rhs - literal))
    return report


def gradient_of_gradient_norm_sq(grid, metric, values, geom=None) -> np.ndarray:
    """``|grad |grad f||^2 = |Hess f(grad f, .)|^2 / |grad f|^2`` (0 where the gradient vanishes)."""
    geom = geom or node_geometry(grid, metric)
    ginv = geom["ginv"]
    H = discrete_hessian(grid, metric, values, gamma=geom["gamma"])
    df = partials(grid, values)
    v = np.einsum("...kl,...l->...k", ginv, df)
    Hv = np.einsum("...kl,...l->...k", H, v)
    num = np.einsum("...k,...kl,...l->...", Hv, ginv, Hv)
    q = np.einsum("...k,...k->...", v, df)
    out = np.zeros_like(q)
    nz = q > 0
    out[nz] = num[nz] / q[nz]
    return out


def poincare_check(lap: DiscreteLaplacian, nl: Nonlinearity, u, family) -> MarginReport:
    """Weighted Poincare-type inequality for stable solutions, per ``eta`` in ``family``.

    LHS = sum_i int (Ric(grad u_i, grad u_i) + |Hess u_i|^2 - |grad|grad u_i||^2) eta_i^2
        + sum_{i != j} int (sqrt(d_j H_i d_i H_j) |grad u_i||grad u_j| eta_i eta_j
                            - d_j H_i grad u_i . grad u_j eta_i^2),
    RHS = sum_i int |grad u_i|^2 |grad eta_i|^2.

    Components whose oscillation is at rounding level (``64 eps`` relative)
    are replaced by their mean, so constant solutions give exactly 0 on
    both sides instead of rounding noise.
    """
    u = np.array(u, dtype=float, copy=True)
    for ui in u:
        if np.ptp(ui) <= 64 * np.finfo(float).eps * max(1.0, np.abs(ui).max()):
            ui[...] = ui.mean()
    grid, metric = lap.grid, lap.metric
    m, shape = nl.m, grid.shape
    geom = node_geometry(grid, metric)
    ginv, ric = geom["ginv"], geom["ricci"]
    J = nl.DH(u)
    root = _coupling_roots(J.reshape(m, m, -1)).reshape(J.shape)
    grads = np.stack([np.einsum("...kl,...l->...k", ginv, partials(grid, ui)) for ui in u])  # raised
    lowers = np.stack([partials(grid, ui) for ui in u])
    gsq = np.stack([grad_norm_sq(grid, metric, ui, ginv=ginv) for ui in u])
    gabs = np.sqrt(gsq)
    bracket = []
    for i in range(m):
        ric_term = np.einsum("...k,...kl,...l->...", grads[i], ric, grads[i])
        hsq = hessian_norm_sq(grid, metric, u[i], ginv=ginv)
        bracket.append(ric_term + hsq - gradient_of_gradient_norm_sq(grid, metric, u[i], geom))
    bracket = np.stack(bracket)
    dots = np.einsum("i...k,j...k->ij...", grads, lowers)
    w = lap.weights.reshape(shape)
    report = MarginReport()
    for k, eta in enumerate(family):
        eta = _as_fields(eta, m, shape)
        lhs = float(np.sum(w * bracket * eta * eta))
        for i in range(m):
            for j in range(m):
                if i != j:
                    lhs += float(np.sum(w * (root[i, j] * gabs[i] * gabs[j] * eta[i] * eta[j] - J[i, j] * dots[i, j] * eta[i] ** 2)))
        rhs = float(
            sum(np.sum(w * gsq[i] * grad_norm_sq(grid, metric, eta[i], ginv=ginv)) for i in range(m))
        )
        report.rows.append((k, lhs, rhs, rhs - lhs))
    return report
