"""Structured grids, the discrete Laplace-Beltrami operator and field utilities.

Fields are plain numpy arrays of shape ``grid.shape``; systems of ``m``
fields are arrays of shape ``(m, *grid.shape)``.  Nodes are flattened in
C order (axis 0 slowest), which is also the row order of every sparse
operator built here.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .errors import BallExceedsDomain
from .geometry import ChartSpec, Metric, christoffel, metric_inverse_det, ricci, tensor_norm_sq


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid over a chart.

    Periodic axes carry ``N`` nodes with spacing ``L / N`` and no
    duplicated endpoint; other axes carry ``N`` nodes including both ends.
    """

    chart: ChartSpec
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) != self.chart.dim:
            raise ValueError("one node count per axis is required")
        if min(shape) < 4:
            raise ValueError("every axis needs at least 4 nodes")

    @classmethod
    def uniform(cls, chart: ChartSpec, n: int) -> "Grid":
        return cls(chart, (n,) * chart.dim)

    @classmethod
    def cells(cls, chart: ChartSpec, n: int) -> "Grid":
        """``n`` cells per axis (``n + 1`` nodes on non-periodic axes).

        Grids built this way are nested: refining ``n`` by an integer factor
        keeps every coarse node.
        """
        return cls(chart, tuple(n if per else n + 1 for per in chart.periodic))

    @property
    def dim(self):
        return self.chart.dim

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def periodic(self):
        return self.chart.periodic

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.array(
            [
                (b - a) / n if per else (b - a) / (n - 1)
                for (a, b), n, per in zip(self.chart.ranges, self.shape, self.periodic)
            ]
        )

    @cached_property
    def axes(self) -> list:
        return [a + h * np.arange(n) for (a, _), h, n in zip(self.chart.ranges, self.spacing, self.shape)]

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @cached_property
    def axis_weights(self) -> list:
        """1D trapezoid weights per axis (plain ``h`` on periodic axes)."""
        out = []
        for h, n, per in zip(self.spacing, self.shape, self.periodic):
            w = np.full(n, h)
            if not per:
                w[0] = w[-1] = 0.5 * h
            out.append(w)
        return out

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Nodes on a non-periodic face of the chart."""
        mask = np.zeros(self.shape, dtype=bool)
        for k, per in enumerate(self.periodic):
            if per:
                continue
            idx = [slice(None)] * self.dim
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = -1
            mask[tuple(idx)] = True
        return mask

    def distance_to_boundary(self) -> np.ndarray:
        """Coordinate distance from each node to the nearest non-periodic face."""
        d = np.full(self.shape, np.inf)
        for k, ((a, b), per) in enumerate(zip(self.chart.ranges, self.periodic)):
            if per:
                continue
            x = self.points[..., k]
            d = np.minimum(d, np.minimum(x - a, b - x))
        return d

    def flat_index(self, node) -> int:
        return int(np.ravel_multi_index(tuple(node), self.shape))

    def nearest_node(self, x) -> tuple:
        x = np.asarray(x, dtype=float)
        idx = []
        for k, ((a, _), h, n, per) in enumerate(zip(self.chart.ranges, self.spacing, self.shape, self.periodic)):
            i = int(round((x[k] - a) / h))
            idx.append(i % n if per else min(max(i, 0), n - 1))
        return tuple(idx)

    def check_field(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-self.dim:] != self.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        return values


def sample(grid: Grid, f) -> np.ndarray:
    """Nodal values of an analytic function (anything callable on points)."""
    return np.asarray(f(grid.points), dtype=float) * np.ones(grid.shape)


def node_geometry(grid: Grid, metric: Metric) -> dict:
    """Inverse metric, volume density, Christoffel symbols and Ricci at nodes."""
    ginv, det = metric_inverse_det(metric, grid.points)
    return {
        "ginv": ginv,
        "sqrt_det": np.sqrt(det),
        "gamma": christoffel(metric, grid.points),
        "ricci": ricci(metric, grid.points),
    }


def node_weights(grid: Grid, metric: Metric) -> np.ndarray:
    """Quadrature weights ``sqrt|g| * prod(axis weight)`` at every node."""
    _, det = metric_inverse_det(metric, grid.points)
    w = np.sqrt(det)
    for k, wk in enumerate(grid.axis_weights):
        shape = [1] * grid.dim
        shape[k] = -1
        w = w * wk.reshape(shape)
    return w


def _pairwise_sum(a: np.ndarray) -> float:
    a = np.ascontiguousarray(a, dtype=float).ravel()
    while a.size > 1:
        if a.size % 2:
            a = np.append(a, 0.0)
        a = a[0::2] + a[1::2]
    return float(a[0]) if a.size else 0.0


def integrate(grid: Grid, metric: Metric, values, weights=None) -> float:
    """Nodal quadrature against dV_g with a fixed pairwise summation tree."""
    w = node_weights(grid, metric) if weights is None else weights
    return _pairwise_sum(np.asarray(values, dtype=float) * w)


# ---------------------------------------------------------------------------
# Laplace-Beltrami assembly
# ---------------------------------------------------------------------------


def _diff_1d(n, h, periodic):
    if periodic:
        return sp.diags([-np.ones(n), np.ones(n - 1), [1.0]], [0, 1, -(n - 1)], shape=(n, n), format="csr") / h
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


def _avg_1d(n, periodic):
    if periodic:
        return 0.5 * sp.diags([np.ones(n), np.ones(n - 1), [1.0]], [0, 1, -(n - 1)], shape=(n, n), format="csr")
    return 0.5 * sp.diags([np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def _kron_all(ops):
    out = ops[0]
    for op in ops[1:]:
        out = sp.kron(out, op, format="csr")
    return out


def _staggered(grid: Grid, offset_axes):
    """Coordinates and trapezoid volumes of points shifted by h/2 along ``offset_axes``."""
    coords, vols = [], []
    for k, (x, h, per, w) in enumerate(zip(grid.axes, grid.spacing, grid.periodic, grid.axis_weights)):
        if k in offset_axes:
            xs = x + 0.5 * h if per else x[:-1] + 0.5 * h
            coords.append(xs)
            vols.append(np.full(xs.size, h))
        else:
            coords.append(x)
            vols.append(w)
    pts = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1)
    vol = vols[0]
    for v in vols[1:]:
        vol = np.multiply.outer(vol, v)
    return pts, vol


@dataclass
class DiscreteLaplacian:
    """Assembled divergence-form Laplace-Beltrami operator.

    ``matrix`` is ``L = -W^-1 K`` with ``K`` the symmetric stiffness matrix
    and ``W`` the diagonal of nodal quadrature weights, so ``L`` is
    self-adjoint in the weighted inner product.  Under the Dirichlet
    option the rows of boundary nodes are zero and ``free`` excludes them.
    """

    grid: Grid
    metric: Metric
    matrix: sp.csr_matrix
    stiffness: sp.csr_matrix
    weights: np.ndarray
    free: np.ndarray
    bc: str = "neumann"
    flux_terms: list = field(default_factory=list, repr=False)

    def apply(self, values):
        """``L f`` through the factored flux form, so constants map to exactly 0."""
        values = np.asarray(values, dtype=float)
        cols = values.reshape(-1, self.grid.size).T
        acc = np.zeros_like(cols)
        for left, coef, right in self.flux_terms:
            acc += left.T @ (coef[:, None] * (right @ cols))
        out = -acc / self.weights[:, None]
        if self.bc == "dirichlet":
            out[~self.free] = 0.0
        return out.T.reshape(values.shape)

    def inner(self, f, g) -> float:
        return _pairwise_sum(np.asarray(f).ravel() * np.asarray(g).ravel() * self.weights)

    def energy(self, f) -> float:
        """Discrete Dirichlet energy ``f^T K f`` (approximates the integral of |grad f|^2)."""
        f = np.asarray(f, dtype=float).ravel()
        return float(f @ (self.stiffness @ f))

    def triplets(self):
        """Deduplicated ``(rows, cols, values)`` of the operator."""
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    @cached_property
    def free_index(self):
        return np.flatnonzero(self.free)


def assemble_laplacian(grid: Grid, metric: Metric, bc: str = "neumann") -> DiscreteLaplacian:
    """Second-order flux-form discretisation of the Laplace-Beltrami operator.

    Fluxes ``sqrt|g| g^ij d_j f`` live on half-nodes; periodic axes wrap and
    non-periodic axes get a zero boundary flux (``bc="neumann"``) or are
    eliminated (``bc="dirichlet"``).  Off-diagonal metric entries enter
    through cell-corner averaged differences, which keeps ``K`` symmetric.

    Raises
    ------
    NonPositiveDefinite
        If the metric fails to be positive definite at a flux point.
    """
    if bc not in ("neumann", "dirichlet"):
        raise ValueError(f"unknown boundary treatment {bc!r}")
    n = grid.dim
    eye = [sp.identity(s, format="csr") for s in grid.shape]
    diff = [_diff_1d(s, h, per) for s, h, per in zip(grid.shape, grid.spacing, grid.periodic)]
    avg = [_avg_1d(s, per) for s, per in zip(grid.shape, grid.periodic)]

    K = sp.csr_matrix((grid.size, grid.size))
    terms = []
    for i in range(n):
        pts, vol = _staggered(grid, (i,))
        ginv, det = metric_inverse_det(metric, pts)
        coef = (np.sqrt(det) * ginv[..., i, i] * vol).ravel()
        ops = list(eye)
        ops[i] = diff[i]
        D = _kron_all(ops)
        K = K + D.T @ sp.diags(coef) @ D
        terms.append((D, coef, D))
    for i, j in itertools.combinations(range(n), 2):
        pts, vol = _staggered(grid, (i, j))
        ginv, det = metric_inverse_det(metric, pts)
        coef = np.sqrt(det) * ginv[..., i, j] * vol
        if not np.any(coef):
            continue
        ops_i, ops_j = list(eye), list(eye)
        ops_i[i], ops_i[j] = diff[i], avg[j]
        ops_j[i], ops_j[j] = avg[i], diff[j]
        Di, Dj = _kron_all(ops_i), _kron_all(ops_j)
        C = sp.diags(coef.ravel())
        K = K + Di.T @ C @ Dj + Dj.T @ C @ Di
        terms += [(Di, coef.ravel(), Dj), (Dj, coef.ravel(), Di)]
    K = K.tocsr()
    K.sum_duplicates()
    K = (0.5 * (K + K.T)).tocsr()

    weights = node_weights(grid, metric).ravel()
    L = (-sp.diags(1.0 / weights) @ K).tocsr()
    free = np.ones(grid.size, dtype=bool)
    if bc == "dirichlet":
        free = ~grid.boundary_mask.ravel()
        L = (sp.diags(free.astype(float)) @ L).tocsr()
        L.eliminate_zeros()
    return DiscreteLaplacian(grid, metric, L, K, weights, free, bc, terms)


def weighted_adjoint_defect(lap: DiscreteLaplacian, f, g) -> float:
    """``|<Lf, g>_W - <f, Lg>_W| / (|f| |g|)`` for a pair of fields."""
    f, g = np.asarray(f, float), np.asarray(g, float)
    a = lap.inner(lap.apply(f), g)
    b = lap.inner(f, lap.apply(g))
    return abs(a - b) / (np.linalg.norm(f) * np.linalg.norm(g))


# ---------------------------------------------------------------------------
# finite differences at nodes
# ---------------------------------------------------------------------------


def d1(grid: Grid, values, axis: int) -> np.ndarray:
    """Centred first difference along ``axis`` (second-order one-sided at faces)."""
    values = np.asarray(values, dtype=float)
    ax = values.ndim - grid.dim + axis
    h = grid.spacing[axis]
    if grid.periodic[axis]:
        return (np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2.0 * h)
    return np.gradient(values, h, axis=ax, edge_order=2)


def d2(grid: Grid, values, axis: int) -> np.ndarray:
    """Centred second difference along ``axis``."""
    values = np.asarray(values, dtype=float)
    ax = values.ndim - grid.dim + axis
    h = grid.spacing[axis]
    if grid.periodic[axis]:
        return (np.roll(values, -1, axis=ax) - 2.0 * values + np.roll(values, 1, axis=ax)) / h**2
    v = np.moveaxis(values, ax, -1)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2]) / h**2
    out[..., 0] = (2.0 * v[..., 0] - 5.0 * v[..., 1] + 4.0 * v[..., 2] - v[..., 3]) / h**2
    out[..., -1] = (2.0 * v[..., -1] - 5.0 * v[..., -2] + 4.0 * v[..., -3] - v[..., -4]) / h**2
    return np.moveaxis(out, -1, ax)


def partials(grid: Grid, values) -> np.ndarray:
    """Coordinate gradient, shape ``(*values.shape, dim)``."""
    return np.stack([d1(grid, values, k) for k in range(grid.dim)], axis=-1)


def second_partials(grid: Grid, values) -> np.ndarray:
    """Matrix of second partials, shape ``(*values.shape, dim, dim)``."""
    n = grid.dim
    values = np.asarray(values, dtype=float)
    out = np.empty(values.shape + (n, n))
    for i in range(n):
        out[..., i, i] = d2(grid, values, i)
        for j in range(i + 1, n):
            out[..., i, j] = out[..., j, i] = d1(grid, d1(grid, values, i), j)
    return out


def grad_norm_sq(grid: Grid, metric: Metric, values, ginv=None) -> np.ndarray:
    """Nodal ``g^ij d_i f d_j f`` with centred differences."""
    if ginv is None:
        ginv, _ = metric_inverse_det(metric, grid.points)
    df = partials(grid, values)
    return np.einsum("...ij,...i,...j->...", ginv, df, df)


def discrete_hessian(grid: Grid, metric: Metric, values, gamma=None) -> np.ndarray:
    """Covariant Hessian from finite differences and exact Christoffel symbols."""
    if gamma is None:
        gamma = christoffel(metric, grid.points)
    return second_partials(grid, values) - np.einsum("...kij,...k->...ij", gamma, partials(grid, values))


def hessian_norm_sq(grid: Grid, metric: Metric, values, ginv=None) -> np.ndarray:
    if ginv is None:
        ginv, _ = metric_inverse_det(metric, grid.points)
    return tensor_norm_sq(ginv, discrete_hessian(grid, metric, values))


# ---------------------------------------------------------------------------
# geodesic distance, balls and cut-offs
# ---------------------------------------------------------------------------


def neighbour_offsets(dim: int, reach: int = 1) -> np.ndarray:
    """Primitive integer offsets in ``[-reach, reach]^dim``.

    ``reach=1`` gives the 8-neighbour (2D) and 26-neighbour (3D) stencils.
    """
    offs = []
    for off in itertools.product(range(-reach, reach + 1), repeat=dim):
        if any(off) and math.gcd(*[abs(o) for o in off]) == 1:
            offs.append(off)
    return np.array(offs, dtype=int)


def graph_adjacency(grid: Grid, metric: Metric, reach: int = 1) -> sp.csr_matrix:
    """Weighted grid graph; edge length ``sqrt(dx^T g(midpoint) dx)``."""
    idx = np.arange(grid.size).reshape(grid.shape)
    rows, cols, vals = [], [], []
    pts = grid.points
    for off in neighbour_offsets(grid.dim, reach):
        valid = np.ones(grid.shape, dtype=bool)
        nbr = idx
        for k, o in enumerate(off):
            if o == 0:
                continue
            nbr = np.roll(nbr, -o, axis=k)
            if not grid.periodic[k]:
                sl = [slice(None)] * grid.dim
                sl[k] = slice(grid.shape[k] - o, None) if o > 0 else slice(None, -o)
                valid[tuple(sl)] = False
        dx = off * grid.spacing
        mid = pts + 0.5 * dx
        length = np.sqrt(np.einsum("...ij,i,j->...", metric.g(mid), dx, dx))
        rows.append(idx[valid])
        cols.append(nbr[valid])
        vals.append(length[valid])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )


def geodesic_distance(grid: Grid, metric: Metric, source, reach: int = 1, adjacency=None) -> np.ndarray:
    """First-arrival distance from ``source`` by Dijkstra on the grid graph.

    With ``reach=1`` a flat chart's distance overestimates the true one by at
    most ``1/cos(pi/8) - 1`` (about 8.2%) in 2D; ``reach=2`` lowers this
    metrication error to roughly 2.7%.
    """
    if adjacency is None:
        adjacency = graph_adjacency(grid, metric, reach)
    src = source if np.isscalar(source) else grid.flat_index(source)
    d = dijkstra(adjacency, directed=True, indices=int(src))
    return d.reshape(grid.shape)


def ball_volume(grid: Grid, metric: Metric, center, R: float, reach: int | None = None, distance=None) -> float:
    """Volume of ``{d_g(center, .) <= R}``; never smaller than the centre's cell.

    The default stencil reach is 2 in 2D and 3 in 3D: the 8/26-neighbour
    balls are octagons/polyhedra about 10%/22% smaller than round balls.
    """
    if not R > 0:
        raise ValueError("radius must be positive")
    if reach is None:
        reach = 2 if grid.dim <= 2 else 3
    if distance is None:
        distance = geodesic_distance(grid, metric, center, reach)
    return integrate(grid, metric, (distance <= R).astype(float))


def smoothstep_cutoff(t):
    """1 on ``t <= 1``, 0 on ``t >= 2``, ``1 - 3s^2 + 2s^3`` with ``s = t - 1`` between."""
    s = np.clip(np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - 3.0 * s**2 + 2.0 * s**3


def cutoff_zeta_R(grid: Grid, metric: Metric, center, R: float, reach: int = 1, distance=None) -> np.ndarray:
    """Radial cut-off ``zeta(d_g/R)``: 1 on B_R, 0 outside B_2R.

    Raises
    ------
    BallExceedsDomain
        If B_2R reaches a non-periodic face of the chart.
    """
    if distance is None:
        distance = geodesic_distance(grid, metric, center, reach)
    if np.any(distance[grid.boundary_mask] < 2.0 * R):
        raise BallExceedsDomain(f"ball of radius {2 * R:g} is clipped by the chart boundary")
    return smoothstep_cutoff(distance / R)


# ---------------------------------------------------------------------------
# test-function families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunctionFamily:
    """Reproducible family of compactly supported test fields.

    ``kind="random-bump"`` draws ``(1 - r^2/rho^2)^3`` bumps whose supports
    stay inside the chart interior; ``kind="trig-mix"`` draws low-frequency
    trigonometric modes multiplied by a window that vanishes near the
    non-periodic faces.
    """

    __test__ = False  # not a pytest class

    seed: int
    kind: str = "random-bump"
    count: int = 1000
    amplitude: tuple = (0.2, 1.0)
    radius: tuple = (0.1, 0.35)  # fraction of the shortest axis length
    max_frequency: int = 2

    def fields(self, grid: Grid, m: int = 1):
        rng = np.random.default_rng(self.seed)
        for _ in range(self.count):
            if self.kind == "random-bump":
                yield np.stack([self._bump(grid, rng) for _ in range(m)])
            elif self.kind == "trig-mix":
                yield np.stack([self._trig(grid, rng) for _ in range(m)])
            else:
                raise ValueError(f"unknown test-function kind {self.kind!r}")

    def _amp(self, rng):
        lo, hi = self.amplitude
        return rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])

    def _bump(self, grid, rng):
        L = grid.chart.lengths
        rho = rng.uniform(*self.radius) * L.min()
        r2 = np.zeros(grid.shape)
        for k, ((a, b), per) in enumerate(zip(grid.chart.ranges, grid.periodic)):
            if per:
                c = rng.uniform(a, b)
                dx = (grid.points[..., k] - c + 0.5 * L[k]) % L[k] - 0.5 * L[k]
            else:
                margin = min(rho * 1.05, 0.45 * L[k])
                c = rng.uniform(a + margin, b - margin)
                dx = grid.points[..., k] - c
            r2 = r2 + dx**2
        return self._amp(rng) * np.clip(1.0 - r2 / rho**2, 0.0, None) ** 3

    def _trig(self, grid, rng):
        out = np.zeros(grid.shape)
        L = grid.chart.lengths
        for _ in range(3):
            k = rng.integers(-self.max_frequency, self.max_frequency + 1, size=grid.dim)
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(2 * np.pi * k[i] * (grid.points[..., i] - grid.chart.ranges[i][0]) / L[i] for i in range(grid.dim))
            out = out + self._amp(rng) * np.cos(arg + phase)
        return out * interior_window(grid)


def interior_window(grid: Grid, fraction: float = 0.1) -> np.ndarray:
    """Smooth window, 1 in the interior and 0 within ``fraction`` of a non-periodic face."""
    w = np.ones(grid.shape)
    for k, ((a, b), per) in enumerate(zip(grid.chart.ranges, grid.periodic)):
        if per:
            continue
        x = grid.points[..., k]
        delta = fraction * (b - a)
        t = np.minimum(x - a, b - x) / delta
        # 0 within delta of the face, 1 beyond 2 * delta
        w = w * (1.0 - smoothstep_cutoff(t))
    return w


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_csv(grid: Grid, values, path) -> None:
    """One row per node: coordinates then value."""
    values = grid.check_field(values)
    pts = grid.points.reshape(-1, grid.dim)
    header = ",".join([f"x{k}" for k in range(grid.dim)] + ["value"])
    data = np.column_stack([pts, values.ravel()])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def write_binary(values, path) -> None:
    """Layout: uint64 ndim, ndim uint64 sizes, then row-major float64, all little-endian."""
    values = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", values.ndim))
        fh.write(struct.pack(f"<{values.ndim}Q", *values.shape))
        fh.write(values.tobytes(order="C"))


def read_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (ndim,) = struct.unpack("<Q", fh.read(8))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(shape).astype(float)
