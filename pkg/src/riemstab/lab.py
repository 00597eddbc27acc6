"""End-to-end experiments: each returns an :class:`ExperimentReport`.

Verdicts use a one-sided vocabulary.  ``consistent`` means no computed
quantity contradicts the expected behaviour within the stated tolerances;
``violation`` means one did (and the offending inputs are attached for
replay); ``inconclusive`` means the data cannot decide.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.sparse.linalg import splu
from skimage.measure import find_contours

from . import geometry as geo
from .discretization import (
    Grid,
    TestFunctionFamily,
    assemble_laplacian,
    ball_volume,
    discrete_hessian,
    geodesic_distance,
    grad_norm_sq,
    node_geometry,
    partials,
    sample,
)
from .errors import (
    BallExceedsDomain,
    EmptyLevelSet,
    GradientBelowFloor,
    SolverError,
)
from .geometry import AnalyticFunction, ChartSpec, make_chart
from .stability import classify_stability, poincare_check, stability_inequality_check
from .system import Nonlinearity, check_symmetric, gradient_flow, initial_data, newton_solve, sample_states

log = logging.getLogger(__name__)

VERDICTS = ("consistent", "violation", "inconclusive")


def jsonable(obj):
    """Convert numpy scalars/arrays and non-finite floats to plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def digest(inputs: dict) -> str:
    text = json.dumps(jsonable(inputs), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ExperimentReport:
    experiment: str
    inputs: dict
    records: list
    verdict: str
    tolerances: dict
    seed: int | None = None
    summary: dict = field(default_factory=dict)
    replay: list = field(default_factory=list)  # offending cases for a violation

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    @property
    def inputs_digest(self) -> str:
        return digest(self.inputs)

    def to_dict(self) -> dict:
        return jsonable(
            {
                "experiment": self.experiment,
                "inputs": self.inputs,
                "inputs_digest": self.inputs_digest,
                "records": self.records,
                "verdict": self.verdict,
                "tolerances": self.tolerances,
                "seed": self.seed,
                "summary": self.summary,
                "replay": self.replay,
            }
        )

    def table(self):
        """``(columns, rows)`` of the scalar fields of ``records``, in first-seen order."""
        cols: list = []
        for r in self.records:
            for k, v in r.items():
                if k not in cols and not isinstance(v, (list, dict, tuple)):
                    cols.append(k)
        rows = [[jsonable(r.get(c, "")) for c in cols] for r in self.records]
        return cols, rows


def chart_inputs(chart: ChartSpec) -> dict:
    return {"name": chart.name, "metric": chart.metric, "params": dict(chart.params), "ranges": chart.ranges}


def interior_mask(grid: Grid, margin: float, stride: int = 1) -> np.ndarray:
    """Nodes at coordinate distance ``>= margin`` from every non-periodic face.

    With ``stride > 1`` only nodes whose indices are multiples of ``stride``
    are kept (the nodes shared with a coarser nested grid).
    """
    mask = grid.distance_to_boundary() >= margin - 1e-12
    if stride > 1:
        for idx in np.indices(grid.shape):
            mask &= idx % stride == 0
    return mask


def _strides(resolutions):
    n0 = resolutions[0]
    if any(n % n0 for n in resolutions):
        raise ValueError("resolutions must be integer multiples of the coarsest one")
    return [n // n0 for n in resolutions]


def fit_order(h, err) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    h, err = np.asarray(h, float), np.asarray(err, float)
    if np.any(err <= 0) or len(h) < 2:
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def trig_test_functions(chart: ChartSpec, count: int = 10, seed: int = 0, max_k: int = 2) -> list:
    """Smooth functions ``sum a cos(k . x + p)`` with integer wave numbers per axis length."""
    rng = np.random.default_rng(seed)
    base = 2 * np.pi / chart.lengths
    out = []
    for c in range(count):
        terms = 1 + c % 2
        ks = []
        while len(ks) < terms:
            k = rng.integers(-max_k, max_k + 1, size=chart.dim)
            if np.any(k):
                ks.append(k * base)
        amps = rng.uniform(0.5, 1.5, size=terms)
        out.append(geo.trig_series(amps, ks, rng.uniform(0, 2 * np.pi, size=terms), label=f"trig{c}"))
    return out


# ---------------------------------------------------------------------------
# Bochner identity and Laplacian convergence
# ---------------------------------------------------------------------------


def discrete_bochner_residual(lap, values, geom=None) -> np.ndarray:
    """``1/2 L|grad f|^2 - |Hess f|^2 - grad(L f) . grad f - Ric(grad f, grad f)`` at nodes."""
    grid, metric = lap.grid, lap.metric
    geom = geom or node_geometry(grid, metric)
    ginv = geom["ginv"]
    q = grad_norm_sq(grid, metric, values, ginv=ginv)
    df = partials(grid, values)
    up = np.einsum("...ij,...j->...i", ginv, df)
    dot = np.einsum("...i,...i->...", up, partials(grid, lap.apply(values)))
    ric = np.einsum("...i,...ij,...j->...", up, geom["ricci"], up)
    hsq = geo.tensor_norm_sq(ginv, discrete_hessian(grid, metric, values, gamma=geom["gamma"]))
    return 0.5 * lap.apply(q) - hsq - dot - ric


def bochner_sweep(
    chart: ChartSpec,
    functions=None,
    resolutions=(32, 64, 128),
    margin: float = 0.3,
    order_band=(1.8, 2.2),
    floor: float = 1e-10,
) -> ExperimentReport:
    """Convergence of the discrete Bochner residual under grid refinement.

    Resolution ``n`` means ``n`` cells per axis, so the grids are nested;
    the residual max-norm is taken over the coarsest grid's nodes lying at
    least ``margin`` (chart units) away from non-periodic faces, which keeps
    the sampled points fixed under refinement.  A function whose residual stays
    below ``floor`` at every resolution counts as exact.
    """
    if len(resolutions) < 3:
        raise ValueError("need at least 3 resolutions")
    functions = functions if functions is not None else trig_test_functions(chart)
    metric = chart.metric_field()
    records, per_fn = [], {}
    hs = []
    for n, stride in zip(resolutions, _strides(resolutions)):
        grid = Grid.cells(chart, n)
        lap = assemble_laplacian(grid, metric)
        geom = node_geometry(grid, metric)
        mask = interior_mask(grid, margin, stride)
        hs.append(float(grid.spacing.max()))
        for k, f in enumerate(functions):
            res = discrete_bochner_residual(lap, sample(grid, f), geom)
            err = float(np.abs(res[mask]).max())
            per_fn.setdefault(k, []).append(err)
            records.append({"function": f.label or f"f{k}", "n": n, "h": hs[-1], "residual": err})
    orders, bad = {}, []
    for k, errs in per_fn.items():
        label = functions[k].label or f"f{k}"
        if max(errs) <= floor:
            orders[label] = None
            continue
        p = fit_order(hs, errs)
        orders[label] = p
        if not order_band[0] <= p <= order_band[1]:
            bad.append(label)
    verdict = "consistent" if not bad else "inconclusive"
    return ExperimentReport(
        "bochner_sweep",
        {"chart": chart_inputs(chart), "resolutions": list(resolutions), "functions": [f.label for f in functions]},
        records,
        verdict,
        {"order_band": list(order_band), "margin": margin, "floor": floor},
        summary={"orders": orders, "outside_band": bad},
    )


def laplacian_convergence(
    chart: ChartSpec,
    f: AnalyticFunction,
    expected,
    resolutions=(32, 64, 128),
    margin: float = 0.3,
) -> ExperimentReport:
    """Max error of ``L f`` against a known ``expected(x)``; constant ``C = err / h^2`` and refinement ratios.

    Sampling follows :func:`bochner_sweep` (nested grids, fixed interior nodes).
    """
    metric = chart.metric_field()
    records = []
    for n, stride in zip(resolutions, _strides(resolutions)):
        grid = Grid.cells(chart, n)
        lap = assemble_laplacian(grid, metric)
        mask = interior_mask(grid, margin, stride)
        err = float(np.abs(lap.apply(sample(grid, f)) - sample(grid, expected))[mask].max())
        h = float(grid.spacing.max())
        records.append({"n": n, "h": h, "error": err, "C": err / h**2})
    ratios = [a["error"] / b["error"] if b["error"] > 0 else float("inf") for a, b in zip(records, records[1:])]
    order = fit_order([r["h"] for r in records], [r["error"] for r in records])
    ok = all(r >= 3.6 for r in ratios)
    return ExperimentReport(
        "laplacian_convergence",
        {"chart": chart_inputs(chart), "function": f.label, "resolutions": list(resolutions)},
        records,
        "consistent" if ok else "inconclusive",
        {"min_ratio": 3.6, "margin": margin},
        summary={"ratios": ratios, "order": order, "C_max": max(r["C"] for r in records)},
    )


# ---------------------------------------------------------------------------
# Hessian inequality
# ---------------------------------------------------------------------------


def collinearity_defect(ginv, hess, grad_lower) -> np.ndarray:
    """Max over k of the sine of the angle between ``g^-1 Hess[:, k]`` and ``grad f``.

    Rows with a vanishing Hessian column contribute 0.
    """
    v = np.einsum("...ij,...j->...i", ginv, grad_lower)
    vv = np.einsum("...i,...i->...", v, grad_lower)
    out = np.zeros(vv.shape)
    for k in range(hess.shape[-1]):
        a = np.einsum("...ij,...j->...i", ginv, hess[..., :, k])
        aa = np.einsum("...i,...ij,...j->...", a, np.linalg.inv(ginv), a)
        ab = np.einsum("...i,...i->...", a, grad_lower)
        with np.errstate(divide="ignore", invalid="ignore"):
            cos2 = np.where((aa > 1e-24) & (vv > 0), ab * ab / (aa * vv), 1.0)
        out = np.maximum(out, np.sqrt(np.clip(1.0 - cos2, 0.0, 1.0)))
    return out


def hessian_inequality_scan(
    chart: ChartSpec,
    functions,
    n: int = 64,
    eps_grad: float = 1e-3,
    tol: float = 1e-8,
    equality_rtol: float = 1e-6,
) -> ExperimentReport:
    """Scan ``|grad|grad f||^2 <= |Hess f|^2`` over grid nodes with ``|grad f| > eps_grad``.

    The analytic path evaluates both sides from exact derivatives; the
    discrete path (finite differences) is reported alongside.  At nodes
    where the two sides agree to ``equality_rtol`` the collinearity defect
    of the equality case is reported.
    """
    if not eps_grad > 0:
        raise ValueError("eps_grad must be positive")
    metric = chart.metric_field()
    grid = Grid.uniform(chart, n)
    x = grid.points
    ginv, _ = geo.metric_inverse_det(metric, x)
    gamma = geo.christoffel(metric, x)
    records, offenders = [], []
    for k, f in enumerate(functions):
        _, q = geo.gradient(metric, f, x)
        sel = np.sqrt(q) > eps_grad
        label = f.label or f"f{k}"
        if not np.any(sel):
            records.append({"function": label, "nodes": 0, "max_excess": 0.0, "max_excess_discrete": 0.0,
                            "equality_nodes": 0, "max_collinearity_defect": 0.0})
            continue
        lhs = geo.grad_of_grad_norm_sq(metric, f, x)
        H = geo.hessian(metric, f, x)
        rhs = geo.tensor_norm_sq(ginv, H)
        excess = (lhs - rhs) / (1.0 + rhs)
        vals = sample(grid, f)
        H_d = discrete_hessian(grid, metric, vals, gamma=gamma)
        df_d = partials(grid, vals)
        rhs_d = geo.tensor_norm_sq(ginv, H_d)
        Hv = np.einsum("...kl,...lm,...m->...k", H_d, ginv, df_d)
        q_d = np.einsum("...ij,...i,...j->...", ginv, df_d, df_d)
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs_d = np.einsum("...k,...kl,...l->...", Hv, ginv, Hv) / q_d
        excess_d = (lhs_d - rhs_d) / (1.0 + rhs_d)
        eq = sel & (np.abs(lhs - rhs) <= equality_rtol * (1.0 + rhs))
        defect = collinearity_defect(ginv, H, f.grad(x))
        rec = {
            "function": label,
            "nodes": int(sel.sum()),
            "max_excess": float(excess[sel].max()),
            "max_excess_discrete": float(excess_d[sel].max()),
            "equality_nodes": int(eq.sum()),
            "max_collinearity_defect": float(defect[eq].max()) if eq.any() else 0.0,
        }
        records.append(rec)
        if rec["max_excess"] > tol:
            worst = np.unravel_index(np.argmax(np.where(sel, excess, -np.inf)), grid.shape)
            offenders.append({"function": label, "node": list(worst), "point": x[worst].tolist()})
    return ExperimentReport(
        "hessian_inequality_scan",
        {"chart": chart_inputs(chart), "n": n, "functions": [f.label for f in functions]},
        records,
        "violation" if offenders else "consistent",
        {"eps_grad": eps_grad, "tol": tol, "equality_rtol": equality_rtol},
        replay=offenders,
    )


# ---------------------------------------------------------------------------
# Liouville experiment on compact charts
# ---------------------------------------------------------------------------


def constancy_defect(u) -> float:
    return float(max(np.ptp(ui) for ui in np.asarray(u)))


def _one_start(lap, nl, u0, flow, tol_const_rel):
    rec = {"flow_blowup": False}
    u = u0
    try:
        u = gradient_flow(lap, nl, u0, flow["dt"], flow["steps"], stop_tol=flow["stop_tol"])
    except SolverError as exc:
        rec["flow_blowup"] = True
        u = exc.state
    try:
        u, rep = newton_solve(lap, nl, u, tol=flow["newton_tol"])
        rec.update(converged=True, newton_iterations=rep.iterations, residual=rep.residual)
    except SolverError as exc:
        rec.update(converged=False, newton_iterations=None, residual=None, failure=type(exc).__name__)
        return rec, None
    res = classify_stability(lap, nl, u)
    sup = float(np.abs(u).max())
    rec.update(
        verdict=res.verdict,
        mu=res.mu,
        defect=constancy_defect(u),
        sup=sup,
        tol_const=tol_const_rel * (1.0 + sup),
        means=[float(ui.mean()) for ui in u],
    )
    return rec, u


def liouville_compact(
    chart: ChartSpec,
    nl: Nonlinearity,
    n_starts: int = 20,
    seed: int = 0,
    n: int = 64,
    amplitude: float = 0.5,
    dt: float = 0.2,
    steps: int = 500,
    stop_tol: float = 1e-8,
    newton_tol: float = 1e-9,
    tol_const: float = 1e-6,
    controls=(),
    jobs: int = 1,
) -> ExperimentReport:
    """Multi-start search for stable solutions and a constancy check on each.

    Every start runs gradient flow, then Newton, then the stability
    classifier.  A Stable outcome whose oscillation ``max_i osc(u_i)``
    exceeds ``tol_const (1 + ||u||_inf)`` is a violation.  ``controls`` are
    constant states (one value per component, or a scalar) that must be
    classified Unstable; one classified otherwise is also a violation.
    Non-periodic faces get zero-flux boundary conditions.
    """
    metric = chart.metric_field()
    grid = Grid.uniform(chart, n)
    lap = assemble_laplacian(grid, metric, bc="neumann")
    sym, asym = check_symmetric(nl, sample_states(nl.m, count=1000, seed=seed))
    flow = {"dt": dt, "steps": steps, "stop_tol": stop_tol, "newton_tol": newton_tol}
    starts = [initial_data(grid, nl.m, "random", seed=seed + s, amplitude=amplitude) for s in range(n_starts)]

    def run(s):
        rec, _ = _one_start(lap, nl, starts[s], flow, tol_const)
        rec["start"] = s
        rec["start_seed"] = seed + s
        return rec

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, range(n_starts)))
    else:
        records = [run(s) for s in range(n_starts)]

    offenders = []
    for rec in records:
        if rec.get("verdict") == "stable" and rec["defect"] > rec["tol_const"]:
            offenders.append({"start_seed": rec["start_seed"], "amplitude": amplitude, "flow": flow})
    control_records = []
    for value in controls:
        u = initial_data(grid, nl.m, "constant", value=value)
        res = classify_stability(lap, nl, u)
        crec = {"control": jsonable(value), "verdict": res.verdict, "mu": res.mu}
        control_records.append(crec)
        if res.verdict != "unstable":
            offenders.append({"control": jsonable(value), "expected": "unstable"})
    stable = [r for r in records if r.get("verdict") == "stable"]
    if offenders:
        verdict = "violation"
    elif not stable:
        verdict = "inconclusive"
    else:
        verdict = "consistent"
    summary = {
        "starts": n_starts,
        "converged": sum(1 for r in records if r.get("converged")),
        "stable": len(stable),
        "stable_nonconstant": sum(1 for r in stable if r["defect"] > r["tol_const"]),
        "unstable": sum(1 for r in records if r.get("verdict") == "unstable"),
        "indeterminate": sum(1 for r in records if r.get("verdict") == "indeterminate"),
        "symmetric": sym,
        "max_asymmetry": asym,
        "controls": control_records,
    }
    return ExperimentReport(
        "liouville_compact",
        {"chart": chart_inputs(chart), "nonlinearity": nl.name, "params": dict(nl.params), "n": n,
         "n_starts": n_starts, "amplitude": amplitude, "flow": flow, "controls": jsonable(list(controls))},
        records,
        verdict,
        {"tol_const": tol_const, "newton_tol": newton_tol},
        seed=seed,
        summary=summary,
        replay=offenders,
    )


def stability_suite(
    chart: ChartSpec,
    nl: Nonlinearity,
    n: int = 64,
    bc: str = "neumann",
    initial: dict | None = None,
    dt: float = 0.2,
    steps: int = 500,
    family_kind: str = "random-bump",
    family_count: int = 1000,
    poincare_count: int = 100,
    seed: int = 0,
    slack: float = 1e-6,
    poincare_slack: float = 1e-5,
    newton_tol: float = 1e-9,
) -> ExperimentReport:
    """Solve, classify, then test both quadratic-form inequalities on a Stable solution.

    Rows carry ``check`` (``stability`` or ``poincare``), the family seed,
    the member index, LHS, RHS and margin; stability rows add the literal
    ``|d_i H_i|`` diagonal column.  A margin below ``-slack * RHS`` is a
    violation.  A solution that is not Stable makes the run inconclusive.
    """
    metric = chart.metric_field()
    grid = Grid.uniform(chart, n)
    lap = assemble_laplacian(grid, metric, bc=bc)
    initial = dict(initial or {"kind": "random", "amplitude": 0.5})
    u0 = initial_data(grid, nl.m, seed=seed, **initial)
    if bc == "dirichlet":
        u0[:, grid.boundary_mask] = 0.0
    inputs = {"chart": chart_inputs(chart), "nonlinearity": nl.name, "params": dict(nl.params), "n": n, "bc": bc,
              "initial": initial, "dt": dt, "steps": steps, "family_kind": family_kind,
              "family_count": family_count, "poincare_count": poincare_count}
    tolerances = {"slack": slack, "poincare_slack": poincare_slack, "newton_tol": newton_tol}
    u = gradient_flow(lap, nl, u0, dt, steps, stop_tol=1e-8)
    u, rep = newton_solve(lap, nl, u, tol=newton_tol)
    res = classify_stability(lap, nl, u)
    summary = {"classification": res.verdict, "mu": res.mu, "newton_iterations": rep.iterations,
               "residual": rep.residual, "defect": constancy_defect(u), "reason": res.reason}
    if res.verdict != "stable":
        return ExperimentReport("stability_suite", inputs, [], "inconclusive", tolerances, seed, summary)
    fam = TestFunctionFamily(seed, kind=family_kind, count=family_count)
    ineq = stability_inequality_check(lap, nl, u, fam.fields(grid, nl.m))
    pfam = TestFunctionFamily(seed + 1, kind="random-bump", count=poincare_count)
    poin = poincare_check(lap, nl, u, pfam.fields(grid, nl.m))
    records = []
    for (k, lhs, rhs, mg), (_, lit, _, mlit) in zip(ineq.rows, ineq.literal):
        records.append({"check": "stability", "seed": seed, "index": k, "lhs": lhs, "rhs": rhs, "margin": mg,
                        "lhs_literal": lit, "margin_literal": mlit})
    for k, lhs, rhs, mg in poin.rows:
        records.append({"check": "poincare", "seed": seed + 1, "index": k, "lhs": lhs, "rhs": rhs, "margin": mg})
    bad = [r for r in records
           if r["margin"] < -(slack if r["check"] == "stability" else poincare_slack) * max(r["rhs"], 0.0)]
    summary.update(
        stability_min_margin=ineq.min_margin,
        stability_worst_relative=ineq.worst_relative(),
        literal_min_margin=min((r[3] for r in ineq.literal), default=0.0),
        poincare_min_margin=poin.min_margin,
        poincare_worst_relative=poin.worst_relative(),
    )
    replay = [{"check": r["check"], "seed": r["seed"], "index": r["index"]} for r in bad]
    return ExperimentReport("stability_suite", inputs, records, "violation" if bad else "consistent", tolerances,
                            seed, summary, replay)


# ---------------------------------------------------------------------------
# volume growth and capacity
# ---------------------------------------------------------------------------


def volume_growth(
    dim: int = 2,
    R_list=(2.0, 4.0, 8.0, 16.0),
    h: float | None = None,
    reach: int | None = None,
    min_cells: float = 8.0,
    rtol: float = 0.15,
) -> ExperimentReport:
    """``R^-4 |B_R|`` for geodesic balls about the centre of a flat box.

    Rows with ``R < min_cells * h`` are flagged inconclusive.  Consecutive
    conclusive rows whose radii double are compared with the closed-form
    factor ``2^(4 - dim)``.  ``h`` defaults to 0.25 (2D) and 0.5 (3D); the
    3D default stencil is the 26-neighbour one to keep the graph small.
    The graph-distance metrication error scales
    every ball by nearly the same factor, so it cancels in these ratios.
    """
    if dim not in (2, 3):
        raise ValueError("volume_growth supports dimensions 2 and 3")
    if h is None:
        h = 0.25 if dim == 2 else 0.5
    R_list = sorted(float(r) for r in R_list)
    half = R_list[-1] + 2 * h
    nodes = int(round(2 * half / h)) + 1
    chart = make_chart("flat_box", dim=dim, lower=-half, upper=half)
    grid = Grid(chart, (nodes,) * dim)
    metric = chart.metric_field()
    if reach is None:
        reach = 2 if dim == 2 else 1
    centre = (nodes // 2,) * dim
    dist = geodesic_distance(grid, metric, centre, reach)
    records = []
    for R in R_list:
        vol = ball_volume(grid, metric, centre, R, distance=dist)
        exact = math.pi * R**2 if dim == 2 else 4.0 / 3.0 * math.pi * R**3
        records.append({"R": R, "volume": vol, "ratio": vol / R**4, "exact_ratio": exact / R**4,
                        "conclusive": R >= min_cells * h})
    expected = 2.0 ** (4 - dim)
    factors, ok = [], True
    for a, b in zip(records, records[1:]):
        if not (a["conclusive"] and b["conclusive"]) or abs(b["R"] / a["R"] - 2.0) > 1e-9:
            continue
        fac = a["ratio"] / b["ratio"]
        factors.append({"R": a["R"], "factor": fac})
        ok &= abs(fac - expected) <= rtol * expected
    conclusive = [r["ratio"] for r in records if r["conclusive"]]
    decreasing = all(x > y for x, y in zip(conclusive, conclusive[1:]))
    if not factors:
        verdict = "inconclusive"
    elif decreasing and ok:
        verdict = "consistent"
    else:
        verdict = "violation"
    return ExperimentReport(
        "volume_growth",
        {"dim": dim, "R_list": R_list, "h": h, "reach": reach},
        records,
        verdict,
        {"rtol": rtol, "min_cells": min_cells},
        summary={"expected_factor": expected, "factors": factors, "decreasing": decreasing},
        replay=[] if verdict != "violation" else [{"dim": dim, "R_list": R_list, "h": h, "reach": reach}],
    )


def capacity(lap, inner, outer) -> float:
    """Discrete capacity: Dirichlet energy ``f^T K f`` of the harmonic ``f`` with
    ``f = 1`` on ``inner`` and ``f = 0`` on ``outer`` (boolean node masks)."""
    inner = np.asarray(inner, bool).ravel()
    outer = np.asarray(outer, bool).ravel()
    if np.any(inner & outer):
        raise ValueError("inner and outer sets overlap")
    free = ~(inner | outer)
    f = inner.astype(float)
    K = lap.stiffness.tocsr()
    fi = np.flatnonzero(free)
    if fi.size:
        Kff = K[fi][:, fi].tocsc()
        rhs = -(K[fi] @ f)
        f[fi] = splu(Kff).solve(rhs)
    return float(f @ (K @ f))


def radial_capacity(dim: int, R: float, n_radial: int = 257, n_angular: int = 16) -> float:
    """``cap(B_1, B_R)`` in flat R^dim via the polar/spherical chart on ``1 <= r <= R``."""
    if R <= 1.0:
        return float("inf")
    if dim == 2:
        chart = make_chart("flat_polar", r_min=1.0, r_max=R)
        shape = (n_radial, n_angular)
    elif dim == 3:
        chart = make_chart("flat_spherical", r_min=1.0, r_max=R)
        shape = (n_radial, n_angular, 4)  # the potential is radial: phi needs no resolution
    else:
        raise ValueError("radial capacity supports dimensions 2 and 3")
    grid = Grid(chart, shape)
    lap = assemble_laplacian(grid, chart.metric_field())
    r_idx = np.indices(shape)[0]
    return capacity(lap, r_idx == 0, r_idx == shape[0] - 1)


def annulus_capacity(grid: Grid, metric, center, r_in: float, r_out: float, reach: int | None = None) -> float:
    """Capacity of ``{d <= r_in}`` relative to ``{d >= r_out}`` with graph geodesic distance.

    Raises
    ------
    BallExceedsDomain
        If the outer ball reaches a non-periodic chart face.
    """
    if r_out <= r_in:
        raise BallExceedsDomain(f"degenerate annulus r_in={r_in:g} >= r_out={r_out:g}")
    if reach is None:
        reach = 2 if grid.dim <= 2 else 1
    d = geodesic_distance(grid, metric, center, reach)
    if np.any(d[grid.boundary_mask] < r_out):
        raise BallExceedsDomain(f"ball of radius {r_out:g} is clipped by the chart boundary")
    lap = assemble_laplacian(grid, metric)
    return capacity(lap, d <= r_in, d >= r_out)


def parabolicity_capacity(
    dim: int = 2,
    R_list=(8.0, 16.0, 32.0),
    n_radial: int = 257,
    n_angular: int = 16,
    rtol: float = 0.05,
) -> ExperimentReport:
    """Capacity criterion: ``cap(B_1, B_R)`` for flat ``R^dim`` as ``R`` grows.

    Capacities tending to 0 indicate parabolicity (2D: ``2 pi / ln R``);
    a positive plateau indicates non-parabolicity (3D: ``4 pi / (1 - 1/R)``).
    The verdict compares with these closed forms and checks that the
    capacities are positive and nonincreasing.
    """
    records, ok = [], True
    for R in R_list:
        cap = radial_capacity(dim, float(R), n_radial, n_angular)
        if R <= 1.0:
            records.append({"R": float(R), "capacity": cap, "exact": float("inf"), "rel_error": None, "degenerate": True})
            continue
        exact = 2 * math.pi / math.log(R) if dim == 2 else 4 * math.pi / (1 - 1 / R)
        rel = abs(cap - exact) / exact
        ok &= rel <= rtol
        records.append({"R": float(R), "capacity": cap, "exact": exact, "rel_error": rel, "degenerate": False})
    caps = [r["capacity"] for r in records if not r["degenerate"]]
    monotone = all(c > 0 for c in caps) and all(a >= b for a, b in zip(caps, caps[1:]))
    if not caps:
        verdict = "inconclusive"
    else:
        verdict = "consistent" if ok and monotone else "violation"
    plateau = 4 * math.pi if dim == 3 else 0.0
    return ExperimentReport(
        "parabolicity_capacity",
        {"dim": dim, "R_list": [float(r) for r in R_list], "n_radial": n_radial, "n_angular": n_angular},
        records,
        verdict,
        {"rtol": rtol},
        summary={
            "criterion": "capacity criterion",
            "classification": "parabolic-consistent" if dim == 2 else "non-parabolic",
            "limit": plateau,
            "monotone": monotone,
        },
        replay=[] if verdict != "violation" else [{"dim": dim, "R_list": list(R_list), "n_radial": n_radial}],
    )


# ---------------------------------------------------------------------------
# level sets and geodesics
# ---------------------------------------------------------------------------


@dataclass
class LevelCurve:
    """Level-curve points resampled at (nearly) unit ``g``-speed.

    ``points`` has shape ``(k, 2)`` in chart coordinates with parameter
    spacing ``ds``.
    """

    points: np.ndarray
    ds: float
    speed_error: float
    eps_grad: float
    inside: np.ndarray | None = None  # samples in the fundamental domain (excludes wrap padding)

    @property
    def length(self) -> float:
        """``g``-length of the part of the curve inside the chart's fundamental domain."""
        if self.inside is None:
            return self.ds * (len(self.points) - 1)
        return self.ds * float(np.count_nonzero(self.inside[1:] & self.inside[:-1]))


def _g_length(metric, pts):
    seg = np.diff(pts, axis=0)
    mid = 0.5 * (pts[1:] + pts[:-1])
    return np.sqrt(np.einsum("...ij,...i,...j->...", metric.g(mid), seg, seg))


def _resample(metric, pts, ds_target, passes=3):
    s = np.concatenate([[0.0], np.cumsum(_g_length(metric, pts))])
    keep = np.concatenate([[True], np.diff(s) > 1e-14])
    pts, s = pts[keep], s[keep]
    for _ in range(passes):
        spline = CubicSpline(s, pts, axis=0)
        count = max(int(round(s[-1] / ds_target)), 2)
        t = np.linspace(0.0, s[-1], count + 1)
        fine = spline(np.linspace(0.0, s[-1], 8 * count + 1))
        sf = np.concatenate([[0.0], np.cumsum(_g_length(metric, fine))])
        pts = spline(np.interp(t * sf[-1] / s[-1], sf, np.linspace(0.0, s[-1], 8 * count + 1)))
        s = t * sf[-1] / s[-1]
    return pts, s[1] - s[0]


def extract_level_curves(grid: Grid, metric, values, level: float, eps_grad: float, min_points: int = 10) -> list:
    """Contours of a 2D field at ``level`` where ``|grad u|_g > eps_grad``.

    Periodic axes are padded by wrapping so closed curves are not cut at the
    seam.  Curves with fewer than ``min_points`` samples are skipped.

    Raises
    ------
    EmptyLevelSet
        If no contour exists at ``level``.
    GradientBelowFloor
        If contours exist but none crosses the region above ``eps_grad``.
    """
    if grid.dim != 2:
        raise ValueError("level curves need a 2D chart")
    values = np.asarray(values, dtype=float)
    pad = 4
    widths = [(pad, pad) if per else (0, 0) for per in grid.periodic]
    padded = np.pad(values, widths, mode="wrap")
    offsets = np.array([-pad if per else 0 for per in grid.periodic], dtype=float)
    origin = np.array([a for a, _ in grid.chart.ranges])
    h = grid.spacing
    gsq = grad_norm_sq(grid, metric, values)
    ax = [np.arange(-w[0], n + w[1]) * hk + o for (w, n, hk, o) in zip(widths, grid.shape, h, origin)]
    gnorm = RegularGridInterpolator(ax, np.sqrt(np.pad(gsq, widths, mode="wrap")), bounds_error=False, fill_value=0.0)
    raw = find_contours(padded, level)
    if not raw:
        raise EmptyLevelSet(f"no level set at c={level:g}")
    curves = []
    for c in raw:
        pts = origin + (c + offsets) * h
        strong = gnorm(pts) > eps_grad
        # split at weak-gradient points
        runs, start = [], None
        for i, ok in enumerate(np.append(strong, False)):
            if ok and start is None:
                start = i
            elif not ok and start is not None:
                runs.append(pts[start:i])
                start = None
        for seg in runs:
            if len(seg) < min_points:
                continue
            inside = np.all([(seg[:, k] >= a) & (seg[:, k] < b) for k, (a, b) in enumerate(grid.chart.ranges)], axis=0)
            if not inside.any():  # a copy living entirely in the wrap padding
                continue
            res, ds = _resample(metric, seg, float(h.min()))
            if len(res) < min_points:
                continue
            vel = np.gradient(res, ds, axis=0)
            speed = np.sqrt(np.einsum("...ij,...i,...j->...", metric.g(res), vel, vel))
            inside = np.all([(res[:, k] >= a) & (res[:, k] < b) for k, (a, b) in enumerate(grid.chart.ranges)], axis=0)
            curves.append(LevelCurve(res, ds, float(np.abs(speed[2:-2] - 1).max()), eps_grad, inside))
    if not curves:
        if any(len(c) >= min_points for c in raw):
            raise GradientBelowFloor(f"level set c={level:g} lies where |grad u| <= {eps_grad:g}")
        raise EmptyLevelSet(f"level set c={level:g} has no curve with {min_points} points")
    return curves


def geodesic_defect(metric, curve: LevelCurve) -> np.ndarray:
    """``|gamma'' + Gamma(gamma', gamma')|_g`` by central differences at interior samples."""
    p, ds = curve.points, curve.ds
    vel = (p[2:] - p[:-2]) / (2 * ds)
    acc = (p[2:] - 2 * p[1:-1] + p[:-2]) / ds**2
    mid = p[1:-1]
    gam = geo.christoffel(metric, mid)
    a = acc + np.einsum("...kij,...i,...j->...k", gam, vel, vel)
    return np.sqrt(np.einsum("...ij,...i,...j->...", metric.g(mid), a, a))


def level_set_geodesic_check(
    grid: Grid,
    metric,
    values,
    level: float,
    eps_grad: float = 1e-3,
    expect_geodesic: bool | None = None,
    tol: float = 2e-3,
    trim: int = 3,
) -> ExperimentReport:
    """Geodesic defect of the level curves ``{u = level}``.

    ``trim`` samples at each end of an open curve are excluded from the
    statistics (one-sided differencing region and wrap padding).  With
    ``expect_geodesic`` set, the verdict compares the max defect with
    ``tol``; otherwise it is ``inconclusive`` (measurement only).
    """
    curves = extract_level_curves(grid, metric, values, level, eps_grad)
    records = []
    for k, c in enumerate(curves):
        d = geodesic_defect(metric, c)
        d = d[trim:-trim] if len(d) > 2 * trim + 2 else d
        records.append({"curve": k, "points": len(c.points), "length": c.length, "max_defect": float(d.max()),
                        "mean_defect": float(d.mean()), "speed_error": c.speed_error})
    worst = max(r["max_defect"] for r in records)
    if expect_geodesic is None:
        verdict = "inconclusive"
    else:
        verdict = "consistent" if (worst <= tol) == bool(expect_geodesic) else "violation"
    return ExperimentReport(
        "level_set_geodesic_check",
        {"chart": chart_inputs(grid.chart), "shape": list(grid.shape), "level": level,
         "field_digest": hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()},
        records,
        verdict,
        {"eps_grad": eps_grad, "tol": tol, "trim": trim},
        summary={"max_defect": worst, "mean_defect": float(np.mean([r["mean_defect"] for r in records])),
                 "expect_geodesic": expect_geodesic},
        replay=[] if verdict != "violation" else [{"level": level, "shape": list(grid.shape)}],
    )
