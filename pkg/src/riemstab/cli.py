"""Command-line entry point: ``riemstab run | list-presets | check-config``.

Exit status of ``run``: 0 when no experiment reports a violation, 1 when one
does or an experiment fails (the other reports are still written), 2 when
the configuration is invalid.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import lab
from .config import ChartConfig, FieldConfig, RunConfig, experiment_id, read_document, validate
from .discretization import Grid, sample
from .errors import ConfigInvalid, ExperimentFailure
from .geometry import METRIC_PRESETS, make_chart, trig_series
from .system import NONLINEARITY_PRESETS, make_nonlinearity

log = logging.getLogger("riemstab")

BUILTIN_METRICS = frozenset(METRIC_PRESETS)
BUILTIN_NONLINEARITIES = frozenset(NONLINEARITY_PRESETS)


def build_chart(c: ChartConfig):
    return make_chart(c.metric, ranges=c.ranges, **c.params)


def build_field(f: FieldConfig):
    return trig_series(
        [t.amplitude for t in f.terms], [t.k for t in f.terms], [t.phase for t in f.terms], offset=f.offset
    )


def _dispatch(cfg: RunConfig, exp, seed: int) -> lab.ExperimentReport:
    chart = build_chart(exp.chart or cfg.chart)
    tol = cfg.tolerances
    nl = make_nonlinearity(cfg.nonlinearity.name, **cfg.nonlinearity.params) if cfg.nonlinearity else None
    kind = exp.kind
    if kind == "bochner_sweep":
        fns = lab.trig_test_functions(chart, exp.functions.count, exp.functions.seed, exp.functions.max_k)
        band = (tol.get("order_low", 1.8), tol.get("order_high", 2.2))
        return lab.bochner_sweep(chart, fns, tuple(exp.resolutions), exp.margin, band)
    if kind == "hessian_inequality_scan":
        fns = lab.trig_test_functions(chart, exp.functions.count, exp.functions.seed, exp.functions.max_k)
        return lab.hessian_inequality_scan(chart, fns, exp.n, exp.eps_grad)
    if kind == "liouville_compact":
        return lab.liouville_compact(
            chart, nl, exp.n_starts, seed, exp.n, exp.amplitude, exp.dt, exp.steps,
            newton_tol=tol.get("newton_tol", 1e-9), tol_const=tol.get("tol_const", 1e-6), controls=exp.controls,
        )
    if kind == "volume_growth":
        return lab.volume_growth(exp.dim, exp.R_list, exp.h)
    if kind == "parabolicity_capacity":
        return lab.parabolicity_capacity(exp.dim, exp.R_list, exp.n_radial, exp.n_angular)
    if kind == "level_set_geodesic_check":
        grid = Grid.uniform(chart, exp.n)
        values = sample(grid, build_field(exp.field))
        return lab.level_set_geodesic_check(
            grid, chart.metric_field(), values, exp.level, exp.eps_grad, exp.expect_geodesic, exp.tol
        )
    if kind == "stability_suite":
        initial = exp.initial.model_dump()
        if initial["kind"] != "file":
            initial.pop("path")
        return lab.stability_suite(
            chart, nl, exp.n, exp.bc, initial, exp.dt, exp.steps, exp.family.kind, exp.family.count,
            exp.poincare_count, seed, exp.slack, exp.poincare_slack, tol.get("newton_tol", 1e-9),
        )
    raise ConfigInvalid(f"unknown experiment kind {kind!r}")  # pragma: no cover


def run_experiment(doc: dict, index: int) -> dict:
    """Run one experiment of a validated config document; never raises."""
    cfg = validate(doc)  # also registers custom presets inside worker processes
    exp = cfg.experiments[index]
    out = {"id": experiment_id(exp, index), "kind": exp.kind}
    try:
        report = _dispatch(cfg, exp, cfg.seed)
    except Exception as exc:  # reported as an experiment failure
        failure = ExperimentFailure(out["id"], exc)
        log.error("experiment %s failed: %s", out["id"], failure, exc_info=exc)
        out.update(status="failed", error=str(failure))
        return out
    out.update(status="ok", report=report.to_dict(), table=report.table())
    return out


def _write_csv(path: Path, table) -> None:
    cols, rows = table
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_reports(out_dir: Path, doc: dict, results: list) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    experiments = []
    for res in results:
        entry = {k: v for k, v in res.items() if k != "table"}
        experiments.append(entry)
        if res["status"] == "ok":
            _write_csv(out_dir / f"{res['id']}.csv", res["table"])
    summary = {
        "seed": doc["seed"],
        "config_digest": hashlib.sha256(text.encode()).hexdigest(),
        "experiments": experiments,
        "violations": sum(1 for e in experiments if e.get("report", {}).get("verdict") == "violation"),
        "failures": sum(1 for e in experiments if e["status"] == "failed"),
    }
    (out_dir / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out_dir / "replay.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return summary


def run(config_path, jobs: int | None = None, seed: int | None = None, out: str | None = None) -> int:
    """Execute every experiment in the config and write the report directory."""
    try:
        raw = read_document(config_path)
        if seed is not None:
            raw["seed"] = seed
        cfg = validate(raw)
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    doc = cfg.model_dump(mode="json")
    out_dir = Path(out or cfg.out or "riemstab-report")
    n = len(cfg.experiments)
    jobs = max(1, jobs or os.cpu_count() or 1)
    if jobs == 1 or n <= 1:
        results = [run_experiment(doc, i) for i in range(n)]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(jobs, n), mp_context=ctx) as pool:
            results = list(pool.map(run_experiment, [doc] * n, range(n)))
    summary = write_reports(out_dir, doc, results)
    for e in summary["experiments"]:
        verdict = e.get("report", {}).get("verdict", e["status"])
        print(f"{e['id']}: {verdict}")
    print(f"report written to {out_dir}")
    return 1 if summary["violations"] or summary["failures"] else 0


def list_presets(include_builtin: bool = True) -> str:
    lines = []
    metrics = [p for name, p in sorted(METRIC_PRESETS.items()) if include_builtin or name not in BUILTIN_METRICS]
    nonlins = [
        p for name, p in sorted(NONLINEARITY_PRESETS.items()) if include_builtin or name not in BUILTIN_NONLINEARITIES
    ]
    for title, presets in (("metric presets", metrics), ("nonlinearity presets", nonlins)):
        if not presets:
            continue
        lines.append(f"{title}:")
        for p in presets:
            lines.append(f"  {p.name}: {p.doc}")
            for key, default in p.defaults.items():
                lines.append(f"      {key} = {default!r}  {p.param_docs.get(key, '')}".rstrip())
    return "\n".join(lines)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riemstab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run all experiments of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    r.add_argument("--out", default=None, help="report directory")
    lp = sub.add_parser("list-presets", help="list metric and nonlinearity presets")
    lp.add_argument("--config", default=None, help="also register the config's custom presets")
    lp.add_argument("--no-builtin", action="store_true", help="hide the built-in presets")
    c = sub.add_parser("check-config", help="validate a config without running it")
    c.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("RIEMSTAB_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    np.seterr(all="ignore")
    args = _parser().parse_args(argv)
    if args.command == "run":
        return run(args.config, args.jobs, args.seed, args.out)
    try:
        cfg = validate(read_document(args.config)) if args.config else None
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    if args.command == "list-presets":
        text = list_presets(not args.no_builtin)
        if text:
            print(text)
        return 0
    print(f"config ok: {len(cfg.experiments)} experiment(s)")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
