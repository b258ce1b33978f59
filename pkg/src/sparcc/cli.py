"""Command line: ``sparcc {fit,simulate,calibrate,sweep,selftest}``.

Exit codes: 0 success, 1 self-test or invariant failure, 2 user or input
error, 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._io import atomic_open, write_keyvalue
from .data import DEFAULT_MARGIN, apply_scaling, load_csv
from .errors import ConvergenceError, SparccError
from .estimators import FitOptions, fit
from .quadrature import DEFAULT_HERMITE_ORDER, DEFAULT_NODES, DEFAULT_SIMPSON_PANELS
from . import simulation as sim

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3

NUISANCE_CHOICES = ("parametric", "parametric-mis", "bspline", "exact")
ESTIMATOR_CHOICES = ("sparcc", "mle", "cc", "oracle")


def _json_dump(path, payload: dict) -> None:
    with atomic_open(path) as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# fit


def _unscale(result, factor: float):
    """Estimates and SEs with covariate-slope terms back in raw x units."""
    est = np.array(result.theta, float)
    se = np.array(result.se, float)
    for j, name in enumerate(result.names):
        if name in ("beta1", "beta3"):
            est[j] /= factor
            se[j] /= factor
    return est, se


def cmd_fit(args) -> int:
    data = load_csv(args.data)
    factor = 1.0
    if args.scale_margin is not None:
        data = apply_scaling(data, args.scale_margin)
        factor = data.scale_factor
    options = FitOptions(nodes=args.nodes, hermite_order=args.hermite_order, interaction=args.interaction)
    eta2 = args.nuisance_c or args.nuisance
    result = fit(data, args.estimator, args.nuisance, eta2, options)
    est, se = _unscale(result, factor)

    out = Path(args.output)
    with atomic_open(out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["parameter", "estimate", "se"])
        for name, e, s in zip(result.names, est, se):
            writer.writerow([name, repr(float(e)), repr(float(s)) if math.isfinite(s) else "nan"])
    diag = {
        "estimator": result.label, "n": data.n, "censoring_fraction": repr(data.censoring_fraction),
        "scale_factor": repr(factor), "iterations": result.iterations,
        "converged": int(result.converged),
    }
    for key, value in result.diagnostics.items():
        if key == "trace":
            value = ",".join(f"{t:.3e}" for t in value)
        diag[key] = value
    diag_path = out.with_name(out.stem + "_diagnostics.txt")
    write_keyvalue(diag_path, diag, header="sparcc fit diagnostics")

    print(f"{result.label}  n={data.n}  censored={data.censoring_fraction:.3f}  iterations={result.iterations}")
    print(f"{'parameter':<12}{'estimate':>14}{'se':>12}")
    for name, e, s in zip(result.names, est, se):
        print(f"{name:<12}{e:>14.6f}{s:>12.6f}")
    if "variance_failure" in result.diagnostics:
        print(f"warning: {result.diagnostics['variance_failure']}; standard errors unavailable")
    print(f"wrote {out} and {diag_path}")
    if args.json_summary:
        payload = {"command": "fit", "exit_code": EXIT_OK, "estimator": result.label, "n": data.n,
                   "iterations": result.iterations, "scale_factor": factor}
        for name, e, s in zip(result.names, est, se):
            payload[f"estimate.{name}"] = _num(e)
            payload[f"se.{name}"] = _num(s)
        _json_dump(args.json_summary, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / sweep / calibrate


def _config_from_args(args) -> sim.SimConfig:
    cfg = sim.load_config(args.config) if args.config else sim.SimConfig()
    changes = {}
    if args.full:
        changes["n"], changes["replicates"] = sim.PROFILES["full"]
    for key in ("n", "replicates", "seed", "nodes", "hermite_order", "simpson_panels"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "q", None) is not None:
        changes["q_target"] = args.q
    if getattr(args, "estimators", None):
        changes["estimators"] = tuple(s.strip() for s in args.estimators.split(",") if s.strip())
    if args.table1_units:
        changes["table1_units"] = True
    return replace(cfg, **changes) if changes else cfg


def _progress(quiet):
    if quiet:
        return None

    def show(done, total):
        if done == total or done % max(1, total // 20) == 0:
            print(f"  replicate {done}/{total}", file=sys.stderr)
    return show


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    result = sim.run_monte_carlo(cfg, threads=args.threads or _default_threads(), progress=_progress(args.quiet))
    paths = sim.write_outputs(result, args.outdir)
    units = "x10" if cfg.table1_units else "raw"
    print(f"n={cfg.n} replicates={cfg.replicates} q={cfg.q_target} shape1={result.alpha2[0]:.6g} "
          f"mean censoring={result.mean_censoring:.4f} units={units}")
    print(f"{'estimator':<26}{'param':<8}{'bias':>10}{'ESE':>10}{'ASE':>10}{'cov':>8}")
    for row in result.summary:
        if row.parameter != "beta1":
            continue
        label = row.estimator if row.x_given_z == "-" else f"{row.estimator}:{row.x_given_z}/{row.c_given_z}"
        print(f"{label:<26}{row.parameter:<8}{row.bias:>10.4f}{row.ese:>10.4f}{row.ase_mean:>10.4f}"
              f"{row.coverage:>8.1f}")
    for flag in result.flags:
        print(f"flag: {flag}")
    print(f"wrote {paths['summary']} and {paths['replicates']}")
    if args.json_summary:
        payload = {"command": "simulate", "exit_code": EXIT_OK, "n": cfg.n, "replicates": cfg.replicates,
                   "q_target": cfg.q_target, "shape1": result.alpha2[0], "mean_censoring": result.mean_censoring,
                   "units": units, "flags": "; ".join(result.flags)}
        for row in result.summary:
            key = f"{row.estimator}:{row.x_given_z}/{row.c_given_z}.{row.parameter}"
            for stat in ("bias", "ese", "ase_mean", "ase_median", "coverage"):
                payload[f"{stat}.{key}"] = _num(getattr(row, stat))
        _json_dump(args.json_summary, payload)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    q_list = [float(v) for v in args.q_list.split(",") if v.strip()]
    rows = sim.sweep_censoring(cfg, q_list, threads=args.threads or _default_threads(),
                               progress=_progress(args.quiet))
    path = Path(args.outdir) / "sweep.csv"
    sim.write_sweep(rows, path)
    print(f"{'q':>6}  {'estimator':<26}{'variance':>12}{'lo':>12}{'hi':>12}")
    for r in rows:
        print(f"{r.q_target:>6.3f}  {r.estimator:<26}{r.variance:>12.5g}{r.variance_lo:>12.5g}{r.variance_hi:>12.5g}")
    print(f"wrote {path}")
    if args.json_summary:
        payload = {"command": "sweep", "exit_code": EXIT_OK, "rows": len(rows)}
        for r in rows:
            payload[f"variance.{r.estimator}.q={r.q_target!r}"] = _num(r.variance)
        _json_dump(args.json_summary, payload)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config_from_args(args)
    alpha2 = sim.calibrate_censoring(cfg.alpha1, cfg.q_target, cfg.censoring_shape2, cfg.censoring_z_slopes,
                                     cfg.simpson_panels)
    achieved = sim.censoring_probability(cfg.alpha1, alpha2, cfg.simpson_panels)
    print(f"q_target={cfg.q_target} alpha2={','.join(repr(float(v)) for v in alpha2)} achieved={achieved!r}")
    if args.json_summary:
        _json_dump(args.json_summary, {"command": "calibrate", "exit_code": EXIT_OK, "q_target": cfg.q_target,
                                       "shape1": alpha2[0], "shape2": alpha2[2], "achieved": achieved})
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> int:
    from . import quadrature
    from .selftest import run_checks

    if args.inject_fault:
        quadrature._FAULTS.add(args.inject_fault)
    try:
        results = run_checks()
    finally:
        quadrature._FAULTS.discard(args.inject_fault)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    code = EXIT_INVARIANT if failed else EXIT_OK
    if failed:
        print("violated: " + ", ".join(r.name for r in failed))
    if args.json_summary:
        payload = {"command": "selftest", "exit_code": code}
        payload.update({f"check.{r.name}": r.passed for r in results})
        _json_dump(args.json_summary, payload)
    return code


# ---------------------------------------------------------------------------
# parser


def _add_common(p, sim_flags: bool):
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
    p.add_argument("--nodes", type=int, default=None if sim_flags else DEFAULT_NODES,
                   help=f"grid nodes for the covariate (default {DEFAULT_NODES})")
    p.add_argument("--hermite-order", type=int, default=None if sim_flags else DEFAULT_HERMITE_ORDER,
                   help=f"Gauss-Hermite order (default {DEFAULT_HERMITE_ORDER})")
    p.add_argument("--format", choices=("csv",), default="csv", help="output format")
    p.add_argument("--json-summary", metavar="PATH", help="write a flat JSON summary")


def _add_sim(p):
    p.add_argument("--config", help="flat key = value simulation config")
    p.add_argument("--full", action="store_true", help="full-scale profile (n=8000, 1000 replicates)")
    p.add_argument("--n", type=int, help="sample size per replicate")
    p.add_argument("--replicates", type=int, help="Monte Carlo replicates")
    p.add_argument("--estimators", help="comma-separated labels, e.g. sparcc:correct/correct,mle:correct,cc")
    p.add_argument("--simpson-panels", type=int, default=None,
                   help=f"Simpson panels for calibration (default {DEFAULT_SIMPSON_PANELS})")
    p.add_argument("--table1-units", action="store_true", help="report bias and SEs multiplied by 10")
    p.add_argument("--outdir", default=".", help="directory for output CSVs")
    p.add_argument("--quiet", action="store_true", help="no progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparcc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one estimator to a CSV of y,w,delta,z[,x]")
    p.add_argument("data", help="input CSV")
    p.add_argument("--estimator", choices=ESTIMATOR_CHOICES, default="sparcc")
    p.add_argument("--nuisance", choices=NUISANCE_CHOICES, default="parametric",
                   help="working model for X|Z (and C|Z unless --nuisance-c is given)")
    p.add_argument("--nuisance-c", choices=NUISANCE_CHOICES, default=None, help="working model for C|Z")
    p.add_argument("--scale-margin", type=float, default=DEFAULT_MARGIN,
                   help="divide w by max(w)*(1+margin) before fitting (default %(default)s)")
    p.add_argument("--no-scale", dest="scale_margin", action="store_const", const=None,
                   help="use w as given (must already lie in (0, 1))")
    p.add_argument("--interaction", action="store_true", help="include an x*z term")
    p.add_argument("-o", "--output", default="fit_results.csv", help="estimates CSV")
    _add_common(p, sim_flags=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="Monte Carlo study")
    p.add_argument("--q", type=float, help="target censoring proportion")
    _add_sim(p)
    _add_common(p, sim_flags=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="empirical variance across censoring proportions")
    p.add_argument("--q-list", default="0.1,0.25,0.4,0.55,0.7,0.85", help="comma-separated q values")
    _add_sim(p)
    _add_common(p, sim_flags=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="censoring shape for a target proportion")
    p.add_argument("--q", type=float, default=None, help="target censoring proportion")
    _add_sim(p)
    _add_common(p, sim_flags=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.add_argument("--json-summary", metavar="PATH", help="write a flat JSON summary")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        if exc.hint:
            print(f"hint: {exc.hint}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except SparccError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        if exc.hint:
            print(f"hint: {exc.hint}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error [input]: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError) as exc:
        print(f"error [input]: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
