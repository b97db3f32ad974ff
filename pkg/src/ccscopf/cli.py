"""Command-line entry point: fit, solve, validate, bench.

Exit codes: 0 ok, 2 bad input, 3 numerical failure, 4 infeasible or iteration
cap, 5 validation failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .case_model import CaseValidationError, load_case
from .ccopf import (
    ConfidenceConfig,
    EvaluationFailure,
    MasterFailure,
    SolveOptions,
    solve_ccscopf,
)
from .sdp import SolverFailure
from .stability import StabilityOptions
from .uncertainty import GmmFormatError, bimodal_forecast_errors, fit_gmm, load_gmm, read_errors_csv, save_gmm

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_INFEASIBLE = 4
EXIT_VALIDATION = 5

log = logging.getLogger("ccscopf")

SOLVE_SCHEMA = """solve.json keys (all optional; command-line flags win):
  eta_bar, beta_eta, beta_g, beta_v      confidence settings
  trust_pq, trust_v                      trust-region radii (p.u.)
  max_iter, cost_tol, prox, mode         loop settings; mode is analytic |
                                         eta-perturbation | probability-perturbation
  sdp_backend, sdp_tol                   stability SDP settings
  verify_samples, countermeasure_rounds  Monte-Carlo check after convergence
  seed                                   single seed for every random draw"""


class InputError(Exception):
    pass


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {p} is not valid JSON: {exc}") from exc


def _case(path, sidecar=None):
    if path.startswith("builtin:"):
        from .cases import bundled_case

        return bundled_case(path.split(":", 1)[1])
    try:
        return load_case(path, sidecar=sidecar)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def _gmm(path):
    if not Path(path).exists():
        raise InputError(f"GMM file not found: {path}")
    try:
        return load_gmm(path)
    except (GmmFormatError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"GMM file {path} is invalid: {exc}") from exc


# ---------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    if not Path(args.errors).exists():
        raise InputError(f"error samples not found: {args.errors}")
    try:
        buses, data = read_errors_csv(args.errors)
    except (ValueError, IndexError) as exc:
        raise InputError(f"could not read {args.errors}: {exc}") from exc
    if args.m < 1:
        raise InputError("--m must be at least 1")
    gmm = fit_gmm(data, m=args.m, seed=args.seed, max_iter=args.max_iter, tol=args.tol)
    gmm.info["buses"] = buses
    save_gmm(gmm, args.out)
    summary = {"out": str(args.out), "components": gmm.m, "dimension": gmm.d, "samples": len(data),
               "seed": args.seed, "converged": gmm.info.get("converged"), "iterations": gmm.info.get("iterations"),
               "log_likelihood": _last(gmm.info.get("log_likelihood")), "pruned": gmm.info.get("pruned")}
    print(json.dumps(summary, default=_jsonable))
    return EXIT_OK


def _last(x):
    return x[-1] if isinstance(x, (list, tuple)) and x else x


# ---------------------------------------------------------------- solve


def _solve_settings(args) -> tuple[ConfidenceConfig, SolveOptions]:
    cfg = _read_json(args.config, "solve config") if args.config else {}
    over = {k: v for k, v in vars(args).items() if v is not None}

    def get(key, default):
        return over.get(key, cfg.get(key, default))

    try:
        conf = ConfidenceConfig(
            eta_bar=float(get("eta_bar", -0.15)),
            beta_eta=float(get("beta_eta", 0.05)),
            beta_g=float(get("beta_g", 0.01)),
            beta_v=float(get("beta_v", 0.01)),
        )
        stab = StabilityOptions(backend=str(get("sdp_backend", "ipm")), tol=float(get("sdp_tol", 1e-8)))
        opts = SolveOptions(
            trust_pq=float(get("trust_pq", 0.1)),
            trust_v=float(get("trust_v", 0.01)),
            max_iter=int(get("max_iter", 200)),
            cost_tol=float(get("cost_tol", 1e-6)),
            prox=float(get("prox", 1e-3)),
            sensitivity_mode=str(get("mode", "analytic")),
            stability=stab,
            verify_samples=int(get("verify_samples", 1000)),
            countermeasure_rounds=int(get("countermeasure_rounds", 10)),
            seed=int(get("seed", 0)),
            prob_samples=int(get("prob_samples", 200)),
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid solve settings: {exc}") from exc
    return conf, opts


def cmd_solve(args) -> int:
    case = _case(args.case, args.sidecar)
    gmm = _gmm(args.gmm)
    conf, opts = _solve_settings(args)
    if gmm.d != case.n_res:
        raise InputError(f"GMM has dimension {gmm.d}, case has {case.n_res} RES units")
    report = solve_ccscopf(case, gmm, conf, opts)
    out = report.to_dict()
    out["config"] = {"confidence": dataclasses.asdict(conf), "options": _options_dict(opts),
                     "case": args.case, "gmm": args.gmm}
    _dump(out, args.out)
    if args.history:
        _write_history(args.history, report.history)
    feasible = report.converged and report.feasible and report.verified is not False
    print(json.dumps({"status": report.status, "feasible": feasible, "iterations": report.iterations,
                      "cuts": len(report.cuts), "corrective_rounds": report.corrective_rounds,
                      "expected_cost": report.expected_cost, "eta": report.eta_final, "out": str(args.out)}))
    return EXIT_OK if feasible else EXIT_INFEASIBLE


def _options_dict(opts: SolveOptions) -> dict:
    d = dataclasses.asdict(opts)
    d["stability"] = dataclasses.asdict(opts.stability)
    return d


def _write_history(path, history) -> None:
    cols = ["iteration", "accepted", "cost", "predicted_cost", "eta", "q_eta", "stability_margin",
            "min_security_margin", "cut_added", "trust_pq", "trust_v", "seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for h in history:
            row = dict(h)
            sm = h.get("security_margins")
            row["min_security_margin"] = min(sm.values()) if sm else ""
            w.writerow([row.get(c, "") for c in cols])


# ---------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    from .validation import eta_distribution, monte_carlo_validate, write_eta_samples, write_pdf_cdf_grid

    case = _case(args.case, args.sidecar)
    gmm = _gmm(args.gmm)
    rep = _read_json(args.report, "solve report")
    if "z_opt" not in rep:
        raise InputError(f"{args.report} has no z_opt")
    z = np.asarray(rep["z_opt"], dtype=float)
    if z.shape != (3 * case.g,):
        raise InputError(f"z_opt has {z.size} entries, case needs {3 * case.g}")
    conf_d = rep.get("config", {}).get("confidence", {})
    try:
        conf = ConfidenceConfig(**{**conf_d, **({"eta_bar": args.eta_bar} if args.eta_bar is not None else {})})
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid confidence settings: {exc}") from exc
    if args.n < 1:
        raise InputError("--n must be positive")
    reference = eta_distribution(case, z, gmm)
    val = monte_carlo_validate(case, z, gmm, args.n, args.seed, eta_bar=conf.eta_bar, workers=args.threads,
                               reference=reference)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = val.satisfies(conf, allow_half_width=not args.strict)
    d = val.to_dict()
    d.update({"passed": ok, "strict": bool(args.strict), "confidence": dataclasses.asdict(conf),
              "samples_per_thread_split": args.threads})
    _dump(d, out_dir / "validation_report.json")
    write_eta_samples(out_dir / "eta_samples.csv", val)
    write_pdf_cdf_grid(out_dir / "pdf_cdf_grid.csv", val, reference)
    print(json.dumps({"passed": ok, **val.summary(), "out_dir": str(out_dir)}, default=_jsonable))
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    from .cases import wt_forecast_vector
    from .validation import perturbation_baselines

    case = _case(args.case, args.sidecar)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("analytic", "eta-perturbation", "probability-perturbation"):
            raise InputError(f"unknown mode {m!r}")
    conf = ConfidenceConfig(eta_bar=args.eta_bar) if args.eta_bar is not None else ConfidenceConfig()
    if args.degrees:
        try:
            degrees = [float(x) for x in args.degrees.split(",")]
        except ValueError as exc:
            raise InputError(f"bad --degrees: {exc}") from exc
        gmms = []
        for k, deg in enumerate(degrees):
            errs = bimodal_forecast_errors(wt_forecast_vector(case), args.samples, seed=args.seed + k, degree=deg)
            gmms.append((deg, fit_gmm(errs, m=args.m, seed=args.seed)))
    else:
        if not args.gmm:
            raise InputError("bench needs --gmm or --degrees")
        gmms = [(None, _gmm(args.gmm))]
    opts = SolveOptions(max_iter=args.iters, prob_samples=args.prob_samples, seed=args.seed)
    rows = []
    for deg, gmm in gmms:
        for mode in modes:
            _, t = perturbation_baselines(case, gmm, conf, mode, opts)
            rows.append({"mu_w": deg, "mode": mode, "iterations": t["iterations"],
                         "T_avg": t["mean_iteration_seconds"], "T_max": t["max_iteration_seconds"],
                         "total_seconds": t["total_seconds"]})
    if args.format == "json":
        text = json.dumps(rows, indent=1)
    else:
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()) if rows else ["mode"])
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccscopf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a Gaussian mixture to forecast-error samples",
                       description="Input CSV: header row of RES bus ids, one error sample per row (p.u.).")
    f.add_argument("errors")
    f.add_argument("--m", type=int, default=10, help="mixture components")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--max-iter", type=int, default=1000)
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--out", default="gmm.json")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("solve", help="run the chance-constrained dispatch", epilog=SOLVE_SCHEMA,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("case", help="case .json, MATPOWER .m (with sidecar) or builtin:<name>")
    s.add_argument("gmm")
    s.add_argument("--config", help="solve.json")
    s.add_argument("--sidecar")
    s.add_argument("--eta-bar", type=float)
    s.add_argument("--beta-eta", type=float)
    s.add_argument("--beta-g", type=float)
    s.add_argument("--beta-v", type=float)
    s.add_argument("--trust-pq", type=float)
    s.add_argument("--trust-v", type=float)
    s.add_argument("--max-iters", dest="max_iter", type=int)
    s.add_argument("--mode", choices=["analytic", "eta-perturbation", "probability-perturbation"])
    s.add_argument("--sdp-backend", choices=["ipm", "clarabel", "cvxopt"])
    s.add_argument("--verify-samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="report.json")
    s.add_argument("--history", help="also write the per-iteration history as CSV")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("validate", help="Monte-Carlo check of a solve report")
    v.add_argument("case")
    v.add_argument("gmm")
    v.add_argument("report", help="report.json from solve")
    v.add_argument("--sidecar")
    v.add_argument("--n", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=1)
    v.add_argument("--eta-bar", type=float)
    v.add_argument("--threads", type=int, default=1, help="worker processes; results do not depend on it")
    v.add_argument("--strict", action="store_true", help="compare point estimates without the binomial half-width")
    v.add_argument("--out-dir", default=".")
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("bench", help="per-iteration timing of the sensitivity modes")
    b.add_argument("case")
    b.add_argument("--gmm")
    b.add_argument("--sidecar")
    b.add_argument("--modes", default="analytic,eta-perturbation,probability-perturbation")
    b.add_argument("--degrees", help="comma-separated uncertainty degrees, e.g. 0.01,0.03,0.05")
    b.add_argument("--samples", type=int, default=3000, help="error samples per degree")
    b.add_argument("--m", type=int, default=10)
    b.add_argument("--iters", type=int, default=2)
    b.add_argument("--prob-samples", type=int, default=20)
    b.add_argument("--eta-bar", type=float)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--format", choices=["csv", "json"], default="csv")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (InputError, CaseValidationError, GmmFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EvaluationFailure, SolverFailure, MasterFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
