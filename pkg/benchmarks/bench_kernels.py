"""Time the compiled kernels against the numpy fallback on the bundled cases.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--format csv|json]
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import timeit

import numpy as np

from ccscopf._core import _fallback, compiled_module
from ccscopf.case_model import build_admittance
from ccscopf.cases import five_bus, modified_33bus


def _injection_args(case, seed=0):
    y = build_admittance(case)
    rng = np.random.default_rng(seed)
    th = rng.normal(0.0, 0.05, case.n)
    v = 1.0 + rng.normal(0.0, 0.02, case.n)
    return np.ascontiguousarray(y.g), np.ascontiguousarray(y.b), th, v


def _schur_args(n, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, n, n))
    b = rng.normal(size=(3, n, n))
    arows = np.ascontiguousarray(np.concatenate([a, a.transpose(0, 2, 1)]))
    brows = np.ascontiguousarray(np.concatenate([b, b.transpose(0, 2, 1)]))
    return arows, brows, rng.uniform(0.5, 1.0, n * (n + 1) // 2)


def _best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def run(repeat: int) -> list[dict]:
    compiled = compiled_module()
    jobs = []
    for case in (five_bus(), modified_33bus()):
        args = _injection_args(case)
        jobs.append(("power_injections", case.name, args))
        jobs.append(("injection_jacobian", case.name, args))
    for n in (7, 14, 21):
        jobs.append(("lyapunov_schur", f"n={n}", _schur_args(n)))
    rows = []
    for kernel, label, args in jobs:
        t_py = _best(getattr(_fallback, kernel), args, repeat)
        t_c = _best(getattr(compiled, kernel), args, repeat) if compiled is not None else float("nan")
        if compiled is not None:
            ref, got = getattr(_fallback, kernel)(*args), getattr(compiled, kernel)(*args)
            diff = max(float(np.max(np.abs(np.asarray(r) - np.asarray(g)))) for r, g in
                       zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)))
        else:
            diff = float("nan")
        rows.append({"kernel": kernel, "input": label, "python_s": t_py, "compiled_s": t_c,
                     "speedup": t_py / t_c if compiled is not None else float("nan"), "max_abs_diff": diff})
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    args = p.parse_args(argv)
    if compiled_module() is None:
        print("compiled kernels not built; timing the fallback only", file=sys.stderr)
    rows = run(args.repeat)
    if args.format == "json":
        print(json.dumps(rows, indent=1))
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.3e}" if isinstance(v, float) else v for k, v in r.items()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
