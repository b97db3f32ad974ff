"""Regenerate the files in src/ccscopf/data from the built-in case definitions."""

import json
from dataclasses import asdict
from pathlib import Path

from ccscopf.case_model import write_case
from ccscopf.cases import modified_33bus, wt_forecast_vector
from ccscopf.uncertainty import bimodal_forecast_errors, fit_gmm, save_gmm, write_errors_csv

DATA = Path(__file__).resolve().parents[1] / "src" / "ccscopf" / "data"


def matpower_text(case) -> str:
    base = case.s_base
    lines = ["function mpc = ieee33_modified", "% 33-bus feeder, loads already scaled, impedances in p.u.",
             "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for b in case.buses:
        kind = 3 if b.id == case.ref_bus else (2 if b.kind == "DG" else 1)
        lines.append(f"\t{b.id}\t{kind}\t{b.load_p * base!r}\t{b.load_q * base!r}\t0\t0\t1\t1\t0\t12.66\t1"
                     f"\t{b.v_max!r}\t{b.v_min!r};")
    lines += ["];", "mpc.branch = ["]
    for br in case.branches:
        lines.append(f"\t{br.from_bus}\t{br.to_bus}\t{br.r!r}\t{br.x!r}\t{br.b_sh!r}\t0\t0\t0\t0\t0\t1\t-360\t360;")
    lines += ["];", ""]
    return "\n".join(lines)


def main():
    DATA.mkdir(exist_ok=True)
    case = modified_33bus()
    write_case(case, DATA / "ieee33_modified.json")
    (DATA / "ieee33_modified.m").write_text(matpower_text(case))
    side = {
        "name": case.name,
        "frequency_unit": case.frequency_unit,
        "omega_base": case.omega_base,
        "omega_set": case.omega_set,
        "ref_bus": case.ref_bus,
        "dgs": [{**asdict(d), "cost": list(d.cost)} for d in case.dgs],
        "res": [asdict(r) for r in case.res_units],
    }
    (DATA / "ieee33_modified.droop.json").write_text(json.dumps(side, indent=1))
    errors = bimodal_forecast_errors(wt_forecast_vector(case), 5000, seed=1)
    write_errors_csv(DATA / "ieee33_wt_errors.csv", [r.bus for r in case.res_units], errors)
    save_gmm(fit_gmm(errors, m=10, seed=0), DATA / "ieee33_gmm.json")


if __name__ == "__main__":
    main()
