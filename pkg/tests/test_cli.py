import csv
import json

import numpy as np
import pytest

from ccscopf.case_model import write_case
from ccscopf.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, EXIT_VALIDATION, main
from ccscopf.uncertainty import load_gmm, save_gmm, write_errors_csv


@pytest.fixture(scope="module")
def files5(tmp_path_factory, case5, gmm5):
    d = tmp_path_factory.mktemp("cli5")
    write_case(case5, d / "case.json")
    save_gmm(gmm5, d / "gmm.json")
    return d


def _solve(d, out, *extra):
    return main(["solve", str(d / "case.json"), str(d / "gmm.json"), "--out", str(out),
                 "--verify-samples", "100", *extra])


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if "seconds" not in k}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def test_fit_writes_gmm(tmp_path, capsys):
    rng = np.random.default_rng(0)
    data = np.vstack([rng.normal(-0.01, 0.002, (300, 2)), rng.normal(0.01, 0.003, (300, 2))])
    write_errors_csv(tmp_path / "e.csv", [4, 7], data)
    assert main(["fit", str(tmp_path / "e.csv"), "--m", "10", "--out", str(tmp_path / "g.json")]) == EXIT_OK
    g = load_gmm(tmp_path / "g.json")
    assert g.d == 2 and 1 <= g.m <= 10
    summary = json.loads(capsys.readouterr().out)
    assert summary["seed"] == 0 and summary["samples"] == 600


def test_fit_single_component(tmp_path):
    data = np.random.default_rng(1).normal(0.0, 0.01, (200, 1))
    write_errors_csv(tmp_path / "e.csv", [4], data)
    assert main(["fit", str(tmp_path / "e.csv"), "--m", "1", "--out", str(tmp_path / "g.json")]) == EXIT_OK
    g = load_gmm(tmp_path / "g.json")
    assert g.m == 1
    assert g.means[0, 0] == pytest.approx(data.mean(), abs=1e-12)


def test_fit_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["fit", str(missing)]) == EXIT_INPUT
    assert str(missing) in capsys.readouterr().err


def test_solve_and_validate(files5, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert _solve(files5, out, "--history", str(tmp_path / "h.csv")) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["converged"] and rep["config"]["options"]["seed"] == 0
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == rep["iterations"]

    vdir = tmp_path / "val"
    code = main(["validate", str(files5 / "case.json"), str(files5 / "gmm.json"), str(out), "--n", "300",
                 "--out-dir", str(vdir)])
    assert code == EXIT_OK
    vrep = json.loads((vdir / "validation_report.json").read_text())
    assert vrep["passed"] and vrep["n"] == 300
    with open(vdir / "eta_samples.csv") as fh:
        assert len(list(csv.reader(fh))) == 301

    # deterministic given the seed, and the same for two workers
    vdir2 = tmp_path / "val2"
    main(["validate", str(files5 / "case.json"), str(files5 / "gmm.json"), str(out), "--n", "300",
          "--out-dir", str(vdir2), "--threads", "2"])
    a = _strip_timing(json.loads((vdir / "validation_report.json").read_text()))
    b = _strip_timing(json.loads((vdir2 / "validation_report.json").read_text()))
    a.pop("samples_per_thread_split"), b.pop("samples_per_thread_split")
    assert a == b
    assert (vdir / "eta_samples.csv").read_bytes() == (vdir2 / "eta_samples.csv").read_bytes()


def test_pdf_cdf_grid_schema(files5, tmp_path):
    out = tmp_path / "report.json"
    _solve(files5, out)
    main(["validate", str(files5 / "case.json"), str(files5 / "gmm.json"), str(out), "--n", "200",
          "--out-dir", str(tmp_path)])
    with open(tmp_path / "pdf_cdf_grid.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 200
    x = np.array([float(r["eta"]) for r in rows])
    c = np.array([float(r["empirical_cdf"]) for r in rows])
    assert np.all(np.diff(x) > 0) and np.all(np.diff(c) >= 0)
    assert c[-1] == 1.0
    assert all(float(r["estimated_pdf"]) >= 0 for r in rows)


def test_solve_idempotent(files5, tmp_path):
    _solve(files5, tmp_path / "a.json")
    _solve(files5, tmp_path / "b.json")
    a = _strip_timing(json.loads((tmp_path / "a.json").read_text()))
    b = _strip_timing(json.loads((tmp_path / "b.json").read_text()))
    a["config"].pop("gmm"), b["config"].pop("gmm")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_solve_iteration_cap_is_infeasible(files5, tmp_path):
    out = tmp_path / "r.json"
    assert _solve(files5, out, "--max-iters", "0") == EXIT_INFEASIBLE
    rep = json.loads(out.read_text())
    assert rep["iterations"] == 0 and not rep["converged"]


def test_solve_corrupted_gmm(files5, tmp_path, capsys):
    bad = tmp_path / "gmm.json"
    d = json.loads((files5 / "gmm.json").read_text())
    d["weights"] = [0.7, 0.7]
    bad.write_text(json.dumps(d))
    code = main(["solve", str(files5 / "case.json"), str(bad), "--out", str(tmp_path / "r.json")])
    assert code == EXIT_INPUT
    assert str(bad) in capsys.readouterr().err


def test_solve_missing_case(files5, tmp_path):
    assert main(["solve", str(tmp_path / "none.json"), str(files5 / "gmm.json")]) == EXIT_INPUT


def test_validate_failure_exit_code(files5, tmp_path):
    out = tmp_path / "report.json"
    _solve(files5, out)
    code = main(["validate", str(files5 / "case.json"), str(files5 / "gmm.json"), str(out), "--n", "100",
                 "--eta-bar", "-1000", "--out-dir", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert not json.loads((tmp_path / "validation_report.json").read_text())["passed"]


def test_bench_single_mode(files5, tmp_path, capsys):
    code = main(["bench", str(files5 / "case.json"), "--gmm", str(files5 / "gmm.json"), "--modes", "analytic",
                 "--iters", "1", "--out", str(tmp_path / "t.csv")])
    assert code == EXIT_OK
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["mode"] == "analytic" and float(rows[0]["T_avg"]) > 0


def test_bench_rejects_unknown_mode(files5):
    assert main(["bench", str(files5 / "case.json"), "--gmm", str(files5 / "gmm.json"), "--modes", "magic"]) == 2


def test_help_documents_schema(capsys):
    with pytest.raises(SystemExit):
        main(["solve", "--help"])
    assert "eta_bar" in capsys.readouterr().out
