import csv
import subprocess
import sys

import numpy as np
import pytest

from haptofv.cli import main
from haptofv.io import read_key_values


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def logistic_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("logistic")
    code = main(["run", "--preset", "uniform-logistic", "--out", str(out), "--quiet"])
    return code, out


def test_run_uniform_logistic(logistic_run):
    code, out = logistic_run
    assert code == 0
    rows = _rows(sorted(out.glob("state_*.csv"))[-1])
    x = np.array([float(r["x"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    k = int(np.argmin(x**2 + y**2))
    assert abs(float(rows[k]["u"]) - 1.225400) < 1e-3
    rep = read_key_values(out / "run_report.txt")
    assert rep["passed"] == "1" and rep["clips"] == "0" and rep["verdict.mass_bound"] == "PASS"
    for name in ("diagnostics.csv", "config.cfg", "times.csv", "state_final.png", "diagnostics.png",
                 "state_00000.vtk"):
        assert (out / name).is_file()


def test_weakcheck_threshold(logistic_run):
    _, out = logistic_run
    assert main(["weakcheck", str(out), "--preset", "uniform-logistic", "--quiet"]) == 0
    assert max(float(r["residual_u"]) for r in _rows(out / "residuals.csv")) <= 1e-2
    assert main(["weakcheck", str(out), "--preset", "uniform-logistic", "--set", "weakcheck.threshold=0",
                 "--quiet"]) == 1


def test_diagnose_stored_run(logistic_run, tmp_path):
    _, out = logistic_run
    assert main(["diagnose", str(out), "--preset", "uniform-logistic", "--out", str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "diagnostics.csv").is_file()


def test_malformed_trajectory(logistic_run, tmp_path):
    assert main(["weakcheck", str(tmp_path), "--preset", "uniform-logistic", "--quiet"]) == 2
    (tmp_path / "times.csv").write_text("index,t,file\n0,0,state_00000.csv\n1,1,state_00001.csv\n")
    (tmp_path / "state_00000.csv").write_text("x,y,u,w\n0,0,1,1\n")
    (tmp_path / "state_00001.csv").write_text("garbage\n")
    assert main(["weakcheck", str(tmp_path), "--preset", "uniform-logistic", "--quiet"]) == 2


def test_zero_trajectory_weakcheck(tmp_path):
    args = ["--preset", "uniform-logistic", "--set", "init.u0=0", "--set", "init.w0=0",
            "--set", "grid.nx=16", "--set", "output.figures=no", "--quiet"]
    assert main(["run", "--out", str(tmp_path), *args]) == 0
    assert main(["weakcheck", str(tmp_path), *args]) == 0
    rows = _rows(tmp_path / "residuals.csv")
    assert all(float(r["residual_u"]) == 0 and float(r["residual_w"]) == 0 for r in rows)


def test_run_rejects_small_r(tmp_path, capsys):
    code = main(["run", "--preset", "uniform-logistic", "--set", "params.r=1.5", "--out", str(tmp_path)])
    assert code == 2
    assert "r in [2, inf)" in capsys.readouterr().err


def test_run_rejects_beta(tmp_path, capsys):
    code = main(["run", "--preset", "uniform-logistic", "--set", "params.beta=0.8", "--out", str(tmp_path)])
    assert code == 2
    assert "beta/(1-beta) <= r" in capsys.readouterr().err


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("params.nonsense = 1\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["run"]) == 2
    assert main(["run", "--preset", "nope"]) == 2
    assert main(["run", "--preset", "uniform-logistic", "--threads", "0"]) == 2


def test_run_abort_exit_code(tmp_path):
    code = main(["run", "--preset", "uniform-logistic", "--set", "grid.nx=8", "--set", "params.dt_max=1e-13",
                 "--set", "output.figures=no", "--out", str(tmp_path), "--quiet"])
    assert code == 3
    assert read_key_values(tmp_path / "run_report.txt")["aborted"] == "1"


def test_study_missing_kind_and_eps(tmp_path):
    assert main(["study", "--preset", "uniform-logistic", "--out", str(tmp_path)]) == 2
    assert main(["study", "--preset", "uniform-logistic", "--set", "study.kind=epsilon",
                 "--out", str(tmp_path)]) == 2


def test_study_epsilon_constant(tmp_path):
    code = main(["study", "--preset", "constant-spd-eps", "--set", "grid.nx=16", "--set", "params.T=0.2",
                 "--out", str(tmp_path), "--quiet"])
    assert code == 0
    assert len(_rows(tmp_path / "study_epsilon.csv")) == 5


def test_study_refinement_small(tmp_path):
    code = main(["study", "--preset", "uniform-logistic", "--set", "study.kind=refinement",
                 "--set", "study.levels=8,16,32", "--set", "params.T=0.2", "--out", str(tmp_path), "--quiet"])
    assert code == 0
    rows = _rows(tmp_path / "study_refinement.csv")
    assert len(rows) == 2 and all(float(r["l1_difference"]) < 1e-14 for r in rows)


def test_study_ode(tmp_path):
    code = main(["study", "--preset", "uniform-logistic", "--set", "study.kind=ode", "--set", "grid.nx=8",
                 "--out", str(tmp_path), "--quiet"])
    assert code == 0


def test_fit_tensor(tmp_path):
    code = main(["fit-tensor", "--preset", "d1-degenerate", "--n", "32", "--fields", "10", "--out", str(tmp_path),
                 "--quiet"])
    assert code == 0
    s = read_key_values(tmp_path / "fit_summary.txt")
    assert s["beta_range"] == "(0.5, 1.0)" and float(s["C"]) > 0


def test_byte_identical_outputs(tmp_path):
    args = ["run", "--preset", "d2-membrane", "--set", "grid.nx=16", "--set", "params.T=0.1",
            "--set", "output.figures=no", "--quiet"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "haptofv", "run", "--preset", "uniform-logistic",
                          "--set", "grid.nx=8", "--set", "params.T=0.1", "--set", "output.figures=no",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "PASS mass_bound" in res.stdout
