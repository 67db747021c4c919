import json
import subprocess
import sys

import numpy as np
import pytest

from twistray.cli import main
from twistray.inversion import read_matrix
from twistray.io import read_csv

SMALL = {
    "chart": {"phi": "0.1*(x^2 + y^2)"},
    "lambda": {"kind": "expression", "expr": "0.3 + 0.2*cos(theta)"},
    "integrator": {"step": 2e-3},
    "grid": {"nx": 16, "ny": 16, "ntheta": 16},
    "rays": {"n_positions": 6, "n_angles": 3, "n_jacobi": 3, "n_admissible": 100, "n_transport": 5},
    "pestov": {"functions": ["sin(x)*cos(y) + x*sin(theta)"]},
    "inversion": {"n_radial": 3, "n_fourier": 3, "n_positions": 20, "n_angles": 5, "step": 1e-2},
}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_trace_outputs(small, tmp_path):
    out = tmp_path / "trace"
    assert run("trace", "--config", small, "--out", out) == 0
    header, rows = read_csv(out / "rays.csv")
    assert header == ["ray_id", "segment_id", "t", "x", "y", "theta"]
    assert len(np.unique(rows[:, 0])) == 18
    summary = json.loads((out / "trace_summary.json").read_text())
    assert summary["max_abs_rho_exit"] <= 1e-10
    assert (out / "rays.svg").read_text().count("<polyline") == 18


def test_each_command_writes_its_artifacts(small, tmp_path):
    expected = {
        "jacobi": ["jacobi.csv", "jacobi_report.json"],
        "transform": ["sinogram.csv", "transform_report.json"],
        "pestov": ["pestov_report.json"],
        "admissible": ["admissibility_report.json"],
        "invert": ["system.bin", "singular_values.csv", "reconstruction.csv", "inversion_report.json"],
    }
    for cmd, files in expected.items():
        out = tmp_path / cmd
        assert run(cmd, "--config", small, "--out", out) == 0, cmd
        for f in files:
            assert (out / f).exists(), (cmd, f)
    rep = json.loads((tmp_path / "jacobi" / "jacobi_report.json").read_text())
    assert rep["max_relative_error"] <= 1e-4
    A = read_matrix(tmp_path / "invert" / "system.bin")
    inv = json.loads((tmp_path / "invert" / "inversion_report.json").read_text())
    assert list(A.shape) == inv["shape"] == [100, 27]


def test_pestov_grids_flag(small, tmp_path):
    out = tmp_path / "p"
    assert run("pestov", "--config", small, "--out", out, "--grids", "16,32") == 0
    rep = json.loads((out / "pestov_report.json").read_text())
    assert [g["n"] for g in rep["results"][0]["grids"]] == [16, 32]
    assert rep["results"][0]["orders"][0] > 1.0


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"grid": {"nx": 4}}')
    assert run("trace", "--config", bad) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "grid.nx" in err["message"]
    assert run("trace", "--config", tmp_path / "missing.json") == 2
    assert run("pestov", "--config", "curved", "--grids", "a,b") == 2
    assert run("trace", "--config", "curved", "--threads", "0") == 2


def test_numerical_failures_exit_3(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"integrator": {"max_time": 0.2}, "rays": {"n_positions": 4, "n_angles": 2}}))
    assert run("trace", "--config", cfg, "--out", tmp_path / "o") == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "numerical"
    # the budget can allow it
    cfg.write_text(json.dumps({"integrator": {"max_time": 0.2},
                               "rays": {"n_positions": 4, "n_angles": 2, "failure_budget": 8}}))
    assert run("trace", "--config", cfg, "--out", tmp_path / "o") == 0


def test_deterministic_across_threads(small, tmp_path):
    for threads in (1, 2):
        assert run("transform", "--config", small, "--out", tmp_path / f"t{threads}",
                   "--threads", threads, "--seed", 3) == 0
    for f in ("sinogram.csv", "transform_report.json"):
        assert (tmp_path / "t1" / f).read_bytes() == (tmp_path / "t2" / f).read_bytes()


def test_entry_point_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "twistray.cli", "trace", "--config", "flat_annulus",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "traced" in r.stdout
