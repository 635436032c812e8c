"""Command-line front end: exit codes, report formats, reproducibility.

Oracles: mesh counts from the closed formulas (n+1)^2 vertices, 2 n^2
triangles, h = sqrt(2)/n; exit-code contract 0/1/2; JSON reports compared
against direct library calls and against a second identical run.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

from nonsmooth_fem import cli, fem, hj_solver, manufactured
from nonsmooth_fem.hamiltonian import model_from_spec
from nonsmooth_fem.mesh import unit_square_mesh


def run_cli(capsys, argv):
    code = cli.run(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def drop_wall_time(text):
    return "\n".join(
        line for line in text.splitlines() if "wall_time_s" not in line
    )


# ----------------------------------------------------------------- mesh-info


def test_mesh_info_counts(capsys):
    code, out, _ = run_cli(capsys, ["mesh-info", "--n", "4"])
    assert code == 0
    assert out.startswith("vertices=25 triangles=32 h=0.3535")


def test_mesh_info_matches_mesh_module(capsys):
    grid = unit_square_mesh(7)
    code, out, _ = run_cli(capsys, ["mesh-info", "--n", "7"])
    assert code == 0
    assert f"vertices={grid.n_vertices}" in out
    assert f"triangles={grid.n_triangles}" in out
    assert f"h={float(grid.mesh_size_h)!r}" in out


# ---------------------------------------------------------------- exit codes


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, err = run_cli(capsys, ["frobnicate"])
    assert code == 1
    assert err


def test_unknown_flag_is_usage_error(capsys):
    code, _, _ = run_cli(capsys, ["mesh-info", "--n", "4", "--wat"])
    assert code == 1


def test_unknown_hamiltonian_named_in_error(capsys):
    code, _, err = run_cli(
        capsys, ["convergence-hj", "--levels", "8,16", "--hamiltonian", "bogus"]
    )
    assert code == 1
    assert "bogus" in err


def test_unknown_coupling_named_in_error(capsys):
    code, _, err = run_cli(
        capsys, ["solve-mfg", "--n", "4", "--coupling", "local:wibble"]
    )
    assert code == 1
    assert "wibble" in err


def test_unknown_manufactured_named_in_error(capsys):
    code, _, err = run_cli(
        capsys, ["solve-hj", "--n", "4", "--manufactured", "cossin"]
    )
    assert code == 1
    assert "cossin" in err


def test_unknown_density_named_in_error(capsys):
    code, _, err = run_cli(capsys, ["solve-mfg", "--n", "4", "--m0", "spike"])
    assert code == 1
    assert "spike" in err


def test_decreasing_levels_rejected(capsys):
    code, _, err = run_cli(capsys, ["convergence-hj", "--levels", "16,8"])
    assert code == 1
    assert "increasing" in err


def test_non_integer_levels_rejected(capsys):
    code, _, err = run_cli(capsys, ["convergence-hj", "--levels", "8,sixteen"])
    assert code == 1


def test_negative_lambda_rejected(capsys):
    code, _, err = run_cli(capsys, ["solve-hj", "--n", "4", "--lambda", "-1"])
    assert code == 1
    assert "lambda" in err


def test_hamiltonian_without_gradient_rejected_for_mfg(capsys):
    # the coupled system needs H_p; the eikonal model carries none
    code, _, err = run_cli(
        capsys, ["solve-mfg", "--n", "4", "--hamiltonian", "eikonal"]
    )
    assert code == 1
    assert "gradient" in err


def test_help_exits_zero(capsys):
    code, out, _ = run_cli(capsys, ["--help"])
    assert code == 0
    assert "solve-hj" in out


def test_nonconvergence_exits_two_and_still_writes_report(capsys, tmp_path):
    out_path = tmp_path / "stalled.json"
    code, _, _ = run_cli(
        capsys,
        ["solve-hj", "--n", "4", "--tol", "1e-30", "--max-iter", "3",
         "--out", str(out_path)],
    )
    assert code == 2
    report = read_json(out_path)
    assert report["converged"] is False
    assert len(report["residuals"]) >= 1


# ------------------------------------------------------------------ solve-hj


def test_solve_hj_report_matches_library(capsys, tmp_path):
    out_path = tmp_path / "hj.json"
    code, _, _ = run_cli(
        capsys,
        ["solve-hj", "--n", "8", "--hamiltonian", "eikonal", "--lambda", "1.0",
         "--manufactured", "sinsin", "--tol", "1e-10", "--solver", "newton",
         "--out", str(out_path)],
    )
    assert code == 0
    report = read_json(out_path)
    for key in ("h", "dofs", "iterations", "residuals", "err_h1", "err_l2"):
        assert key in report
    assert report["config"]["hamiltonian"] == "eikonal"
    assert report["config"]["seed"] == 42

    model = model_from_spec("eikonal")
    space = fem.make_space(unit_square_mesh(8))
    problem = hj_solver.HjProblem(
        space=space, model=model, lam=1.0, f=manufactured.hj_source(model, 1.0)
    )
    direct = hj_solver.solve_newton(problem, tol=1e-10, max_iter=100)
    assert report["iterations"] == direct.iterations
    assert report["dofs"] == space.n_free
    assert report["h"] == space.mesh.mesh_size_h
    err_h1 = fem.error_vs_exact(
        space, direct.final_u, manufactured.u_star, manufactured.grad_u_star, "H1"
    )
    assert report["err_h1"] == pytest.approx(err_h1, rel=0, abs=0)


def test_solve_hj_picard_converges(capsys, tmp_path):
    out_path = tmp_path / "hj_picard.json"
    code, _, _ = run_cli(
        capsys,
        ["solve-hj", "--n", "8", "--solver", "picard", "--theta", "1.0",
         "--tol", "1e-9", "--out", str(out_path)],
    )
    assert code == 0
    report = read_json(out_path)
    assert report["converged"] is True
    assert report["config"]["solver"] == "picard"


def test_solve_hj_stdout_when_no_out_file(capsys):
    code, out, _ = run_cli(capsys, ["solve-hj", "--n", "4", "--tol", "1e-9"])
    assert code == 0
    report = json.loads(out)
    assert report["command"] == "solve-hj"


def test_reports_byte_identical_up_to_wall_time(capsys, tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        code, _, _ = run_cli(
            capsys, ["solve-hj", "--n", "8", "--tol", "1e-10", "--out", str(p)]
        )
        assert code == 0
    a, b = (p.read_text() for p in paths)
    assert a != b  # the wall-time field moves
    assert drop_wall_time(a) == drop_wall_time(b)


# ----------------------------------------------------------------- solve-mfg


@pytest.fixture(scope="module")
def mfg_report_path(tmp_path_factory):
    out_path = tmp_path_factory.mktemp("cli") / "mfg.json"
    code = cli.run(
        ["solve-mfg", "--n", "8", "--hamiltonian", "huber:1.0",
         "--coupling", "local:linear", "--lambda", "1.0", "--m0", "bump",
         "--solver", "newton", "--tol", "1e-9", "--out", str(out_path)]
    )
    assert code == 0
    return out_path


def test_solve_mfg_report_contents(mfg_report_path):
    report = read_json(mfg_report_path)
    assert report["converged"] is True
    assert report["total_mass"] > 0
    cfg = report["config"]
    assert cfg["hamiltonian"] == "huber:1.0"
    assert cfg["coupling"] == "local:linear"
    assert cfg["m0"] == "bump"
    assert "err_u_h1" not in report  # no manufactured target requested


def test_solve_mfg_manufactured_reports_errors(capsys, tmp_path):
    out_path = tmp_path / "mfg_man.json"
    code, _, _ = run_cli(
        capsys,
        ["solve-mfg", "--n", "8", "--manufactured", "sinsin",
         "--tol", "1e-9", "--out", str(out_path)],
    )
    assert code == 0
    report = read_json(out_path)
    assert 0 < report["err_u_h1"] < 1.0
    assert 0 < report["err_m_l2"] < 0.5


# --------------------------------------------------------- diagnose-stability


def test_diagnose_stability_csv(capsys, tmp_path, mfg_report_path):
    csv_path = tmp_path / "scan.csv"
    code, out, _ = run_cli(
        capsys,
        ["diagnose-stability", "--from", str(mfg_report_path),
         "--samples", "3", "--levels", "4,8", "--out", str(csv_path)],
    )
    assert code == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "h,sample,smin"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) >= 2  # at least one sample per level
    hs = sorted({float(r[0]) for r in rows}, reverse=True)
    assert hs == [np.sqrt(2.0) / 4.0, np.sqrt(2.0) / 8.0]
    smins = [float(r[2]) for r in rows]
    assert all(s > 0 for s in smins)
    assert max(smins) / min(smins) <= 10.0
    assert "ratio_max_min=" in out


def test_diagnose_stability_missing_file(capsys, tmp_path):
    code, _, err = run_cli(
        capsys, ["diagnose-stability", "--from", str(tmp_path / "nope.json")]
    )
    assert code == 1
    assert "nope.json" in err


def test_diagnose_stability_requires_config_echo(capsys, tmp_path):
    bad = tmp_path / "bare.json"
    bad.write_text('{"h": 0.1}\n')
    code, _, err = run_cli(capsys, ["diagnose-stability", "--from", str(bad)])
    assert code == 1
    assert "config" in err


# --------------------------------------------------------------- convergence


def test_convergence_hj_rates(capsys, tmp_path):
    out_path = tmp_path / "conv_hj.json"
    code, _, _ = run_cli(
        capsys,
        ["convergence-hj", "--levels", "8,16,32", "--hamiltonian", "eikonal",
         "--tol", "1e-10", "--out", str(out_path)],
    )
    assert code == 0
    report = read_json(out_path)
    assert report["levels"] == [8, 16, 32]
    errs = report["errors"]["H1"]
    assert errs[0] > errs[1] > errs[2]
    assert 0.8 <= report["rates"]["H1"]["slope"] <= 1.2
    assert report["rates"]["L2"]["slope"] >= 1.5
    assert report["config"]["levels"] == [8, 16, 32]


def test_convergence_mfg_rates(capsys, tmp_path):
    out_path = tmp_path / "conv_mfg.json"
    code, _, _ = run_cli(
        capsys,
        ["convergence-mfg", "--levels", "4,8,16", "--manufactured", "sinsin",
         "--r", "4", "--tol", "1e-9", "--out", str(out_path)],
    )
    assert code == 0
    report = read_json(out_path)
    for key in ("u_H1", "m_L2", "u_W14", "m_L4", "combined_H1_L2",
                "combined_W14_L4"):
        assert key in report["errors"]
        assert key in report["rates"]
    assert report["rates"]["combined_H1_L2"]["slope"] >= 0.8
    assert report["config"]["r"] == 4.0


def test_convergence_mfg_nonconvergent_level_exits_two(capsys, tmp_path):
    code, _, err = run_cli(
        capsys,
        ["convergence-mfg", "--levels", "4,8,16", "--solver", "picard",
         "--tol", "1e-13", "--max-iter", "2"],
    )
    assert code == 2
    assert "n=" in err


def test_thread_cap_env_is_validated(capsys, monkeypatch):
    monkeypatch.setenv("NONSMOOTH_FEM_THREADS", "many")
    code, _, err = run_cli(capsys, ["convergence-hj", "--levels", "4,8,16"])
    assert code == 1
    assert "NONSMOOTH_FEM_THREADS" in err


def test_thread_cap_env_accepted(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("NONSMOOTH_FEM_THREADS", "2")
    out_path = tmp_path / "threaded.json"
    code, _, _ = run_cli(
        capsys,
        ["convergence-hj", "--levels", "4,8,16", "--tol", "1e-9",
         "--out", str(out_path)],
    )
    assert code == 0
    assert read_json(out_path)["errors"]["H1"][0] > 0


# ------------------------------------------------------------------ selftest


def test_selftest_passes(capsys):
    code, out, _ = run_cli(capsys, ["selftest"])
    assert code == 0
    assert "selftest passed" in out
    assert "FAIL" not in out


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "nonsmooth_fem.cli", "mesh-info", "--n", "4"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert proc.stdout.startswith("vertices=25 triangles=32")
