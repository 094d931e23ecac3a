import json
from pathlib import Path

import pytest

from robdiv import cli, reporting


@pytest.fixture(scope="module")
def model_file(tmp_path_factory, baseline):
    path = tmp_path_factory.mktemp("models") / "ou.json"
    path.write_text(json.dumps(baseline.to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def bad_model_file(tmp_path_factory, baseline):
    d = baseline.to_dict()
    d["xi0"] = 0.9
    path = tmp_path_factory.mktemp("models") / "bad.json"
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def solved_dir(tmp_path_factory, model_file):
    out = tmp_path_factory.mktemp("solved")
    rc = cli.main(["solve", "--model", model_file, "--out", str(out)])
    assert rc == 0
    return out


def test_check_ok(model_file, tmp_path, capsys):
    rc = cli.main(["check", "--model", model_file, "--out", str(tmp_path)])
    assert rc == cli.EXIT_OK
    report = json.loads((tmp_path / "assumption_report.json").read_text())
    assert report["report"]["all_pass"] is True
    assert report["report"]["b_upper"] == pytest.approx(2.9, abs=1e-9)
    assert "config_hash" in report and "tool_version" in report


def test_check_assumption_exit_code(bad_model_file, tmp_path):
    rc = cli.main(["check", "--model", bad_model_file, "--out", str(tmp_path)])
    assert rc == cli.EXIT_ASSUMPTION
    report = json.loads((tmp_path / "assumption_report.json").read_text())
    assert report["report"]["cond_iii"]["passed"] is False


def test_missing_model_is_config_error(tmp_path):
    assert cli.main(["check", "--model", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["check", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_solve_outputs(solved_dir):
    head = json.loads((solved_dir / "solution.json").read_text())
    assert head["solution"]["shooting_residual"] <= 1e-8
    assert head["vi"]["passed"] is True
    lines = (solved_dir / "solution.csv").read_text().splitlines()
    assert lines[0] == "x,v,v_prime,v_double_prime,residual"
    assert len(lines) == 2002


def test_simulate_refuses_worst_without_solution(model_file, tmp_path):
    rc = cli.main(["simulate", "--model", model_file, "--out", str(tmp_path),
                   "--kernel", "worst", "--mode", "maenhout_tilted",
                   "--n-paths", "200", "--dt", "0.01", "--t-max", "50"])
    assert rc == cli.EXIT_CONFIG


def test_simulate_from_solution_file(model_file, solved_dir, tmp_path):
    rc = cli.main(["simulate", "--model", model_file, "--out", str(tmp_path),
                   "--kernel", "worst", "--mode", "maenhout_tilted",
                   "--solution", str(solved_dir / "solution.csv"),
                   "--n-paths", "300", "--dt", "0.01", "--t-max", "150",
                   "--paths-csv", "3"])
    assert rc == cli.EXIT_OK
    est = json.loads((tmp_path / "mc_estimate.json").read_text())["estimate"]
    assert est["n_paths"] == 300
    assert est["mean"] > 0
    assert (tmp_path / "paths.csv").exists()


def test_estimation_error_exit_code(model_file, tmp_path):
    # short horizon, no ruin: every path censored
    rc = cli.main(["simulate", "--model", model_file, "--out", str(tmp_path),
                   "--kernel", "zero", "--mode", "classical_k",
                   "--b", "2.0", "--x0", "2.0",
                   "--n-paths", "150", "--dt", "0.01", "--t-max", "5"])
    assert rc == cli.EXIT_ESTIMATION


def test_lattice_command(model_file, tmp_path):
    rc = cli.main(["lattice", "--model", model_file, "--out", str(tmp_path),
                   "--b", "0.819", "--n-space", "60", "--t-max", "40",
                   "--slice-csv"])
    assert rc == cli.EXIT_OK
    rep = json.loads((tmp_path / "lattice_report.json").read_text())["report"]
    assert rep["equivalence_gap"] < 0.05
    assert (tmp_path / "lattice_slices.csv").exists()


def test_sweep_command(model_file, tmp_path):
    rc = cli.main(["sweep", "--model", model_file, "--out", str(tmp_path),
                   "--r-grid", "0,0.05,0.1", "--x-probes", "0.4,0.8"])
    assert rc == cli.EXIT_OK
    matrix = (tmp_path / "v_matrix.csv").read_text().splitlines()
    assert matrix[0] == "x,R=0,R=0.05,R=0.1"
    assert len(matrix) == 3
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert summary["summary"]["columns_nonincreasing_in_r"] is True
    assert (tmp_path / "b_star.csv").exists()


def test_config_file_defaults_and_flag_override(model_file, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": model_file, "n_grid": 501}))
    out1 = tmp_path / "o1"
    assert cli.main(["solve", "--config", str(cfg), "--out", str(out1)]) == 0
    assert len((out1 / "solution.csv").read_text().splitlines()) == 502

    out2 = tmp_path / "o2"
    assert cli.main(["solve", "--config", str(cfg), "--out", str(out2),
                     "--n-grid", "301"]) == 0
    assert len((out2 / "solution.csv").read_text().splitlines()) == 302


def test_unknown_config_key_rejected(model_file, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": model_file, "n_gird": 100}))
    assert cli.main(["solve", "--config", str(cfg),
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_solve_idempotent_modulo_timestamp(model_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["solve", "--model", model_file, "--out", str(out)]) == 0
        outs.append(out)
    j1 = reporting.strip_timestamp((outs[0] / "solution.json").read_text())
    j2 = reporting.strip_timestamp((outs[1] / "solution.json").read_text())
    assert j1 == j2
    assert (outs[0] / "solution.csv").read_bytes() == \
        (outs[1] / "solution.csv").read_bytes()


def test_model_file_not_mutated(model_file, tmp_path):
    before = Path(model_file).read_bytes()
    cli.main(["check", "--model", model_file, "--out", str(tmp_path)])
    assert Path(model_file).read_bytes() == before
