import json

import numpy as np
import pytest

from regmdp import cli, experiments, io
from regmdp.mdp import build_mdp, generate_random_mdp


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


def test_generate_digest(tmp_path, capsys):
    code, out = run(["generate", "--states", "200", "--actions", "50", "--support", "20",
                     "--seed", "7", "-o", "m.json"], capsys)
    assert code == 0
    assert abs(out["reward_mean"] - 0.25) < 0.01
    assert out["support_min"] == out["support_max"] == 20
    mdp = io.load_mdp(tmp_path / "m.json")
    assert set(np.unique(mdp.transition)) == {0.0, 1 / 20}
    code, again = run(["generate", "--states", "200", "--actions", "50", "--support", "20",
                       "--seed", "7", "-o", "m2.json"], capsys)
    assert again["sha256"] == out["sha256"]
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_generate_minimal(tmp_path, capsys):
    code, out = run(["generate", "--states", "1", "--actions", "1", "--support", "1", "-o", "one.json"],
                    capsys)
    assert code == 0 and out["num_states"] == 1 and out["num_actions"] == 1


def test_generate_support_too_large(capsys):
    assert cli.main(["generate", "--states", "3", "--support", "4"]) == cli.EXIT_IO


@pytest.fixture
def scalar_files(tmp_path):
    io.save_mdp(build_mdp([[[1.0]]], [[2.0]], 0.5), tmp_path / "s.json")
    return tmp_path / "s.json"


def test_oracle_scalar(scalar_files, tmp_path, capsys):
    code, out = run(["oracle", str(scalar_files), "--tau", "0.1", "--alpha", "0.1", "-o", "so.json"], capsys)
    assert code == 0
    # default tolerance 1e-12 (1 + max r / (1 - gamma)) = 5e-12
    assert out["v_star_min"] == pytest.approx(4.0, abs=1e-11)
    assert out["residual_standard"] <= 1e-9 and out["residual_quadratic"] <= 1e-9
    first = (tmp_path / "so.json").read_bytes()
    run(["oracle", str(scalar_files), "--tau", "0.1", "--alpha", "0.1", "-o", "so.json"], capsys)
    assert (tmp_path / "so.json").read_bytes() == first


@pytest.fixture
def small_files(tmp_path, capsys):
    run(["generate", "--states", "15", "--actions", "4", "--support", "3", "--gamma", "0.9",
         "--seed", "2", "-o", "m.json"], capsys)
    run(["oracle", str(tmp_path / "m.json"), "--tau", "0.1", "--alpha", "0.1", "-o", "o.json"], capsys)
    return tmp_path / "m.json", tmp_path / "o.json"


def test_solve_writes_trace_and_summary(small_files, tmp_path, capsys):
    m, o = small_files
    code, out = run(["solve", str(m), "--oracle", str(o), "--eta", "0.01", "--c", "0.9",
                     "--eps-tol", "1e-7", "-o", "run/t.csv"], capsys)
    assert code == 0 and out["converged"]
    for key in ("iterations", "final_value_error", "final_policy_error", "lyapunov_initial",
                "lyapunov_final", "monotone_fraction"):
        assert key in out
    summary = json.loads((tmp_path / "run" / "t.summary.json").read_text())
    assert summary == out
    rows = io.read_trace_csv(tmp_path / "run" / "t.csv")
    assert rows[-1]["iter"] == out["iterations"]


def test_solve_from_oracle(small_files, capsys):
    m, o = small_files
    code, out = run(["solve", str(m), "--oracle", str(o), "--init-from-oracle", "-o", "t0.csv"], capsys)
    assert code == 0 and out["iterations"] <= 2


def test_solve_exit_codes(small_files, capsys):
    m, o = small_files
    assert cli.main(["solve", str(m), "--oracle", str(o), "--max-iter", "5", "-o", "a.csv"]) == cli.EXIT_NOT_CONVERGED
    assert cli.main(["solve", str(m), "--oracle", str(o), "--eta", "10", "-o", "b.csv"]) == cli.EXIT_DIVERGED
    assert cli.main(["solve", str(m), "--variant", "NGAD", "--c", "0.5", "--oracle", str(o)]) == cli.EXIT_IO
    assert cli.main(["solve", "missing.json", "--tau", "1", "--alpha", "1"]) == cli.EXIT_IO
    assert cli.main(["solve", str(m)]) == cli.EXIT_IO
    with pytest.raises(SystemExit) as info:
        cli.main(["bogus"])
    assert info.value.code == cli.EXIT_IO


def test_sweep_records_divergence(small_files, tmp_path, capsys):
    m, o = small_files
    code, out = run(["sweep", str(m), "--oracle", str(o), "--etas", "0.01", "10", "--cs", "0", "0.9",
                     "--max-iter", "3000", "-o", "sw.csv"], capsys)
    assert code == 0
    lines = (tmp_path / "sw.csv").read_text().splitlines()
    assert len(lines) == 5
    statuses = [line.split(",")[3] for line in lines[1:]]
    assert statuses.count("diverged") == 2
    assert out["by_c"]["0.9"]["largest_stable_eta"] == 0.01


def test_experiment_config_file_and_flags(tmp_path, capsys):
    cfg = {"exp": "custom", "instance": {"num_states": 10, "num_actions": 3, "support": 3, "seeds": [0, 1]},
           "solvers": [{"variant": "NGAD", "eta": 0.005, "c": 0.0, "eps_tol": 1e-6, "max_iter": 50_000},
                       {"variant": "INGAD", "eta": 0.01, "c": 0.9, "eps_tol": 1e-6, "max_iter": 50_000}]}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out = run(["experiment", str(tmp_path / "c.json"), "--seeds", "3", "-o", "e1"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "e1" / "report.json").read_text())
    assert report["config"]["instance"]["seeds"] == [3]
    assert set(report["summary"]["iteration_ratio"]) == {"3"}
    for row in report["runs"]:
        for key in ("exp", "variant", "iterations", "converged", "final_value_error",
                    "final_policy_error", "lyapunov_initial", "lyapunov_final", "monotone_fraction"):
            assert key in row
    assert len(list((tmp_path / "e1" / "runs").glob("*.csv"))) == 2


def test_experiment_rerun_byte_identical(tmp_path, capsys):
    args = ["experiment", "--exp", "exp2", "--states", "12", "--actions", "3", "--support", "3",
            "--gamma", "0.9", "--seeds", "0", "--record-every", "50"]
    assert cli.main(args + ["-o", "a"]) == 0
    assert cli.main(args + ["-o", "b"]) == 0
    a = sorted((tmp_path / "a" / "runs").glob("*.csv"))
    assert len(a) == 2
    for f in a:
        assert f.read_bytes() == (tmp_path / "b" / "runs" / f.name).read_bytes()


def test_experiment_records_diverged_run(tmp_path, capsys):
    cfg = {"exp": "custom", "instance": {"num_states": 10, "num_actions": 3, "support": 3, "seeds": [0]},
           "solvers": [{"variant": "NGAD", "eta": 0.005, "c": 0.0, "eps_tol": 1e-6, "max_iter": 50_000},
                       {"variant": "INGAD", "eta": 50.0, "c": 0.9, "eps_tol": 1e-6, "max_iter": 1000}]}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out = run(["experiment", str(tmp_path / "c.json"), "-o", "e"], capsys)
    assert code == cli.EXIT_DIVERGED
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    status = {r["variant"]: r["status"] for r in report["runs"]}
    assert status == {"NGAD": "converged", "INGAD": "diverged"}
    assert report["summary"]["diverged_runs"] == ["custom_seed0_INGAD"]
    assert report["summary"]["iteration_ratio"] == {}
    assert [p.name for p in (tmp_path / "e" / "runs").glob("*.csv")] == ["custom_seed0_NGAD.csv"]


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        experiments.ExperimentConfig.from_dict({"exp": "exp3", "buffer": None})
    with pytest.raises(ValueError):
        experiments.ExperimentConfig.from_dict({"exp": "nope"})


def test_monotone_fraction_and_decile():
    assert experiments.monotone_fraction([3, 2, 2, 1]) == 1.0
    assert experiments.monotone_fraction([3, 4, 2, 1]) == pytest.approx(2 / 3)
    x = np.r_[np.full(10, 8.0), np.ones(80), np.full(10, 2.0)]
    assert experiments.decile_ratio(x) == 0.25


def test_sweep_function(capsys):
    mdp = generate_random_mdp(10, 3, 3, seed=0, discount=0.9)
    rows, best = experiments.sweep(mdp, None, [0.01, 50.0], [0.0], alpha=0.1, tau=0.1, max_iter=20_000)
    assert [r["status"] for r in rows] == ["converged", "diverged"]
    assert best["0.0"] == {"largest_stable_eta": 0.01, "largest_converged_eta": 0.01}
