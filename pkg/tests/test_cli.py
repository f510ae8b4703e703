import csv
import json
import numpy as np

from cocp.cli import CURVE_HEADER, main

MINI_LQR = """
[experiment]
env = "lqr"
seed = 7
out_dir = "{out}"
plot = true

[env]
n = 4
m = 2
horizon = 10

[tune]
iterations = {iterations}
rollouts_per_step = 2
eval_rollouts = 4
train_seed = 1
eval_seed = 2
clip = 10.0

[tune.schedule]
kind = "constant"
alpha = 0.2
"""


def _write_config(tmp_path, iterations=3, name="mini.toml"):
    out = tmp_path / "out"
    cfg = tmp_path / name
    cfg.write_text(MINI_LQR.format(out=out, iterations=iterations))
    return cfg, out


def _read_curve(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_tune_writes_expected_artifacts(tmp_path):
    cfg, out = _write_config(tmp_path)
    assert main(["tune", str(cfg), "--threads", "1"]) == 0
    rows = _read_curve(out / "curve.csv")
    assert rows[0] == list(CURVE_HEADER)
    assert len(rows) == 4  # header + one row per iteration
    summary = json.loads((out / "summary.json").read_text())
    for key in (
        "env",
        "seed",
        "train_seed",
        "eval_seed",
        "iterations",
        "rollouts_per_step",
        "eval_rollouts",
        "initial_eval_cost",
        "final_eval_cost",
        "best_eval_cost",
        "relative_improvement",
        "status",
    ):
        assert key in summary and summary[key] is not None
    params = json.loads((out / "params_final.json").read_text())
    assert np.asarray(params["theta"]).shape == (4, 4)
    assert (out / "params_best.json").exists()
    svg = (out / "curve.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_tune_zero_iterations_header_only(tmp_path):
    cfg, out = _write_config(tmp_path, iterations=0)
    assert main(["tune", str(cfg)]) == 0
    rows = _read_curve(out / "curve.csv")
    assert rows == [list(CURVE_HEADER)]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["initial_eval_cost"] == summary["final_eval_cost"]


def test_tune_rerun_reproduces_curve_excluding_wall_ms(tmp_path):
    cfg, out = _write_config(tmp_path)
    assert main(["tune", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["tune", str(cfg), "--out", str(tmp_path / "b")]) == 0

    def strip(path):
        return [row[:-1] for row in _read_curve(path)]

    assert strip(tmp_path / "a" / "curve.csv") == strip(tmp_path / "b" / "curve.csv")


def test_tune_missing_config_exits_2(tmp_path):
    assert main(["tune", str(tmp_path / "nope.toml")]) == 2


def test_tune_bad_toml_exits_2(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("not [valid toml")
    assert main(["tune", str(cfg)]) == 2


def test_tune_unknown_env_exits_2(tmp_path):
    cfg = tmp_path / "bad_env.toml"
    cfg.write_text(
        """
[experiment]
env = "nonexistent"
[tune]
iterations = 1
rollouts_per_step = 1
[tune.schedule]
kind = "constant"
alpha = 0.1
"""
    )
    assert main(["tune", str(cfg)]) == 2


def test_simulate_writes_trajectories_and_stats(tmp_path):
    cfg, out = _write_config(tmp_path)
    assert main(["tune", str(cfg)]) == 0
    rc = main(
        [
            "simulate",
            str(cfg),
            str(out / "params_final.json"),
            "--rollouts",
            "3",
            "--out",
            str(tmp_path / "sim"),
        ]
    )
    assert rc == 0
    rows = _read_curve(tmp_path / "sim" / "trajectories.csv")
    assert rows[0] == ["rollout", "t", "x1", "x2", "x3", "x4", "u1", "u2"]
    assert len(rows) == 1 + 3 * 11  # 3 rollouts, states t=0..10
    stats = json.loads((tmp_path / "sim" / "stats.json").read_text())
    assert stats["rollouts"] == 3 and np.isfinite(stats["mean_cost"])
    costs = _read_curve(tmp_path / "sim" / "costs.csv")
    assert len(costs) == 4


def test_simulate_same_seed_identical_files(tmp_path):
    cfg, out = _write_config(tmp_path)
    assert main(["tune", str(cfg)]) == 0
    for sub in ("s1", "s2"):
        rc = main(
            [
                "simulate",
                str(cfg),
                str(out / "params_final.json"),
                "--rollouts",
                "1",
                "--seed",
                "42",
                "--out",
                str(tmp_path / sub),
            ]
        )
        assert rc == 0
    assert (tmp_path / "s1" / "trajectories.csv").read_bytes() == (
        tmp_path / "s2" / "trajectories.csv"
    ).read_bytes()


def test_simulate_shape_mismatch_exits_2(tmp_path):
    cfg, out = _write_config(tmp_path)
    assert main(["tune", str(cfg)]) == 0
    bad = tmp_path / "bad_params.json"
    bad.write_text(json.dumps({"theta": [[1.0, 0.0], [0.0, 1.0]]}))
    assert main(["simulate", str(cfg), str(bad)]) == 2


def test_simulate_riccati_parameters_match_baseline(tmp_path):
    from cocp.envs import lqr_env

    env = lqr_env(seed=7, n=4, m=2, horizon=10)
    base = env.info["riccati"]
    theta = np.linalg.cholesky(base.P).T
    params_file = tmp_path / "riccati.json"
    params_file.write_text(json.dumps({"theta": theta.tolist()}))
    cfg, _ = _write_config(tmp_path)
    rc = main(
        [
            "simulate",
            str(cfg),
            str(params_file),
            "--rollouts",
            "100",
            "--out",
            str(tmp_path / "sim"),
        ]
    )
    assert rc == 0
    stats = json.loads((tmp_path / "sim" / "stats.json").read_text())
    assert abs(stats["mean_cost"] - base.j_opt) <= 3 * stats["stderr"]


def test_simulate_supply_chain_storage_columns(tmp_path):
    cfg = tmp_path / "supply.toml"
    cfg.write_text(
        """
[experiment]
env = "supply_chain"
seed = 0
out_dir = "{out}"

[env]
horizon = 4

[tune]
iterations = 0
rollouts_per_step = 1
eval_rollouts = 2
train_seed = 1
eval_seed = 2

[tune.schedule]
kind = "constant"
alpha = 0.05
""".format(out=tmp_path / "out")
    )
    assert main(["tune", str(cfg)]) == 0
    rc = main(
        [
            "simulate",
            str(cfg),
            str(tmp_path / "out" / "params_final.json"),
            "--rollouts",
            "2",
            "--out",
            str(tmp_path / "sim"),
        ]
    )
    assert rc == 0
    rows = _read_curve(tmp_path / "sim" / "trajectories.csv")
    header = rows[0]
    assert header[2:6] == ["h1", "h2", "h3", "h4"]  # per-warehouse storage
    # storage stays within capacity in the written trajectories
    h_cols = np.array([[float(r[c]) for c in range(2, 6)] for r in rows[1:]])
    assert h_cols.min() >= -1e-6 and h_cols.max() <= 3.0 + 1e-6


def test_gradcheck_random_qp_exit_zero():
    assert main(["gradcheck", "--random-qp", "--trials", "10", "--tol", "1e-5"]) == 0


def test_gradcheck_env_exit_zero():
    assert main(["gradcheck", "--env", "lqr", "--trials", "2", "--tol", "1e-4"]) == 0


def test_gradcheck_impossible_tolerance_exits_1():
    assert main(["gradcheck", "--env", "lqr", "--trials", "2", "--tol", "1e-16"]) == 1


def test_solvercheck_exit_zero():
    assert main(["solvercheck", "--trials", "60"]) == 0


def test_usage_error_exit_2():
    assert main(["tune"]) == 2
    assert main(["unknown-command"]) == 2


def test_threads_env_var_override(tmp_path, monkeypatch):
    monkeypatch.setenv("COCP_THREADS", "1")
    cfg, out = _write_config(tmp_path)
    assert main(["tune", str(cfg), "--threads", "4"]) == 0
    monkeypatch.setenv("COCP_THREADS", "banana")
    assert main(["tune", str(cfg)]) == 2
