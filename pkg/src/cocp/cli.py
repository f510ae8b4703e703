"""Experiment runner and verification suites.

Subcommands:

* ``tune <config.toml>``: build the configured environment, run projected
  SGD, and write ``curve.csv``, ``summary.json``, ``params_final.json``,
  ``params_best.json``, and optionally ``curve.svg`` to the output
  directory.
* ``simulate <config.toml> <params.json>``: roll out saved parameters on
  held-out streams, writing ``trajectories.csv``, ``costs.csv``, and
  ``stats.json``.
* ``gradcheck``: compare the implicit QP derivative against central finite
  differences, either on random QPs (with the adjoint identity and a
  degenerate fallback fixture) or end-to-end through a short frozen-noise
  rollout of a benchmark environment.
* ``solvercheck``: random feasible QPs; verifies KKT residuals and compares
  objectives against the active-set enumeration oracle on small instances.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 runtime abort. ``--threads`` defaults to the available cores and is
overridden by the ``COCP_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import qp_diff, reference
from .envs import ENV_NAMES, make_env, rollout
from .qp_solver import OPTIMAL, QpData, solve
from .streams import EVAL_ID_BASE, RolloutStream
from .svg import line_chart
from .tuner import StepSchedule, TuneConfig, estimate_cost, estimate_gradient, tune

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_ABORT = 3

CURVE_HEADER = ("iter", "train_cost", "eval_cost", "grad_norm", "step_size", "wall_ms")


class ConfigError(Exception):
    pass


def _default_threads() -> int:
    env_value = os.environ.get("COCP_THREADS")
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError as exc:
            raise ConfigError(f"COCP_THREADS={env_value!r} is not an integer") from exc
    return os.cpu_count() or 1


def _resolve_threads(flag_value) -> int:
    if os.environ.get("COCP_THREADS"):
        return _default_threads()
    if flag_value is not None:
        return max(1, int(flag_value))
    return os.cpu_count() or 1


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc


def _schedule_from_config(raw: dict) -> StepSchedule:
    kind = raw.get("kind")
    if kind == "constant":
        return StepSchedule.constant(float(raw["alpha"]))
    if kind == "piecewise":
        return StepSchedule.piecewise(raw["steps"])
    if kind == "halving":
        return StepSchedule.halving(float(raw["alpha"]), int(raw["period"]))
    raise ConfigError(f"unknown schedule kind {kind!r}")


class Experiment:
    """Configuration for one tuning run, parsed from TOML."""

    def __init__(self, raw: dict, config_path: str, threads: int):
        try:
            exp = raw["experiment"]
            self.env_name = exp["env"]
            self.seed = int(exp.get("seed", 0))
            self.out_dir = Path(exp.get("out_dir", "runs/" + self.env_name))
            self.plot = bool(exp.get("plot", False))
            self.env_params = dict(raw.get("env", {}))
            tune_raw = dict(raw["tune"])
            schedule = _schedule_from_config(tune_raw.pop("schedule"))
            clip_value = tune_raw.pop("clip", 10.0)
            self.tune_config = TuneConfig(
                iterations=int(tune_raw.pop("iterations")),
                rollouts_per_step=int(tune_raw.pop("rollouts_per_step")),
                schedule=schedule,
                clip=None if clip_value in (None, "none", 0) else float(clip_value),
                train_seed=int(tune_raw.pop("train_seed", 0)),
                eval_seed=int(tune_raw.pop("eval_seed", 1)),
                eval_rollouts=int(tune_raw.pop("eval_rollouts", 10)),
                threads=threads,
            )
            if tune_raw:
                raise ConfigError(f"unknown [tune] keys: {sorted(tune_raw)}")
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config {config_path}: {exc}") from exc
        if self.env_name not in ENV_NAMES:
            raise ConfigError(
                f"unknown env {self.env_name!r}; expected one of {ENV_NAMES}"
            )

    def build_env(self):
        try:
            return make_env(self.env_name, self.seed, self.env_params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [env] section: {exc}") from exc


def _write_curve(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for rec in records:
            writer.writerow(
                [
                    rec.iteration,
                    repr(rec.train_cost),
                    repr(rec.eval_cost),
                    repr(rec.grad_norm),
                    repr(rec.step_size),
                    repr(rec.wall_ms),
                ]
            )


def _write_params(path: Path, params: dict) -> None:
    payload = {name: np.asarray(value).tolist() for name, value in params.items()}
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _load_params(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"params file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"params file parse error: {exc}") from exc
    return {name: np.asarray(value, dtype=np.float64) for name, value in raw.items()}


def _prepare_out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}") from exc
    return path


def cmd_tune(args) -> int:
    threads = _resolve_threads(args.threads)
    experiment = Experiment(_load_toml(args.config), args.config, threads)
    env = experiment.build_env()
    out_dir = _prepare_out_dir(Path(args.out) if args.out else experiment.out_dir)
    result = tune(env, experiment.tune_config)
    _write_curve(out_dir / "curve.csv", result.records)
    _write_params(out_dir / "params_final.json", result.final_params)
    _write_params(out_dir / "params_best.json", result.best_params)
    initial = result.initial_eval
    summary = {
        "env": experiment.env_name,
        "seed": experiment.seed,
        "train_seed": experiment.tune_config.train_seed,
        "eval_seed": experiment.tune_config.eval_seed,
        "iterations": experiment.tune_config.iterations,
        "rollouts_per_step": experiment.tune_config.rollouts_per_step,
        "eval_rollouts": experiment.tune_config.eval_rollouts,
        "initial_eval_cost": initial,
        "final_eval_cost": result.final_eval,
        "best_eval_cost": result.best_eval,
        "relative_improvement": (
            (initial - result.final_eval) / abs(initial) if initial else 0.0
        ),
        "status": result.status,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if experiment.plot:
        iters = [r.iteration for r in result.records]
        chart = line_chart(
            {
                "train": (iters, [r.train_cost for r in result.records]),
                "eval": (iters, [r.eval_cost for r in result.records]),
            },
            title=f"{experiment.env_name}: cost per iteration",
            x_label="iteration",
            y_label="cost",
        )
        (out_dir / "curve.svg").write_text(chart)
    print(
        f"{experiment.env_name}: eval cost {initial:.6g} -> {result.final_eval:.6g} "
        f"(best {result.best_eval:.6g}) over {len(result.records)} iterations"
    )
    if result.status == "aborted":
        print("tuning aborted after repeated rollout failures", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_simulate(args) -> int:
    threads = _resolve_threads(args.threads)
    experiment = Experiment(_load_toml(args.config), args.config, threads)
    env = experiment.build_env()
    params = _load_params(args.params)
    try:
        env.template.check_params(params)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"params do not match {experiment.env_name}: {exc}") from exc
    seed = args.seed if args.seed is not None else experiment.tune_config.eval_seed
    out_dir = _prepare_out_dir(Path(args.out) if args.out else experiment.out_dir)

    costs = []
    with open(out_dir / "trajectories.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["rollout", "t", *env.state_labels, *env.input_labels]
        )
        for i in range(args.rollouts):
            res = rollout(env, params, RolloutStream(seed, EVAL_ID_BASE + i))
            costs.append(res.cost)
            for t, x_node in enumerate(res.states):
                u_vals = (
                    [repr(float(v)) for v in res.inputs[t].value]
                    if t < len(res.inputs)
                    else [""] * env.input_dim
                )
                writer.writerow(
                    [i, t, *(repr(float(v)) for v in x_node.value), *u_vals]
                )
    costs_arr = np.array(costs)
    with open(out_dir / "costs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rollout", "cost"])
        for i, c in enumerate(costs):
            writer.writerow([i, repr(c)])
    stderr = float(costs_arr.std(ddof=1) / np.sqrt(len(costs))) if len(costs) > 1 else 0.0
    stats = {
        "env": experiment.env_name,
        "rollouts": args.rollouts,
        "seed": seed,
        "mean_cost": float(costs_arr.mean()),
        "stderr": stderr,
        "std": float(costs_arr.std(ddof=1)) if len(costs) > 1 else 0.0,
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(
        f"{experiment.env_name}: {args.rollouts} rollouts, "
        f"mean cost {stats['mean_cost']:.6g} +/- {stderr:.2g} (stderr)"
    )
    return EXIT_OK


def _gradcheck_random_qp(trials: int, tol: float, rng_seed: int = 12345):
    """FD comparison and adjoint identity on random strictly convex QPs."""
    rng = np.random.default_rng(rng_seed)
    worst_rel = 0.0
    worst_adjoint = 0.0
    failures = []
    produced = 0
    while produced < trials:
        n = int(rng.integers(2, 9))
        p = int(rng.integers(0, max(1, n // 2) + 1))
        m = int(rng.integers(1, n + 3))
        qp = reference.random_feasible_qp(rng, n, p, m)
        sol = solve(qp, tol_solve=1e-12, max_iters=200)
        if sol.status != OPTIMAL:
            continue
        if qp_diff.strict_complementarity_margin(qp, sol) <= 1e-5:
            continue  # stay clear of degenerate instances; FD needs smoothness
        produced += 1
        xbar = rng.standard_normal(n)
        grads = qp_diff.vjp(qp, sol, xbar)
        fd = reference.fd_solution_gradients(qp, xbar, step=1e-6)
        analytic = {
            "dP": grads.dP,
            "dq": grads.dq,
            "dA": grads.dA,
            "db": grads.db,
            "dG": grads.dG,
            "dh": grads.dh,
        }
        rel = 0.0
        for key, fd_val in fd.items():
            if fd_val.size == 0:
                continue
            err = np.abs(analytic[key] - fd_val) / (1.0 + np.abs(fd_val))
            rel = max(rel, float(err.max()))
        worst_rel = max(worst_rel, rel)
        # adjoint identity <xbar, J t> == <J' xbar, t>
        tangents = {
            "dP": rng.standard_normal((n, n)),
            "dq": rng.standard_normal(n),
            "dA": rng.standard_normal((p, n)),
            "db": rng.standard_normal(p),
            "dG": rng.standard_normal((m, n)),
            "dh": rng.standard_normal(m),
        }
        dx = qp_diff.jvp(qp, sol, **tangents)
        lhs = float(xbar @ dx)
        rhs = sum(float((analytic[k] * tangents[k]).sum()) for k in tangents)
        adjoint_gap = abs(lhs - rhs)
        worst_adjoint = max(worst_adjoint, adjoint_gap)
        if rel > tol or adjoint_gap > 1e-9:
            failures.append(
                {
                    "P": qp.P.tolist(),
                    "q": qp.q.tolist(),
                    "A": qp.A.tolist(),
                    "b": qp.b.tolist(),
                    "G": qp.G.tolist(),
                    "h": qp.h.tolist(),
                    "xbar": xbar.tolist(),
                    "rel_error": rel,
                    "adjoint_gap": adjoint_gap,
                }
            )
    return worst_rel, worst_adjoint, failures


def _gradcheck_degenerate() -> bool:
    """Exercise the least-squares fallback on a constructed degenerate QP.

    min (1/2) x^2  s.t.  x <= 0 has x* = 0 with both multiplier and slack
    zero, so the KKT Jacobian is singular by construction.
    """
    from .qp_solver import QpSolution

    qp = QpData(P=np.array([[1.0]]), q=np.array([0.0]), G=np.array([[1.0]]), h=np.array([0.0]))
    sol = QpSolution(
        x=np.zeros(1),
        nu=np.zeros(0),
        lam=np.zeros(1),
        status=OPTIMAL,
        iterations=0,
        kkt_residuals=(0.0, 0.0, 0.0, 0.0),
    )
    grads = qp_diff.vjp(qp, sol, np.ones(1))
    return grads.fallback


def _gradcheck_env(env_name: str, trials: int, tol: float) -> tuple[float, bool]:
    """Directional FD check of the end-to-end parameter gradient.

    Short horizon (T=3), frozen disturbance streams: the rollout cost is a
    deterministic function of theta, so central differences along random
    parameter directions must match the BPTT gradient.
    """
    env = make_env(env_name, seed=3, params={"horizon": 3})
    params = env.initial_parameters()
    seed, k_rollouts = 515, 2
    grads, _ = estimate_gradient(env, params, seed, k_rollouts, id_base=0)
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(trials):
        direction = {
            name: rng.standard_normal(np.asarray(value).shape)
            for name, value in params.items()
        }
        norm = np.sqrt(sum(float((d * d).sum()) for d in direction.values()))
        direction = {k: v / norm for k, v in direction.items()}
        analytic = sum(float((grads[k] * direction[k]).sum()) for k in direction)
        eps = 1e-6

        def shifted(sign):
            moved = {k: params[k] + sign * eps * direction[k] for k in params}
            value, _ = estimate_cost(env, moved, seed, k_rollouts, id_base=0)
            return value

        fd = (shifted(+1.0) - shifted(-1.0)) / (2.0 * eps)
        rel = abs(analytic - fd) / (1.0 + abs(fd))
        worst = max(worst, rel)
    return worst, worst <= tol


def cmd_gradcheck(args) -> int:
    if args.env is None and not args.random_qp:
        args.random_qp = True
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    if args.random_qp:
        worst_rel, worst_adjoint, failures = _gradcheck_random_qp(
            args.trials, args.tol
        )
        fallback_ok = _gradcheck_degenerate()
        print(
            f"gradcheck random-qp: {args.trials} trials, "
            f"max FD relative error {worst_rel:.3e} (tol {args.tol:g}), "
            f"max adjoint gap {worst_adjoint:.3e} (tol 1e-09)"
        )
        print(
            "degenerate fixture: fallback "
            + ("exercised" if fallback_ok else "NOT exercised")
            + " (excluded from tolerance check); "
            + f"counters {qp_diff.counters()}"
        )
        if failures:
            replay = Path("gradcheck_failures.json")
            replay.write_text(json.dumps(failures, indent=2) + "\n")
            print(f"{len(failures)} failing instances written to {replay}")
            return EXIT_CHECK_FAILED
        if not fallback_ok:
            return EXIT_CHECK_FAILED
        return EXIT_OK
    worst, ok = _gradcheck_env(args.env, args.trials, args.tol)
    print(
        f"gradcheck env={args.env}: {args.trials} directional trials, "
        f"max relative error {worst:.3e} (tol {args.tol:g})"
    )
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_solvercheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    rng = np.random.default_rng(777)
    worst = np.zeros(4)
    worst_obj_rel = 0.0
    oracle_checked = 0
    not_optimal = 0
    for trial in range(args.trials):
        small = trial % 3 == 0
        if small:
            n = int(rng.integers(1, 7))
            p = int(rng.integers(0, max(1, n // 2) + 1))
            m = int(rng.integers(0, 7))
        else:
            n = int(rng.integers(2, 31))
            p = int(rng.integers(0, n // 2 + 1))
            m = int(rng.integers(0, n + 5))
        qp = reference.random_feasible_qp(rng, n, p, m)
        sol = solve(qp)
        if sol.status != OPTIMAL:
            not_optimal += 1
            continue
        worst = np.maximum(worst, sol.kkt_residuals)
        if small and m <= 6:
            _, _, _, obj_oracle = reference.active_set_solve(qp)
            rel = abs(qp.objective(sol.x) - obj_oracle) / (1.0 + abs(obj_oracle))
            worst_obj_rel = max(worst_obj_rel, rel)
            oracle_checked += 1
    names = ("stationarity", "primal-eq", "primal-in", "complementarity")
    print(f"solvercheck: {args.trials} random feasible QPs (n_var <= 30)")
    for name, value in zip(names, worst):
        print(f"  max {name} residual: {value:.3e}")
    print(
        f"  active-set oracle agreement on {oracle_checked} small instances: "
        f"max objective relative error {worst_obj_rel:.3e}"
    )
    ok = not_optimal == 0 and worst.max() <= 1e-8 and worst_obj_rel <= 1e-7
    if not_optimal:
        print(f"  {not_optimal} solves did not reach optimal status")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cocp",
        description="Tune and verify convex-program control policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_tune = sub.add_parser("tune", help="run a tuning experiment from a TOML config")
    p_tune.add_argument("config")
    p_tune.add_argument("--out", help="override the configured output directory")
    p_tune.add_argument("--threads", type=int, default=None)
    p_tune.set_defaults(func=cmd_tune)

    p_sim = sub.add_parser("simulate", help="roll out saved parameters")
    p_sim.add_argument("config")
    p_sim.add_argument("params")
    p_sim.add_argument("--rollouts", type=int, default=10)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", help="override the configured output directory")
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference derivative checks")
    group = p_grad.add_mutually_exclusive_group()
    group.add_argument("--env", choices=ENV_NAMES)
    group.add_argument("--random-qp", action="store_true")
    p_grad.add_argument("--trials", type=int, default=100)
    p_grad.add_argument("--tol", type=float, default=1e-5)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_solver = sub.add_parser("solvercheck", help="QP solver conformance checks")
    p_solver.add_argument("--trials", type=int, default=1000)
    p_solver.set_defaults(func=cmd_solvercheck)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
