"""Monte Carlo cost estimation and projected stochastic gradient tuning.

The expected trajectory cost J(theta) is estimated by averaging K
independent rollouts; its gradient comes from one backward pass per rollout
through the recorded graph (backpropagation through time, with the QP
policy differentiated implicitly at each step). Tuning runs plain projected
SGD,

    theta <- Pi_Theta(theta - alpha_k * clip(g_k)),

with a configurable step schedule and optional global-norm gradient
clipping. No momentum or adaptive variants: extension points exist (swap
the update in :func:`tune`) but plain SGD is what ships.

Stream discipline: training iteration k consumes rollout ids
``k*K .. (k+1)*K - 1`` under the training seed; held-out evaluation always
uses the same ``eval_rollouts`` ids starting at ``EVAL_ID_BASE`` under the
evaluation seed, so the two ranges can never overlap (asserted) and the
learning curve is comparable across iterations.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .envs.base import (
    ConstraintViolation,
    Environment,
    PolicyEvaluationError,
    rollout,
)
from .streams import EVAL_ID_BASE, RolloutStream
from .tape import NumericError

__all__ = [
    "StepSchedule",
    "TuneConfig",
    "IterRecord",
    "TuneResult",
    "estimate_cost",
    "estimate_gradient",
    "clip",
    "global_norm",
    "tune",
]

_ROLLOUT_FAILURES = (PolicyEvaluationError, ConstraintViolation, NumericError)


@dataclass(frozen=True)
class StepSchedule:
    """Step size as a function of the iteration index.

    Kinds: ``constant`` (alpha), ``piecewise`` (list of (start_iter, alpha)
    with strictly increasing starts, first start 0), ``halving`` (alpha
    halved every ``period`` iterations).
    """

    kind: str
    alpha: float = 0.0
    steps: tuple[tuple[int, float], ...] = ()
    period: int = 0

    def __post_init__(self):
        if self.kind == "constant":
            if self.alpha <= 0:
                raise ValueError("constant schedule needs alpha > 0")
        elif self.kind == "piecewise":
            if not self.steps:
                raise ValueError("piecewise schedule needs breakpoints")
            starts = [s for s, _ in self.steps]
            if starts[0] != 0:
                raise ValueError("first piecewise breakpoint must start at 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError("piecewise breakpoints must strictly increase")
            if any(a <= 0 for _, a in self.steps):
                raise ValueError("step sizes must be positive")
        elif self.kind == "halving":
            if self.alpha <= 0 or self.period <= 0:
                raise ValueError("halving schedule needs alpha > 0 and period > 0")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, alpha: float) -> "StepSchedule":
        return cls(kind="constant", alpha=alpha)

    @classmethod
    def piecewise(cls, steps) -> "StepSchedule":
        return cls(kind="piecewise", steps=tuple((int(s), float(a)) for s, a in steps))

    @classmethod
    def halving(cls, alpha: float, period: int) -> "StepSchedule":
        return cls(kind="halving", alpha=alpha, period=int(period))

    def at(self, k: int) -> float:
        if self.kind == "constant":
            return self.alpha
        if self.kind == "piecewise":
            current = self.steps[0][1]
            for start, alpha in self.steps:
                if k >= start:
                    current = alpha
            return current
        return self.alpha * 0.5 ** (k // self.period)


@dataclass(frozen=True)
class TuneConfig:
    iterations: int
    rollouts_per_step: int
    schedule: StepSchedule
    clip: float | None = 10.0
    train_seed: int = 0
    eval_seed: int = 1
    eval_rollouts: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.rollouts_per_step < 1:
            raise ValueError("rollouts_per_step must be >= 1")
        if self.eval_rollouts < 1:
            raise ValueError("eval_rollouts must be >= 1")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip threshold must be positive")


@dataclass
class IterRecord:
    iteration: int
    train_cost: float
    eval_cost: float
    grad_norm: float
    step_size: float
    wall_ms: float


@dataclass
class TuneResult:
    final_params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    records: list[IterRecord]
    initial_eval: float
    final_eval: float
    best_eval: float
    status: str = "ok"  # "ok" | "aborted"


def _run_rollouts(env, params, seed, ids, threads):
    def one(rid):
        return rollout(env, params, RolloutStream(seed, rid))

    if threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, ids))
    return [one(rid) for rid in ids]


def estimate_cost(
    env: Environment,
    params: Mapping[str, np.ndarray],
    seed: int,
    k_rollouts: int,
    *,
    id_base: int = 0,
    threads: int = 1,
):
    """Monte Carlo estimate of J(theta): mean over K independent rollouts.

    Returns ``(j_hat, per_rollout_costs)``.
    """
    if k_rollouts < 1:
        raise ValueError("k_rollouts must be >= 1")
    ids = range(id_base, id_base + k_rollouts)
    results = _run_rollouts(env, params, seed, ids, threads)
    costs = np.array([r.cost for r in results])
    return float(costs.sum() / k_rollouts), costs


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip(grads: Mapping[str, np.ndarray], threshold: float | None) -> dict:
    """Rescale to global l2 norm ``threshold`` when it is exceeded."""
    grads = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}
    if threshold is None:
        return grads
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    factor = threshold / norm
    return {k: factor * v for k, v in grads.items()}


def estimate_gradient(
    env: Environment,
    params: Mapping[str, np.ndarray],
    seed: int,
    k_rollouts: int,
    *,
    id_base: int = 0,
    threads: int = 1,
):
    """Stochastic gradient of J(theta) via backward passes over K rollouts.

    Gradients accumulate in rollout-index order so the result is
    reproducible regardless of thread count. Returns ``(grads, j_hat)``.
    """
    if k_rollouts < 1:
        raise ValueError("k_rollouts must be >= 1")
    ids = range(id_base, id_base + k_rollouts)
    results = _run_rollouts(env, params, seed, ids, threads)
    totals: dict[str, np.ndarray] | None = None
    cost_sum = 0.0
    for offset, res in enumerate(results):
        try:
            res.graph.backward(res.cost_node)
        except NumericError as exc:
            raise NumericError(
                f"rollout {id_base + offset}: {exc}", node_id=exc.node_id
            ) from exc
        cost_sum += res.cost
        for name, node in res.param_nodes.items():
            g = res.graph.grad(node)
            if not np.isfinite(g).all():
                bad = next(
                    (
                        nd
                        for nd in res.graph.nodes
                        if nd.grad is not None and not np.isfinite(nd.grad).all()
                    ),
                    node,
                )
                raise NumericError(
                    f"non-finite gradient in rollout {id_base + offset} "
                    f"(eval first at node {bad.id}, op {bad.op!r})",
                    node_id=bad.id,
                )
            if totals is None:
                totals = {}
            if name not in totals:
                totals[name] = g.copy()
            else:
                totals[name] += g
    grads = {k: v / k_rollouts for k, v in (totals or {}).items()}
    return grads, float(cost_sum / k_rollouts)


def tune(env: Environment, config: TuneConfig) -> TuneResult:
    """Projected SGD on the policy parameters, with held-out evaluation.

    Per iteration: estimate the gradient on fresh training streams, evaluate
    the current parameters on the fixed held-out streams, then update and
    project. Iterations whose rollouts fail are skipped (no record); three
    consecutive failures abort the run with partial records.
    """
    k = config.rollouts_per_step
    assert config.iterations * k < EVAL_ID_BASE, "training ids must stay below eval ids"
    params = env.paramset.project(env.initial_parameters())
    records: list[IterRecord] = []
    status = "ok"
    consecutive_failures = 0

    def eval_cost(p) -> float:
        value, _ = estimate_cost(
            env,
            p,
            config.eval_seed,
            config.eval_rollouts,
            id_base=EVAL_ID_BASE,
            threads=config.threads,
        )
        return value

    best_params = {k_: v.copy() for k_, v in params.items()}
    best_eval = np.inf
    initial_eval: float | None = None

    for iteration in range(config.iterations):
        tic = time.perf_counter()
        try:
            grads, train_cost = estimate_gradient(
                env,
                params,
                config.train_seed,
                k,
                id_base=iteration * k,
                threads=config.threads,
            )
            current_eval = eval_cost(params)
        except _ROLLOUT_FAILURES:
            consecutive_failures += 1
            if consecutive_failures >= 3:
                status = "aborted"
                break
            continue
        consecutive_failures = 0
        if initial_eval is None:
            initial_eval = current_eval
        if current_eval < best_eval:
            best_eval = current_eval
            best_params = {k_: v.copy() for k_, v in params.items()}
        grad_norm = global_norm(grads)
        step = config.schedule.at(iteration)
        clipped = clip(grads, config.clip)
        params = env.paramset.project(
            {name: params[name] - step * clipped[name] for name in params}
        )
        records.append(
            IterRecord(
                iteration=iteration,
                train_cost=train_cost,
                eval_cost=current_eval,
                grad_norm=grad_norm,
                step_size=step,
                wall_ms=(time.perf_counter() - tic) * 1e3,
            )
        )

    try:
        final_eval = eval_cost(params)
    except _ROLLOUT_FAILURES:
        final_eval = np.inf
        if status == "ok":
            status = "aborted"
    if final_eval < best_eval:
        best_eval = final_eval
        best_params = {k_: v.copy() for k_, v in params.items()}
    if initial_eval is None:
        initial_eval = final_eval
    return TuneResult(
        final_params=params,
        best_params=best_params,
        records=records,
        initial_eval=initial_eval,
        final_eval=final_eval,
        best_eval=best_eval,
        status=status,
    )
