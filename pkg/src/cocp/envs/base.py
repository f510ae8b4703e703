"""Benchmark environment container and the shared closed-loop rollout.

An :class:`Environment` bundles everything one benchmark needs: dynamics and
stage cost built on the tape, disturbance and initial-state samplers driven
by counter-based streams, the policy template with its parameter set and
initialization, and a per-step feasibility check. :func:`rollout` unrolls
the closed loop into a single graph whose scalar root is the trajectory
cost, so one backward pass yields the full parameter gradient.

Hard constraints written into the cost as indicator terms are never
evaluated as infinities: the policy's QP enforces them by construction, and
any violation beyond ``TOL_FEAS`` (possible only through solver inaccuracy)
raises :class:`ConstraintViolation` instead of poisoning the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..policy import CocpTemplate, ParamSet, evaluate
from ..qp_solver import QpError
from ..streams import RolloutStream
from ..tape import Graph, Node

__all__ = [
    "Environment",
    "RolloutResult",
    "ConstraintViolation",
    "PolicyEvaluationError",
    "TOL_FEAS",
    "rollout",
]

#: Hard policy constraints must hold within this tolerance on every step.
TOL_FEAS = 1e-6


class ConstraintViolation(Exception):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class PolicyEvaluationError(Exception):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"policy evaluation failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class Environment:
    """One benchmark problem: dynamics, cost, samplers, policy template."""

    name: str
    state_dim: int
    input_dim: int
    horizon: int
    #: number of policy evaluations per rollout
    policy_steps: int
    #: number of leading steps on which dynamics are applied
    dynamics_steps: int
    #: trajectory cost = cost_scale * sum of stage costs
    cost_scale: float
    template: CocpTemplate
    paramset: ParamSet
    init_params: dict[str, np.ndarray]
    sample_initial: Callable[[RolloutStream], np.ndarray]
    sample_disturbance: Callable[[RolloutStream, int], np.ndarray]
    dynamics: Callable[[Graph, Node, Node, np.ndarray, int], Node]
    stage_cost: Callable[[Graph, Node, Node, np.ndarray, int], Node]
    check_step: Callable[[np.ndarray, np.ndarray, np.ndarray, int], None] | None = None
    state_labels: tuple[str, ...] = ()
    input_labels: tuple[str, ...] = ()
    #: instance data exposed for baselines and diagnostics
    info: dict[str, Any] = field(default_factory=dict)

    def initial_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.init_params.items()}


@dataclass
class RolloutResult:
    graph: Graph
    param_nodes: dict[str, Node]
    states: list[Node]
    inputs: list[Node]
    disturbances: list[np.ndarray]
    cost_node: Node

    @property
    def cost(self) -> float:
        return float(self.cost_node.value)


def rollout(env: Environment, params, stream: RolloutStream) -> RolloutResult:
    """Simulate one closed-loop trajectory on a fresh graph.

    The returned graph contains the state and input nodes of every step and
    the scalar trajectory cost as its root. Identical ``stream`` identities
    reproduce the rollout bit for bit.
    """
    graph = Graph()
    env.template.check_params(
        params if isinstance(params, dict) else dict(params)
    )
    param_nodes = {
        spec.name: graph.param(np.asarray(params[spec.name], dtype=np.float64))
        for spec in env.template.param_specs
    }
    x = graph.constant(np.asarray(env.sample_initial(stream), dtype=np.float64))
    states = [x]
    inputs: list[Node] = []
    disturbances: list[np.ndarray] = []
    total: Node | None = None
    for t in range(env.policy_steps):
        try:
            u = evaluate(env.template, x, param_nodes, graph)
        except QpError as exc:
            raise PolicyEvaluationError(t, exc) from exc
        inputs.append(u)
        w = env.sample_disturbance(stream, t)
        disturbances.append(w)
        if env.check_step is not None:
            env.check_step(x.value, u.value, w, t)
        c = env.stage_cost(graph, x, u, w, t)
        total = c if total is None else graph.add(total, c)
        if t < env.dynamics_steps:
            x = env.dynamics(graph, x, u, w, t)
            states.append(x)
    cost_node = graph.scale(env.cost_scale, total)
    return RolloutResult(graph, param_nodes, states, inputs, disturbances, cost_node)
