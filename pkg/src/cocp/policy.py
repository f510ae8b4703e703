"""Convex-program control policies as tape-level QP templates.

A :class:`CocpTemplate` maps a state node and named parameter nodes to the
data of a canonical QP, all recorded on the tape, plus the slice of the QP
variable vector that constitutes the control input. Evaluating the policy
means solving that QP through :func:`cocp.qp_diff.qp_node`, so gradients
flow both to the parameters and to the state that produced the data.

:class:`ParamSet` describes the feasible set of the tunable parameters per
component (unconstrained, nonnegative, or box) and provides the Euclidean
projection used by the tuner after each gradient step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .qp_diff import qp_node
from .tape import Graph, Node

__all__ = [
    "ParamSpec",
    "ParamBound",
    "ParamSet",
    "QpNodes",
    "CocpTemplate",
    "evaluate",
    "project",
]


class QpNodes(NamedTuple):
    """QP data assembled on the tape; constraint blocks may be None."""

    P: Node
    q: Node
    A: Node | None = None
    b: Node | None = None
    G: Node | None = None
    h: Node | None = None


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]


@dataclass(frozen=True)
class ParamBound:
    """Feasible set of one parameter component."""

    kind: str = "free"  # "free" | "nonnegative" | "box"
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in ("free", "nonnegative", "box"):
            raise ValueError(f"unknown bound kind {self.kind!r}")
        if self.kind == "box" and not self.lo <= self.hi:
            raise ValueError("box bound needs lo <= hi")

    def project(self, value: np.ndarray) -> np.ndarray:
        if self.kind == "nonnegative":
            return np.maximum(value, 0.0)
        if self.kind == "box":
            return np.clip(value, self.lo, self.hi)
        return value.copy()


@dataclass(frozen=True)
class ParamSet:
    """Per-component feasible set with Euclidean projection."""

    bounds: Mapping[str, ParamBound]

    def project(self, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, value in params.items():
            bound = self.bounds.get(name, ParamBound())
            out[name] = bound.project(np.asarray(value, dtype=np.float64))
        return out

    def contains(
        self, params: Mapping[str, np.ndarray], tol: float = 0.0
    ) -> bool:
        for name, value in params.items():
            proj = self.bounds.get(name, ParamBound()).project(
                np.asarray(value, dtype=np.float64)
            )
            if np.abs(proj - value).max(initial=0.0) > tol:
                return False
        return True


def project(paramset: ParamSet, params: Mapping[str, np.ndarray]) -> dict:
    return paramset.project(params)


@dataclass(frozen=True)
class CocpTemplate:
    """Parametrized map (state, params) -> QP data, with an input extractor.

    ``build(graph, state_node, param_nodes)`` returns :class:`QpNodes`; the
    QP shape must not depend on the state. ``input_slice`` selects the
    control input inside the QP variable vector.
    """

    param_specs: tuple[ParamSpec, ...]
    build: Callable[[Graph, Node, dict[str, Node]], QpNodes]
    input_slice: tuple[int, int]
    name: str = "cocp"

    def check_params(self, params: Mapping[str, np.ndarray]) -> None:
        for spec in self.param_specs:
            if spec.name not in params:
                raise KeyError(f"missing parameter {spec.name!r}")
            got = np.asarray(params[spec.name]).shape
            if got != spec.shape:
                raise ValueError(
                    f"parameter {spec.name!r} has shape {got}, expected {spec.shape}"
                )
        extra = set(params) - {s.name for s in self.param_specs}
        if extra:
            raise KeyError(f"unexpected parameters {sorted(extra)}")


def _as_param_nodes(
    graph: Graph,
    template: CocpTemplate,
    params: Mapping[str, np.ndarray | Node] | Sequence,
) -> dict[str, Node]:
    if not isinstance(params, Mapping):
        params = {
            spec.name: value for spec, value in zip(template.param_specs, params)
        }
    nodes = {}
    for spec in template.param_specs:
        value = params[spec.name]
        nodes[spec.name] = (
            value if isinstance(value, Node) else graph.param(np.asarray(value, float))
        )
    return nodes


def evaluate(
    template: CocpTemplate,
    state,
    params,
    graph: Graph | None = None,
    *,
    tol_solve: float = 1e-9,
    max_iters: int = 100,
) -> Node:
    """Evaluate the policy: build the QP on the tape, solve, slice the input.

    ``state`` and the parameter values may be arrays (recorded as leaves) or
    nodes already living on ``graph``.
    """
    if graph is None:
        graph = Graph()
    state_node = state if isinstance(state, Node) else graph.constant(
        np.asarray(state, dtype=np.float64)
    )
    param_nodes = _as_param_nodes(graph, template, params)
    data = template.build(graph, state_node, param_nodes)
    xstar = qp_node(
        graph,
        data.P,
        data.q,
        data.A,
        data.b,
        data.G,
        data.h,
        tol_solve=tol_solve,
        max_iters=max_iters,
    )
    lo, hi = template.input_slice
    if lo == 0 and hi == xstar.value.shape[0]:
        return xstar
    return graph.slice(xstar, lo, hi)
