"""Tuning convex optimization control policies through closed-loop simulation.

A control policy that computes its action by solving a parametrized convex
quadratic program is differentiable almost everywhere in its parameters.
This package simulates such policies in closed loop on a small reverse-mode
tape, differentiates the QP solution map implicitly through its KKT
conditions, and improves the parameters with projected stochastic gradient
descent. Five benchmark control problems ship as reproducible experiments,
driven by the ``cocp`` command line tool.
"""

from .policy import CocpTemplate, ParamBound, ParamSet, ParamSpec, QpNodes, evaluate, project
from .qp_diff import QpGradients, jvp, qp_node, vjp
from .qp_solver import QpData, QpSolution, solve, validate
from .tape import Graph, Node, as_tensor
from .tuner import IterRecord, StepSchedule, TuneConfig, TuneResult, clip, estimate_cost, estimate_gradient, tune

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Node",
    "as_tensor",
    "QpData",
    "QpSolution",
    "solve",
    "validate",
    "QpGradients",
    "vjp",
    "jvp",
    "qp_node",
    "CocpTemplate",
    "ParamSpec",
    "ParamBound",
    "ParamSet",
    "QpNodes",
    "evaluate",
    "project",
    "StepSchedule",
    "TuneConfig",
    "IterRecord",
    "TuneResult",
    "estimate_cost",
    "estimate_gradient",
    "clip",
    "tune",
    "__version__",
]
