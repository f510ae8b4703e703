"""Benchmark environments with convex-program policies."""

from .base import (
    TOL_FEAS,
    ConstraintViolation,
    Environment,
    PolicyEvaluationError,
    RolloutResult,
    rollout,
)
from .lqr import box_lqr_env, lqr_env, lqr_gain, random_linear_system
from .markowitz import MarkowitzConfig, load_return_model, markowitz_env
from .riccati import RiccatiBaseline, RiccatiError, riccati, steady_state_covariance
from .supply_chain import SupplyChainConfig, supply_chain_env
from .vehicle import vehicle_env

__all__ = [
    "TOL_FEAS",
    "ConstraintViolation",
    "Environment",
    "PolicyEvaluationError",
    "RolloutResult",
    "rollout",
    "lqr_env",
    "box_lqr_env",
    "lqr_gain",
    "random_linear_system",
    "markowitz_env",
    "MarkowitzConfig",
    "load_return_model",
    "vehicle_env",
    "supply_chain_env",
    "SupplyChainConfig",
    "riccati",
    "RiccatiBaseline",
    "RiccatiError",
    "steady_state_covariance",
    "make_env",
    "ENV_NAMES",
]

ENV_NAMES = ("lqr", "box_lqr", "markowitz", "vehicle", "supply_chain")


def make_env(name: str, seed: int, params: dict | None = None) -> Environment:
    """Construct a benchmark environment by name with keyword overrides."""
    params = dict(params or {})
    if name == "lqr":
        return lqr_env(seed, **params)
    if name == "box_lqr":
        return box_lqr_env(seed, **params)
    if name == "markowitz":
        params.setdefault("calibration_seed", seed)
        return markowitz_env(MarkowitzConfig(**params))
    if name == "vehicle":
        return vehicle_env(seed, **params)
    if name == "supply_chain":
        return supply_chain_env(SupplyChainConfig(**params))
    raise ValueError(f"unknown environment {name!r}; pick one of {ENV_NAMES}")
