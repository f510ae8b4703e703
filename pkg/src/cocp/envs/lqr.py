"""Linear-quadratic regulator benchmarks, unconstrained and input-limited.

Dynamics: x' = Ax + Bu + w with standard-normal system matrices, A rescaled
to unit spectral radius, Gaussian process noise, and quadratic stage cost
x'Qx + u'Ru averaged over the horizon. The policy minimizes
u'Ru + |theta (Ax + Bu)|^2, optionally subject to the box |u|_inf <= u_max.
With theta'theta equal to the Riccati value matrix, the unconstrained
policy is the exact infinite-horizon optimum, which gives this benchmark a
computable optimality baseline.
"""

from __future__ import annotations

import numpy as np

from ..policy import CocpTemplate, ParamBound, ParamSet, ParamSpec, QpNodes
from ..streams import RolloutStream, instance_rng
from .base import TOL_FEAS, ConstraintViolation, Environment
from .riccati import riccati, steady_state_covariance

__all__ = ["lqr_env", "box_lqr_env", "random_linear_system", "lqr_gain"]


def random_linear_system(seed: int, n: int, m: int):
    """Standard-normal (A, B) with A scaled to spectral radius one."""
    rng = instance_rng(seed, tag=0)
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    radius = np.abs(np.linalg.eigvals(A)).max()
    A = A / radius
    return A, B


def lqr_gain(A, B, R, theta) -> np.ndarray:
    """Closed form of the policy: u = -(R + B'M B)^-1 B'M A x, M = theta'theta."""
    M = theta.T @ theta
    return -np.linalg.solve(R + B.T @ M @ B, B.T @ M @ A)


def _regulator_template(A, B, R, u_max: float | None) -> CocpTemplate:
    n, m = B.shape
    c_A = A
    c_B = B
    c_Bt = B.T.copy()
    c_R2 = 2.0 * R
    box = None
    if u_max is not None and np.isfinite(u_max):
        box_G = np.vstack([np.eye(m), -np.eye(m)])
        box_h = np.full(2 * m, float(u_max))
        box = (box_G, box_h)

    def build(g, x, p):
        theta = p["theta"]
        M = g.matmul(g.transpose(theta), theta)
        BtM = g.matmul(g.constant(c_Bt), M)
        P = g.add(g.constant(c_R2), g.scale(2.0, g.matmul(BtM, g.constant(c_B))))
        q = g.scale(2.0, g.matvec(g.matmul(BtM, g.constant(c_A)), x))
        if box is None:
            return QpNodes(P=P, q=q)
        return QpNodes(P=P, q=q, G=g.constant(box[0]), h=g.constant(box[1]))

    return CocpTemplate(
        param_specs=(ParamSpec("theta", (n, n)),),
        build=build,
        input_slice=(0, m),
        name="regulator",
    )


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def _make_regulator_env(
    name: str,
    seed: int,
    n: int,
    m: int,
    horizon: int,
    noise_std: float,
    u_max: float | None,
    theta0: str,
    stationary_init: bool,
) -> Environment:
    A, B = random_linear_system(seed, n, m)
    Q = np.eye(n)
    R = np.eye(m)
    sigma = (noise_std**2) * np.eye(n)
    baseline = riccati(A, B, Q, R, sigma)
    if theta0 == "identity":
        init_theta = np.eye(n)
    else:  # value-matrix square root
        init_theta = _sqrtm_psd(baseline.P)

    init_chol = None
    if stationary_init:
        # start rollouts in the stationary state distribution of the
        # Riccati-optimal closed loop, so the finite-horizon average cost of
        # the optimal policy equals trace(P Sigma) exactly
        cov = steady_state_covariance(A + B @ baseline.K, sigma)
        init_chol = np.linalg.cholesky(cov + 1e-12 * np.eye(n))

    template = _regulator_template(A, B, R, u_max)

    def sample_initial(stream: RolloutStream) -> np.ndarray:
        if init_chol is None:
            return np.zeros(n)
        return init_chol @ stream.initial_rng().standard_normal(n)

    def sample_disturbance(stream: RolloutStream, t: int) -> np.ndarray:
        return noise_std * stream.step_rng(t).standard_normal(n)

    def dynamics(g, x, u, w, t):
        drift = g.add(g.matvec(g.constant(A), x), g.matvec(g.constant(B), u))
        return g.add(drift, g.constant(w))

    def stage_cost(g, x, u, w, t):
        xQx = g.dot(x, g.matvec(g.constant(Q), x))
        uRu = g.dot(u, g.matvec(g.constant(R), u))
        return g.add(xQx, uRu)

    check_step = None
    if u_max is not None and np.isfinite(u_max):

        def check_step(x_val, u_val, w, t):
            worst = np.abs(u_val).max()
            if worst > u_max + TOL_FEAS:
                raise ConstraintViolation(
                    f"|u|_inf = {worst:.3e} exceeds u_max = {u_max}", t
                )

    return Environment(
        name=name,
        state_dim=n,
        input_dim=m,
        horizon=horizon,
        policy_steps=horizon + 1,
        dynamics_steps=horizon,
        cost_scale=1.0 / (horizon + 1),
        template=template,
        paramset=ParamSet({"theta": ParamBound("free")}),
        init_params={"theta": init_theta},
        sample_initial=sample_initial,
        sample_disturbance=sample_disturbance,
        dynamics=dynamics,
        stage_cost=stage_cost,
        check_step=check_step,
        state_labels=tuple(f"x{i + 1}" for i in range(n)),
        input_labels=tuple(f"u{i + 1}" for i in range(m)),
        info={
            "A": A,
            "B": B,
            "Q": Q,
            "R": R,
            "sigma": sigma,
            "noise_std": noise_std,
            "u_max": u_max,
            "riccati": baseline,
        },
    )


def lqr_env(
    seed: int,
    n: int = 4,
    m: int = 2,
    horizon: int = 100,
    noise_std: float = 0.5,
) -> Environment:
    """Unconstrained regulator: n=4, m=2, T=100 by default, theta0 = I."""
    return _make_regulator_env(
        "lqr", seed, n, m, horizon, noise_std, None, "identity", True
    )


def box_lqr_env(
    seed: int,
    n: int = 8,
    m: int = 2,
    horizon: int = 100,
    noise_std: float = 0.5,
    u_max: float = 0.1,
) -> Environment:
    """Input-limited regulator: adds |u|_inf <= u_max; theta0 = P^(1/2).

    Starts at x0 = 0 (with a hard input limit and unit spectral radius there
    is no policy-independent stationary distribution to sample from).
    ``u_max = inf`` reduces exactly to the unconstrained template.
    """
    return _make_regulator_env(
        "box_lqr", seed, n, m, horizon, noise_std, u_max, "value_sqrt", False
    )
