"""Single-period-rebalanced portfolio benchmark with trading frictions.

State: portfolio weights w (sum to one). Input: trade vector z. Monthly
total returns r are IID log-normal; holdings evolve as

    w' = r o (w + z) / r'(w + z)

Trades pay proportional transaction costs kappa'|z| and stock-loan costs
nu'(w + z)_- and must be self-financing:

    1'z + kappa'|z| + nu'(w + z)_- <= 0.

The stage cost is the negative utility -U(r'(w + z)) with the concave,
downside-averse utility U(r) = min(2(r - 1), r - 1). The policy trades to
maximize mu'w+ - gamma |S w+|^2 subject to self-financing, with tunable
(mu, gamma, S); absolute values and negative parts are lowered to QP form
with epigraph variables t >= +/-z and s >= 0, s >= -w+.

Returns come from a documented synthetic log-normal model bundled with the
package; mu and S are initialized from the empirical mean and covariance
square root of a dedicated calibration sample, gamma from config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..policy import CocpTemplate, ParamBound, ParamSet, ParamSpec, QpNodes
from ..qp_solver import OPTIMAL, QpData, QpError, solve
from ..streams import RolloutStream, instance_rng
from .base import TOL_FEAS, ConstraintViolation, Environment

__all__ = ["MarkowitzConfig", "markowitz_env", "load_return_model"]

_UNIT_RETURN = np.ones(())


def load_return_model(path=None):
    """Bundled synthetic monthly log-return parameters (mu_log, cov_log, labels)."""
    if path is None:
        text = (
            resources.files("cocp.data").joinpath("markowitz_returns.json").read_text()
        )
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    return (
        np.asarray(raw["mu_log_monthly"], dtype=np.float64),
        np.asarray(raw["cov_log_monthly"], dtype=np.float64),
        tuple(raw["labels"]),
    )


@dataclass(frozen=True)
class MarkowitzConfig:
    horizon: int = 24
    kappa: float = 0.001
    nu: float = 0.001
    gamma0: float = 15.0
    calibration_seed: int = 0
    calibration_draws: int = 500
    returns_file: str | None = None


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def _initial_portfolio(mu, gamma, S, nu_vec) -> np.ndarray:
    """Solve  max mu'w - gamma |S w|^2 - nu'(w)_-  s.t. 1'w = 1.

    Lowered to a QP over (w, s) with s >= 0, s >= -w.
    """
    n = mu.shape[0]
    P = np.zeros((2 * n, 2 * n))
    P[:n, :n] = 2.0 * gamma * (S.T @ S)
    q = np.concatenate([-mu, nu_vec])
    A = np.concatenate([np.ones(n), np.zeros(n)])[None, :]
    b = np.array([1.0])
    G = np.zeros((2 * n, 2 * n))
    G[:n, n:] = -np.eye(n)  # s >= 0
    G[n:, :n] = -np.eye(n)  # s >= -w
    G[n:, n:] = -np.eye(n)
    h = np.zeros(2 * n)
    sol = solve(QpData(P=P, q=q, A=A, b=b, G=G, h=h))
    if sol.status != OPTIMAL:
        raise QpError(f"initial portfolio solve failed: {sol.status}")
    return sol.x[:n]


def _trade_template(n: int, kappa_vec, nu_vec) -> CocpTemplate:
    """QP over (z, w+[, t][, s]): epigraph blocks appear only when priced."""
    has_t = bool(np.any(kappa_vec > 0.0))
    has_s = bool(np.any(nu_vec > 0.0))
    blocks = 2 + has_t + has_s
    n_var = blocks * n
    off_w = n
    off_t = 2 * n if has_t else None
    off_s = (2 + has_t) * n if has_s else None

    # selector embedding the w+ block into the full variable vector
    E_w = np.zeros((n, n_var))
    E_w[:, off_w : off_w + n] = np.eye(n)
    E_wT = E_w.T.copy()

    # equalities: w+ - z = w
    A = np.zeros((n, n_var))
    A[:, :n] = -np.eye(n)
    A[:, off_w : off_w + n] = np.eye(n)

    # inequalities: budget row, then epigraph rows
    rows = [np.concatenate([np.ones(n), np.zeros(n_var - n)])]
    if has_t:
        rows[0][off_t : off_t + n] = kappa_vec
    if has_s:
        rows[0][off_s : off_s + n] = nu_vec
    G_rows = [rows[0][None, :]]
    if has_t:
        Gt = np.zeros((2 * n, n_var))
        Gt[:n, :n] = np.eye(n)  # z - t <= 0
        Gt[:n, off_t : off_t + n] = -np.eye(n)
        Gt[n:, :n] = -np.eye(n)  # -z - t <= 0
        Gt[n:, off_t : off_t + n] = -np.eye(n)
        G_rows.append(Gt)
    if has_s:
        Gs = np.zeros((2 * n, n_var))
        Gs[:n, off_s : off_s + n] = -np.eye(n)  # s >= 0
        Gs[n:, off_w : off_w + n] = -np.eye(n)  # s >= -w+
        Gs[n:, off_s : off_s + n] = -np.eye(n)
        G_rows.append(Gs)
    G = np.vstack(G_rows)
    h = np.zeros(G.shape[0])
    q_pad = np.zeros(n_var - n)  # epigraph blocks carry no objective terms

    def build(g, x, p):
        mu, gamma, S = p["mu"], p["gamma"], p["S"]
        StS = g.matmul(g.transpose(S), S)
        Pw = g.scale(2.0, g.mul(gamma, StS))
        P_full = g.matmul(g.matmul(g.constant(E_wT), Pw), g.constant(E_w))
        q_full = g.concat([g.neg(mu), g.constant(q_pad)])
        return QpNodes(
            P=P_full,
            q=q_full,
            A=g.constant(A),
            b=x,
            G=g.constant(G),
            h=g.constant(h),
        )

    return CocpTemplate(
        param_specs=(
            ParamSpec("mu", (n,)),
            ParamSpec("gamma", (1,)),
            ParamSpec("S", (n, n)),
        ),
        build=build,
        input_slice=(0, n),
        name="markowitz",
    )


def markowitz_env(config: MarkowitzConfig = MarkowitzConfig()) -> Environment:
    mu_log, cov_log, labels = load_return_model(config.returns_file)
    n = mu_log.shape[0]
    eigs = np.linalg.eigvalsh(0.5 * (cov_log + cov_log.T))
    if eigs.min() < -1e-10:
        raise ValueError(f"return covariance is not PSD (min eig {eigs.min():.2e})")
    chol = np.linalg.cholesky(cov_log + 1e-12 * np.eye(n))
    kappa_vec = np.full(n, float(config.kappa))
    nu_vec = np.full(n, float(config.nu))

    # empirical moments of a dedicated calibration sample initialize mu and S
    cal = instance_rng(config.calibration_seed, tag=1)
    draws = np.exp(mu_log + cal.standard_normal((config.calibration_draws, n)) @ chol.T)
    mu_mark = draws.mean(axis=0)
    sigma_mark = np.cov(draws, rowvar=False)
    S0 = _psd_sqrt(sigma_mark)
    gamma0 = float(config.gamma0)
    w0 = _initial_portfolio(mu_mark, gamma0, S0, nu_vec)

    template = _trade_template(n, kappa_vec, nu_vec)
    T = config.horizon
    one = np.ones(n)

    def sample_initial(stream: RolloutStream) -> np.ndarray:
        return w0.copy()

    def sample_disturbance(stream: RolloutStream, t: int) -> np.ndarray:
        return np.exp(mu_log + chol @ stream.step_rng(t).standard_normal(n))

    def dynamics(g, x, u, w_ret, t):
        wplus = g.add(x, u)
        r = g.constant(w_ret)
        gross = g.dot(r, wplus)
        return g.div(g.mul(r, wplus), gross)

    def stage_cost(g, x, u, w_ret, t):
        wplus = g.add(x, u)
        realized = g.dot(g.constant(w_ret), wplus)
        excess = g.sub(realized, g.constant(_UNIT_RETURN))
        utility = g.min2(g.scale(2.0, excess), excess)
        return g.neg(utility)

    def check_step(x_val, u_val, w_ret, t):
        drift = abs(float(x_val.sum()) - 1.0)
        if drift > 1e-9:
            raise ConstraintViolation(f"1'w = 1 violated by {drift:.2e}", t)
        wplus = x_val + u_val
        budget = (
            float(u_val.sum())
            + float(kappa_vec @ np.abs(u_val))
            + float(nu_vec @ np.maximum(-wplus, 0.0))
        )
        if budget > TOL_FEAS:
            raise ConstraintViolation(f"self-financing violated by {budget:.2e}", t)

    return Environment(
        name="markowitz",
        state_dim=n,
        input_dim=n,
        horizon=T,
        policy_steps=T + 1,
        dynamics_steps=T,
        cost_scale=1.0 / (T + 1),
        template=template,
        paramset=ParamSet(
            {
                "mu": ParamBound("free"),
                "gamma": ParamBound("nonnegative"),
                "S": ParamBound("free"),
            }
        ),
        init_params={"mu": mu_mark, "gamma": np.array([gamma0]), "S": S0},
        sample_initial=sample_initial,
        sample_disturbance=sample_disturbance,
        dynamics=dynamics,
        stage_cost=stage_cost,
        check_step=check_step,
        state_labels=tuple(f"w_{lab}" for lab in labels),
        input_labels=tuple(f"z_{lab}" for lab in labels),
        info={
            "kappa": kappa_vec,
            "nu": nu_vec,
            "gamma0": gamma0,
            "mu_mark": mu_mark,
            "sigma_mark": sigma_mark,
            "w0": w0,
            "mu_log": mu_log,
            "cov_log": cov_log,
        },
    )

