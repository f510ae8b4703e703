"""Single-good supply chain benchmark: buy, ship, store, and sell.

Four warehouses are linked to two suppliers, two consumers, and each other
by eight directed links. The input u = (b, s, z) stacks supplier purchases,
consumer sales, and internode shipments; storage evolves as

    h' = h + (A_in - A_out) u

where A_in / A_out are the link-node incidence matrices. Supplier prices p
and consumer demand d are IID log-normal; consumer prices r are fixed. The
stage cost is negative profit plus a quadratic storage cost,

    p'b - r's + tau'z + alpha'h + beta'h^2,

summed over the first T steps and divided by T (no input is applied at the
final time). Flows are limited by link capacities, storage by warehouse
capacities, outflow by goods on hand, and sales by demand; the policy QP
enforces all of them while maximizing immediate profit minus a tunable
quadratic value estimate |S h+|^2 + q'h+ of the post-move storage.

Network layout: supplier links enter warehouses 1 and 2 (warehouse 1 gets
the cheaper supplier); internode links run 1->3, 1->4, 2->3, 2->4; consumer
links leave warehouses 3 and 4 (warehouse 4 serves the higher-demand
consumer).

Disturbance draws per step, in order: 4 standard normals mapped through
exp(mu + sigma n) to (p', d'). The initial draw consumes 4 uniforms for
h0 ~ U(0, h_max) followed by 4 standard normals for (p0, d0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..policy import CocpTemplate, ParamBound, ParamSet, ParamSpec, QpNodes
from ..streams import RolloutStream
from .base import TOL_FEAS, ConstraintViolation, Environment

__all__ = ["SupplyChainConfig", "supply_chain_env"]

_N_NODES = 4
_N_LINKS = 8
_N_SUPPLY = 2
_N_CONSUME = 2


def _incidence():
    a_in = np.zeros((_N_NODES, _N_LINKS))
    a_out = np.zeros((_N_NODES, _N_LINKS))
    # supply links 0, 1 enter warehouses 1, 2
    a_in[0, 0] = 1.0
    a_in[1, 1] = 1.0
    # consumer links 2, 3 exit warehouses 3, 4
    a_out[2, 2] = 1.0
    a_out[3, 3] = 1.0
    # internode links 4..7: 1->3, 1->4, 2->3, 2->4
    for j, (src, dst) in enumerate([(0, 2), (0, 3), (1, 2), (1, 3)], start=4):
        a_out[src, j] = 1.0
        a_in[dst, j] = 1.0
    return a_in, a_out


@dataclass(frozen=True)
class SupplyChainConfig:
    horizon: int = 20
    mu_log: tuple = (0.0, 0.1, 0.0, 0.4)
    sigma_log: float = 0.2
    price_consumer: float = 1.4
    h_max: float = 3.0
    u_max: float = 2.0
    alpha: float = 0.01
    beta: float = 0.01
    tau: float = 0.05


def _flow_template(cfg: SupplyChainConfig, a_in, a_out, r_vec, tau_vec):
    n, m = _N_NODES, _N_LINKS
    n_var = m + n  # (u, h+)
    E_u = np.zeros((m, n_var))
    E_u[:, :m] = np.eye(m)
    E_uT = E_u.T.copy()
    E_h = np.zeros((n, n_var))
    E_h[:, m:] = np.eye(n)
    E_hT = E_h.T.copy()

    A = np.zeros((n, n_var))
    A[:, :m] = -(a_in - a_out)
    A[:, m:] = np.eye(n)

    # rows: -h+ <= 0, h+ <= h_max, -u <= 0, u <= u_max, A_out u <= h_t, s <= d_t
    G = np.vstack(
        [
            -E_h,
            E_h,
            -E_u,
            E_u,
            np.hstack([a_out, np.zeros((n, n))]),
            np.hstack(
                [
                    np.eye(m)[_N_SUPPLY : _N_SUPPLY + _N_CONSUME],
                    np.zeros((_N_CONSUME, n)),
                ]
            ),
        ]
    )
    h_const_top = np.concatenate(
        [np.zeros(n), np.full(n, cfg.h_max), np.zeros(m), np.full(m, cfg.u_max)]
    )
    minus_r_tau = np.concatenate([-r_vec, tau_vec])

    def build(g, x, p):
        S, qp = p["S"], p["q"]
        h_t = g.slice(x, 0, n)
        p_t = g.slice(x, n, n + _N_SUPPLY)
        d_t = g.slice(x, n + _N_SUPPLY, n + _N_SUPPLY + _N_CONSUME)

        StS2 = g.scale(2.0, g.matmul(g.transpose(S), S))
        P = g.matmul(g.matmul(g.constant(E_hT), StS2), g.constant(E_h))
        q_u = g.concat([p_t, g.constant(minus_r_tau)])
        q = g.add(g.matvec(g.constant(E_uT), q_u), g.matvec(g.constant(E_hT), qp))
        h_rhs = g.concat([g.constant(h_const_top), h_t, d_t])
        return QpNodes(
            P=P, q=q, A=g.constant(A), b=h_t, G=g.constant(G), h=h_rhs
        )

    return CocpTemplate(
        param_specs=(ParamSpec("S", (n, n)), ParamSpec("q", (n,))),
        build=build,
        input_slice=(0, m),
        name="supply_chain",
    )


def supply_chain_env(config: SupplyChainConfig = SupplyChainConfig()) -> Environment:
    cfg = config
    a_in, a_out = _incidence()
    mu_log = np.asarray(cfg.mu_log, dtype=np.float64)
    r_vec = np.full(_N_CONSUME, float(cfg.price_consumer))
    tau_vec = np.full(_N_LINKS - _N_SUPPLY - _N_CONSUME, float(cfg.tau))
    alpha_vec = np.full(_N_NODES, float(cfg.alpha))
    beta_vec = np.full(_N_NODES, float(cfg.beta))
    flow_mat = a_in - a_out
    template = _flow_template(cfg, a_in, a_out, r_vec, tau_vec)
    T = cfg.horizon
    n, m = _N_NODES, _N_LINKS

    def sample_initial(stream: RolloutStream) -> np.ndarray:
        rng = stream.initial_rng()
        h0 = cfg.h_max * rng.random(n)
        pd0 = np.exp(mu_log + cfg.sigma_log * rng.standard_normal(4))
        return np.concatenate([h0, pd0])

    def sample_disturbance(stream: RolloutStream, t: int) -> np.ndarray:
        rng = stream.step_rng(t)
        return np.exp(mu_log + cfg.sigma_log * rng.standard_normal(4))

    def dynamics(g, x, u, w, t):
        h_next = g.add(g.slice(x, 0, n), g.matvec(g.constant(flow_mat), u))
        return g.concat([h_next, g.constant(w)])

    def stage_cost(g, x, u, w, t):
        h_t = g.slice(x, 0, n)
        p_t = g.slice(x, n, n + _N_SUPPLY)
        buy = g.dot(p_t, g.slice(u, 0, _N_SUPPLY))
        sell = g.dot(
            g.constant(r_vec), g.slice(u, _N_SUPPLY, _N_SUPPLY + _N_CONSUME)
        )
        ship = g.dot(g.constant(tau_vec), g.slice(u, _N_SUPPLY + _N_CONSUME, m))
        store = g.add(
            g.dot(g.constant(alpha_vec), h_t),
            g.dot(g.constant(beta_vec), g.square(h_t)),
        )
        return g.add(g.add(g.sub(buy, sell), ship), store)

    def check_step(x_val, u_val, w, t):
        h_t = x_val[:n]
        d_t = x_val[n + _N_SUPPLY :]
        if h_t.min() < -TOL_FEAS or h_t.max() > cfg.h_max + TOL_FEAS:
            raise ConstraintViolation(f"storage outside [0, {cfg.h_max}]: {h_t}", t)
        if u_val.min() < -TOL_FEAS or u_val.max() > cfg.u_max + TOL_FEAS:
            raise ConstraintViolation(f"flow outside [0, {cfg.u_max}]: {u_val}", t)
        outflow = a_out @ u_val
        if (outflow - h_t).max() > TOL_FEAS:
            raise ConstraintViolation("outflow exceeds goods on hand", t)
        sales = u_val[_N_SUPPLY : _N_SUPPLY + _N_CONSUME]
        if (sales - d_t).max() > TOL_FEAS:
            raise ConstraintViolation("sales exceed demand", t)

    return Environment(
        name="supply_chain",
        state_dim=n + _N_SUPPLY + _N_CONSUME,
        input_dim=m,
        horizon=T,
        policy_steps=T,
        dynamics_steps=T,
        cost_scale=1.0 / T,
        template=template,
        paramset=ParamSet({"S": ParamBound("free"), "q": ParamBound("free")}),
        init_params={"S": np.eye(n), "q": np.full(n, -cfg.h_max)},
        sample_initial=sample_initial,
        sample_disturbance=sample_disturbance,
        dynamics=dynamics,
        stage_cost=stage_cost,
        check_step=check_step,
        state_labels=("h1", "h2", "h3", "h4", "p1", "p2", "d1", "d2"),
        input_labels=("b1", "b2", "s1", "s2", "z1", "z2", "z3", "z4"),
        info={
            "a_in": a_in,
            "a_out": a_out,
            "r": r_vec,
            "tau": tau_vec,
            "alpha": alpha_vec,
            "beta": beta_vec,
            "mu_log": mu_log,
            "sigma_log": cfg.sigma_log,
        },
    )
