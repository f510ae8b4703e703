"""Path-tracking vehicle benchmark: kinematic bicycle in path coordinates.

State x = (e, dpsi, v, v_des, kappa): lateral deviation from the path,
heading deviation, speed, desired speed, and current path curvature. Input
u = (a, z) with acceleration a and steering variable z = tan(delta) - L
kappa. Discretized at h = 0.2 s, the dynamics are

    e'     = e + h v sin(dpsi) + w1
    dpsi'  = dpsi + h v (kappa + z/L - kappa cos(dpsi) / (1 - e kappa)) + w2
    v'     = v + h a + w3
    v_des' = v_des w4 + w5 (1 - w4),   w4 ~ Bernoulli(0.98), w5 ~ U(3, 6)
    kappa' = kappa w6 + w7 (1 - w6),   w6 ~ Bernoulli(0.95), w7 ~ N(0, 0.01)

with w1 ~ N(0, 0.01), w2 ~ N(0, 0.0001), w3 ~ N(0, 0.01). The stage cost
penalizes speed error, tracking error, and control effort,

    (v - v_des)^2 + l1 e^2 + l2 dpsi^2 + l3 |a| + l4 z^2,

subject to |a| <= a_max and the wheel-angle limit |z + L kappa| <=
tan(delta_max), both enforced by the policy QP.

The policy predicts a lookahead vector y = (e', dpsi', v' - E[v_des'], e'')
as affine equality constraints (the apparent sin(dpsi' - h v z / L)
nonlinearity cancels: its argument does not depend on z), and minimizes
l3 |a| + l4 z^2 + |S y|^2 + q'y with tunable (S, q). |a| is lowered with one
epigraph variable.

Disturbance draws per step, in order: 4 standard normals (for w1, w2, w3,
w7), then 3 uniforms (w4 threshold, w5, w6 threshold). All draws are
consumed every step regardless of the Bernoulli outcomes so stream
alignment never depends on the sample path.
"""

from __future__ import annotations

import numpy as np

from ..policy import CocpTemplate, ParamBound, ParamSet, ParamSpec, QpNodes
from ..streams import RolloutStream
from .base import TOL_FEAS, ConstraintViolation, Environment

__all__ = ["vehicle_env"]

_H = 0.2
_L = 2.8
_LAMBDA = (1.0, 1.0, 10.0, 10.0)
_A_MAX = 2.0
_DELTA_MAX = 0.6
_X0 = np.array([0.5, 0.1, 3.0, 4.5, 0.0])
_VDES_KEEP = 0.98
_VDES_MEAN = 4.5  # mean of U(3, 6)


def _lookahead_template() -> CocpTemplate:
    # variables: (a, z, t_a, y1, y2, y3, y4); input is (a, z)
    n_var = 7
    tan_max = np.tan(_DELTA_MAX)
    l3, l4 = _LAMBDA[2], _LAMBDA[3]

    E_y = np.zeros((4, n_var))
    E_y[:, 3:] = np.eye(4)
    E_yT = E_y.T.copy()

    P0 = np.zeros((n_var, n_var))
    P0[1, 1] = 2.0 * l4
    q0 = np.zeros(n_var)
    q0[2] = l3

    A0 = np.zeros((4, n_var))
    A0[0, 3] = 1.0
    A0[1, 4] = 1.0
    A0[2, 5] = 1.0
    A0[2, 0] = -_H
    A0[3, 6] = 1.0
    A0[3, 3] = -1.0
    # state-dependent coefficients on z in rows 1 and 3
    E_vz = np.zeros((4, n_var))
    E_vz[1, 1] = 1.0
    E_v2z = np.zeros((4, n_var))
    E_v2z[3, 1] = 1.0

    G0 = np.zeros((6, n_var))
    G0[0, 0] = 1.0  # a <= a_max
    G0[1, 0] = -1.0  # -a <= a_max
    G0[2, 0] = 1.0  # a - t_a <= 0
    G0[2, 2] = -1.0
    G0[3, 0] = -1.0  # -a - t_a <= 0
    G0[3, 2] = -1.0
    G0[4, 1] = 1.0  # z <= tan_max - L kappa
    G0[5, 1] = -1.0  # -z <= tan_max + L kappa
    h_amax = np.array([_A_MAX, _A_MAX, 0.0, 0.0])
    tan_vec = np.array([tan_max])

    def build(g, x, p):
        S, qp = p["S"], p["q"]
        e = g.slice(x, 0, 1)
        dpsi = g.slice(x, 1, 2)
        v = g.slice(x, 2, 3)
        vdes = g.slice(x, 3, 4)
        kap = g.slice(x, 4, 5)

        StS2 = g.scale(2.0, g.matmul(g.transpose(S), S))
        P = g.add(g.constant(P0), g.matmul(g.matmul(g.constant(E_yT), StS2), g.constant(E_y)))
        q = g.add(g.constant(q0), g.matvec(g.constant(E_yT), qp))

        coef_vz = g.scale(-_H / _L, v)
        coef_v2z = g.scale(-(_H * _H) / _L, g.square(v))
        A = g.add(
            g.constant(A0),
            g.add(g.mul(coef_vz, g.constant(E_vz)), g.mul(coef_v2z, g.constant(E_v2z))),
        )

        one = g.constant(_ONE)
        sin_dpsi = g.sin(dpsi)
        cos_fac = g.div(g.mul(kap, g.cos(dpsi)), g.sub(one, g.mul(e, kap)))
        b1 = g.add(e, g.scale(_H, g.mul(v, sin_dpsi)))
        c2 = g.add(dpsi, g.scale(_H, g.mul(v, g.sub(kap, cos_fac))))
        b3 = g.add(
            g.sub(v, g.scale(_VDES_KEEP, vdes)),
            g.constant(_B3_SHIFT),
        )
        b4 = g.scale(_H, g.mul(v, g.sin(c2)))
        b = g.concat([b1, c2, b3, b4])

        lk = g.scale(_L, kap)
        h = g.concat(
            [
                g.constant(h_amax),
                g.sub(g.constant(tan_vec), lk),
                g.add(g.constant(tan_vec), lk),
            ]
        )
        return QpNodes(P=P, q=q, A=A, b=b, G=g.constant(G0), h=h)

    return CocpTemplate(
        param_specs=(ParamSpec("S", (4, 4)), ParamSpec("q", (4,))),
        build=build,
        input_slice=(0, 2),
        name="vehicle",
    )


_ONE = np.ones(1)
_B3_SHIFT = np.array([-(1.0 - _VDES_KEEP) * _VDES_MEAN])


def vehicle_env(seed: int = 0, horizon: int = 100) -> Environment:
    """Stochastic path-tracking benchmark; S0 = I, q0 = 0, fixed x0."""
    template = _lookahead_template()
    tan_max = np.tan(_DELTA_MAX)
    l1, l2, l3, l4 = _LAMBDA

    def sample_initial(stream: RolloutStream) -> np.ndarray:
        return _X0.copy()

    def sample_disturbance(stream: RolloutStream, t: int) -> np.ndarray:
        rng = stream.step_rng(t)
        z = rng.standard_normal(4)
        u = rng.random(3)
        w1 = 0.1 * z[0]
        w2 = 0.01 * z[1]
        w3 = 0.1 * z[2]
        w7 = 0.1 * z[3]
        w4 = 1.0 if u[0] < _VDES_KEEP else 0.0
        w5 = 3.0 + 3.0 * u[1]
        w6 = 1.0 if u[2] < 0.95 else 0.0
        return np.array([w1, w2, w3, w4, w5, w6, w7])

    def dynamics(g, x, u, w, t):
        e = g.slice(x, 0, 1)
        dpsi = g.slice(x, 1, 2)
        v = g.slice(x, 2, 3)
        vdes = g.slice(x, 3, 4)
        kap = g.slice(x, 4, 5)
        a = g.slice(u, 0, 1)
        z = g.slice(u, 1, 2)
        one = g.constant(_ONE)

        e_next = g.add(
            g.add(e, g.scale(_H, g.mul(v, g.sin(dpsi)))),
            g.constant(np.array([w[0]])),
        )
        cos_fac = g.div(g.mul(kap, g.cos(dpsi)), g.sub(one, g.mul(e, kap)))
        turn = g.sub(g.add(kap, g.scale(1.0 / _L, z)), cos_fac)
        dpsi_next = g.add(
            g.add(dpsi, g.scale(_H, g.mul(v, turn))),
            g.constant(np.array([w[1]])),
        )
        v_next = g.add(g.add(v, g.scale(_H, a)), g.constant(np.array([w[2]])))
        vdes_next = g.add(
            g.scale(w[3], vdes), g.constant(np.array([(1.0 - w[3]) * w[4]]))
        )
        kap_next = g.add(
            g.scale(w[5], kap), g.constant(np.array([(1.0 - w[5]) * w[6]]))
        )
        return g.concat([e_next, dpsi_next, v_next, vdes_next, kap_next])

    def stage_cost(g, x, u, w, t):
        e = g.slice(x, 0, 1)
        dpsi = g.slice(x, 1, 2)
        v = g.slice(x, 2, 3)
        vdes = g.slice(x, 3, 4)
        a = g.slice(u, 0, 1)
        z = g.slice(u, 1, 2)
        speed_err = g.sum(g.square(g.sub(v, vdes)))
        track = g.add(
            g.scale(l1, g.sum(g.square(e))), g.scale(l2, g.sum(g.square(dpsi)))
        )
        effort = g.add(
            g.scale(l3, g.sum(g.abs(a))), g.scale(l4, g.sum(g.square(z)))
        )
        return g.add(g.add(speed_err, track), effort)

    def check_step(x_val, u_val, w, t):
        a_val, z_val = u_val
        if abs(a_val) > _A_MAX + TOL_FEAS:
            raise ConstraintViolation(f"|a| = {abs(a_val):.3e} exceeds {_A_MAX}", t)
        wheel = abs(z_val + _L * x_val[4])
        if wheel > tan_max + TOL_FEAS:
            raise ConstraintViolation(
                f"|z + L kappa| = {wheel:.3e} exceeds tan(delta_max)", t
            )

    return Environment(
        name="vehicle",
        state_dim=5,
        input_dim=2,
        horizon=horizon,
        policy_steps=horizon + 1,
        dynamics_steps=horizon,
        cost_scale=1.0 / (horizon + 1),
        template=template,
        paramset=ParamSet({"S": ParamBound("free"), "q": ParamBound("free")}),
        init_params={"S": np.eye(4), "q": np.zeros(4)},
        sample_initial=sample_initial,
        sample_disturbance=sample_disturbance,
        dynamics=dynamics,
        stage_cost=stage_cost,
        check_step=check_step,
        state_labels=("e", "dpsi", "v", "v_des", "kappa"),
        input_labels=("a", "z"),
        info={
            "wheelbase": _L,
            "step_seconds": _H,
            "a_max": _A_MAX,
            "delta_max": _DELTA_MAX,
            "lambdas": _LAMBDA,
        },
    )
