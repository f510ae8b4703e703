import numpy as np
import pytest

from cocp.envs import (
    ConstraintViolation,
    box_lqr_env,
    lqr_env,
    make_env,
    riccati,
    rollout,
    steady_state_covariance,
    supply_chain_env,
    vehicle_env,
)
from cocp.envs.lqr import lqr_gain
from cocp.envs.riccati import RiccatiError
from cocp.streams import RolloutStream
from cocp.tape import Graph


# ---------------------------------------------------------------- riccati


def test_riccati_zero_dynamics_fixed_point():
    Q = np.diag([1.0, 2.0])
    sigma = 0.25 * np.eye(2)
    base = riccati(np.zeros((2, 2)), np.eye(2), Q, np.eye(2), sigma)
    np.testing.assert_allclose(base.P, Q, atol=1e-10)
    np.testing.assert_allclose(base.K, np.zeros((2, 2)), atol=1e-10)
    assert base.j_opt == pytest.approx(np.trace(Q @ sigma), abs=1e-10)


def test_riccati_rejects_unstabilizable_pair():
    A = np.diag([1.0, 1.0])  # spectral radius 1, no control authority
    with pytest.raises(RiccatiError):
        riccati(A, np.zeros((2, 1)), np.eye(2), np.eye(1), np.eye(2))


def test_riccati_fixed_point_and_stable_closed_loop(rng):
    for _ in range(5):
        A = rng.standard_normal((4, 4))
        A /= np.abs(np.linalg.eigvals(A)).max()
        B = rng.standard_normal((4, 2))
        base = riccati(A, B, np.eye(4), np.eye(2), 0.25 * np.eye(4))
        P = base.P
        update = (
            np.eye(4) @ np.eye(4)
            + A.T @ P @ A
            - A.T @ P @ B @ np.linalg.solve(np.eye(2) + B.T @ P @ B, B.T @ P @ A)
        )
        assert np.abs(P - update).max() <= 1e-9
        assert np.abs(np.linalg.eigvals(A + B @ base.K)).max() < 1.0


def test_steady_state_covariance_fixed_point(rng):
    A = 0.5 * rng.standard_normal((3, 3))
    W = np.eye(3)
    S = steady_state_covariance(A, W)
    np.testing.assert_allclose(S, A @ S @ A.T + W, atol=1e-10)


# ---------------------------------------------------------------- lqr


def test_lqr_default_dimensions():
    env = lqr_env(seed=7)
    assert (env.state_dim, env.input_dim, env.horizon) == (4, 2, 100)
    assert np.abs(np.linalg.eigvals(env.info["A"])).max() == pytest.approx(1.0)
    np.testing.assert_array_equal(env.init_params["theta"], np.eye(4))


def test_lqr_dynamics_zero_fixed_point():
    env = lqr_env(seed=7, horizon=2)
    g = Graph()
    x = g.constant(np.zeros(4))
    u = g.constant(np.zeros(2))
    nxt = env.dynamics(g, x, u, np.zeros(4), 0)
    np.testing.assert_array_equal(nxt.value, np.zeros(4))


def test_lqr_riccati_parameters_achieve_optimal_cost():
    from cocp.tuner import estimate_cost

    env = lqr_env(seed=7)
    base = env.info["riccati"]
    theta_star = np.linalg.cholesky(base.P).T
    jhat, costs = estimate_cost(env, {"theta": theta_star}, seed=99, k_rollouts=100)
    stderr = costs.std(ddof=1) / np.sqrt(len(costs))
    assert abs(jhat - base.j_opt) <= 3.0 * stderr


def test_lqr_simulated_inputs_match_closed_form_gain():
    env = lqr_env(seed=7, horizon=20)
    theta = env.initial_parameters()
    res = rollout(env, theta, RolloutStream(3, 0))
    G = lqr_gain(env.info["A"], env.info["B"], env.info["R"], theta["theta"])
    for x, u in zip(res.states, res.inputs):
        assert np.abs(u.value - G @ x.value).max() <= 1e-7


def test_zero_horizon_rollout_is_single_stage_cost():
    env = lqr_env(seed=7, horizon=0)
    res = rollout(env, env.initial_parameters(), RolloutStream(0, 0))
    x0, u0 = res.states[0].value, res.inputs[0].value
    expected = x0 @ x0 + u0 @ u0
    assert res.cost == pytest.approx(expected, rel=1e-12)


def test_rollout_same_stream_identical():
    env = lqr_env(seed=7, horizon=10)
    params = env.initial_parameters()
    r1 = rollout(env, params, RolloutStream(5, 21))
    r2 = rollout(env, params, RolloutStream(5, 21))
    assert r1.cost == r2.cost
    for a, b in zip(r1.states, r2.states):
        assert a.value.tobytes() == b.value.tobytes()


# ---------------------------------------------------------------- box lqr


def test_box_lqr_respects_input_limit():
    env = box_lqr_env(seed=7, horizon=40)
    res = rollout(env, env.initial_parameters(), RolloutStream(2, 0))
    for u in res.inputs:
        assert np.abs(u.value).max() <= 0.1 + 1e-7


def test_box_lqr_infinite_limit_recovers_unconstrained_rollout():
    free = lqr_env(seed=13, n=8, m=2, horizon=10)
    boxed = box_lqr_env(seed=13, horizon=10, u_max=np.inf)
    params = boxed.initial_parameters()
    r_free = rollout(free, params, RolloutStream(1, 0))
    r_box = rollout(boxed, params, RolloutStream(1, 0))
    # same (A, B) by construction; x0 sampling differs, so compare policies
    for x in r_free.states[:5]:
        from cocp.policy import evaluate

        u1 = evaluate(free.template, x.value, params)
        u2 = evaluate(boxed.template, x.value, params)
        np.testing.assert_allclose(u1.value, u2.value, atol=1e-8)


def test_box_lqr_initialized_at_value_sqrt():
    env = box_lqr_env(seed=7)
    theta0 = env.init_params["theta"]
    np.testing.assert_allclose(
        theta0.T @ theta0, env.info["riccati"].P, atol=1e-8
    )


# ---------------------------------------------------------------- markowitz


def test_markowitz_config_defaults():
    env = make_env("markowitz", seed=1, params={})
    np.testing.assert_array_equal(env.info["kappa"], np.full(12, 0.001))
    np.testing.assert_array_equal(env.info["nu"], np.full(12, 0.001))
    assert env.info["gamma0"] == 15.0
    assert env.horizon == 24


def test_markowitz_unit_returns_preserve_normalization():
    env = make_env("markowitz", seed=1, params={"horizon": 2})
    g = Graph()
    w = g.constant(np.array([0.6, 0.3, 0.1] + [0.0] * 9))
    z = g.constant(np.zeros(12))
    nxt = env.dynamics(g, w, z, np.ones(12), 0)
    np.testing.assert_allclose(nxt.value, w.value, atol=1e-12)
    assert nxt.value.sum() == pytest.approx(1.0, abs=1e-12)


def test_markowitz_stage_cost_is_negative_utility():
    env = make_env("markowitz", seed=1, params={"horizon": 2})
    g = Graph()
    w = g.constant(np.full(12, 1.0 / 12))
    z = g.constant(np.zeros(12))
    r = np.full(12, 1.05)
    c = env.stage_cost(g, w, z, r, 0)
    # realized return 1.05 -> U = min(2*0.05, 0.05) = 0.05
    assert float(c.value) == pytest.approx(-0.05, abs=1e-12)
    r_down = np.full(12, 0.9)
    c2 = env.stage_cost(g, w, z, r_down, 0)
    assert float(c2.value) == pytest.approx(0.2, abs=1e-12)  # -min(-0.2, -0.1)


def test_markowitz_rollout_invariants():
    env = make_env("markowitz", seed=1, params={"horizon": 6})
    res = rollout(env, env.initial_parameters(), RolloutStream(3, 0))
    kappa, nu = env.info["kappa"], env.info["nu"]
    for x, u in zip(res.states, res.inputs):
        assert abs(x.value.sum() - 1.0) <= 1e-9
        wplus = x.value + u.value
        budget = (
            u.value.sum()
            + kappa @ np.abs(u.value)
            + nu @ np.maximum(-wplus, 0.0)
        )
        assert budget <= 1e-6


def test_markowitz_rejects_non_psd_covariance(tmp_path):
    import json

    bad = {
        "labels": ["a", "b"],
        "mu_log_monthly": [0.0, 0.0],
        "cov_log_monthly": [[1.0, 2.0], [2.0, 1.0]],  # indefinite
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        make_env("markowitz", seed=0, params={"returns_file": str(path)})


# ---------------------------------------------------------------- vehicle


def test_vehicle_wheel_angle_constraint_every_step():
    env = vehicle_env(seed=0, horizon=60)
    res = rollout(env, env.initial_parameters(), RolloutStream(9, 0))
    for x, u in zip(res.states, res.inputs):
        assert abs(u.value[1] + 2.8 * x.value[4]) <= np.tan(0.6) + 1e-7
        assert abs(u.value[0]) <= 2.0 + 1e-7


def test_vehicle_zero_speed_keeps_path_coordinates():
    env = vehicle_env(seed=0, horizon=2)
    g = Graph()
    x = g.constant(np.array([0.4, 0.2, 0.0, 4.5, 0.05]))
    u = g.constant(np.array([0.0, 0.3]))
    w = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])  # no noise, keep regimes
    nxt = env.dynamics(g, x, u, w, 0)
    assert nxt.value[0] == pytest.approx(0.4, abs=1e-12)  # e unchanged
    assert nxt.value[1] == pytest.approx(0.2, abs=1e-12)  # dpsi unchanged


def test_vehicle_lookahead_sine_argument_independent_of_steering():
    # dpsi_next - h v z / L must not depend on z
    env = vehicle_env(seed=0, horizon=2)
    x_val = np.array([0.3, 0.15, 3.5, 4.0, 0.08])
    w = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    h, L = 0.2, 2.8

    def arg_for(z_val):
        g = Graph()
        x = g.constant(x_val)
        u = g.constant(np.array([0.5, z_val]))
        nxt = env.dynamics(g, x, u, w, 0)
        return nxt.value[1] - h * x_val[2] * z_val / L

    assert abs(arg_for(0.17) - arg_for(-0.31)) <= 1e-12


def test_vehicle_initial_state_fixed():
    env = vehicle_env(seed=0)
    np.testing.assert_array_equal(
        env.sample_initial(RolloutStream(0, 0)), [0.5, 0.1, 3.0, 4.5, 0.0]
    )


# ---------------------------------------------------------------- supply chain


def test_supply_chain_zero_flow_keeps_storage():
    env = supply_chain_env()
    g = Graph()
    x = g.constant(np.array([1.0, 2.0, 0.5, 1.5, 1.0, 1.1, 1.0, 1.5]))
    u = g.constant(np.zeros(8))
    nxt = env.dynamics(g, x, u, np.ones(4), 0)
    np.testing.assert_array_equal(nxt.value[:4], [1.0, 2.0, 0.5, 1.5])


def test_supply_chain_price_and_demand_means():
    env = supply_chain_env()
    mu, sig = env.info["mu_log"], env.info["sigma_log"]
    exact = np.exp(mu + 0.5 * sig**2)
    np.testing.assert_array_equal(np.round(exact[:2], 2), [1.02, 1.13])
    np.testing.assert_array_equal(np.round(exact[2:], 2), [1.02, 1.52])
    draws = np.array(
        [env.sample_disturbance(RolloutStream(0, i), 0) for i in range(4000)]
    )
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert (np.abs(draws.mean(axis=0) - exact) <= 3.5 * stderr).all()


def test_supply_chain_storage_within_bounds_every_step():
    env = supply_chain_env()
    for rid in range(3):
        res = rollout(env, env.initial_parameters(), RolloutStream(4, rid))
        for x in res.states:
            h = x.value[:4]
            assert h.min() >= -1e-7 and h.max() <= 3.0 + 1e-7


def test_supply_chain_flow_constraints_every_step():
    env = supply_chain_env()
    a_out = env.info["a_out"]
    res = rollout(env, env.initial_parameters(), RolloutStream(6, 1))
    for x, u in zip(res.states, res.inputs):
        assert u.value.min() >= -1e-7 and u.value.max() <= 2.0 + 1e-7
        assert (a_out @ u.value - x.value[:4]).max() <= 1e-7
        assert (u.value[2:4] - x.value[6:8]).max() <= 1e-7


def test_supply_chain_cost_counts_first_t_steps_only():
    from cocp.envs import SupplyChainConfig

    env = supply_chain_env(SupplyChainConfig(horizon=5))
    assert env.policy_steps == 5
    assert env.dynamics_steps == 5
    assert env.cost_scale == pytest.approx(1.0 / 5)
    res = rollout(env, env.initial_parameters(), RolloutStream(1, 0))
    assert len(res.inputs) == 5
    assert len(res.states) == 6  # final storage state still recorded


# ---------------------------------------------------------------- shared


def test_constraint_violation_reports_step():
    env = vehicle_env(seed=0, horizon=2)

    def bad_check(x, u, w, t):
        raise ConstraintViolation("forced", t)

    env.check_step = bad_check
    with pytest.raises(ConstraintViolation) as err:
        rollout(env, env.initial_parameters(), RolloutStream(0, 0))
    assert err.value.step == 0


def test_cost_estimator_variance_scales_inversely_with_k():
    from cocp.tuner import estimate_cost

    env = lqr_env(seed=7, n=2, m=1, horizon=5)
    params = env.initial_parameters()
    ks = [1, 4, 16]
    reps = 60
    variances = []
    for k in ks:
        vals = []
        for rep in range(reps):
            jhat, _ = estimate_cost(
                env, params, seed=1000 + rep, k_rollouts=k, id_base=0
            )
            vals.append(jhat)
        variances.append(np.var(vals, ddof=1))
    slope = np.polyfit(np.log(ks), np.log(variances), 1)[0]
    assert -1.3 <= slope <= -0.7
