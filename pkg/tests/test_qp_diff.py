import numpy as np
import pytest

from cocp.qp_diff import (
    EPS_STRICT_COMP,
    counters,
    jvp,
    kkt_matrix,
    least_squares_fallback,
    qp_node,
    reset_counters,
    strict_complementarity_margin,
    vjp,
)
from cocp.qp_solver import OPTIMAL, QpData, QpSolution, solve
from cocp.reference import fd_solution_gradients, random_feasible_qp
from cocp.tape import Graph


def _solved(qp, tol=1e-12):
    sol = solve(qp, tol_solve=tol, max_iters=200)
    assert sol.status == OPTIMAL
    return sol


def test_vjp_unconstrained_dq_is_negative_cotangent():
    qp = QpData(P=np.eye(2), q=np.array([0.3, -0.7]))
    grads = vjp(qp, _solved(qp), np.array([1.0, 2.0]))
    np.testing.assert_allclose(grads.dq, [-1.0, -2.0], atol=1e-10)
    assert not grads.fallback


def test_vjp_unconstrained_dp_matches_finite_differences():
    qp = QpData(P=[[1.0]], q=[-1.0])  # x* = 1
    sol = _solved(qp)
    grads = vjp(qp, sol, np.array([1.0]))
    np.testing.assert_allclose(grads.dP, [[-1.0]], atol=1e-9)
    fd = fd_solution_gradients(qp, np.array([1.0]))
    np.testing.assert_allclose(grads.dP, fd["dP"], atol=1e-6)


def test_vjp_active_constraint_dh_matches_finite_differences():
    qp = QpData(P=[[1.0]], q=[0.0], G=[[-1.0]], h=[-1.0])  # x >= 1 active
    sol = _solved(qp)
    grads = vjp(qp, sol, np.array([1.0]))
    fd = fd_solution_gradients(qp, np.array([1.0]))
    assert np.abs(grads.dh - fd["dh"]).max() <= 1e-6
    assert np.abs(grads.dG - fd["dG"]).max() <= 1e-6


def test_jvp_unconstrained_unit_tangent():
    qp = QpData(P=np.eye(2), q=np.zeros(2))
    dx = jvp(qp, _solved(qp), dq=np.array([1.0, 0.0]))
    np.testing.assert_allclose(dx, [-1.0, 0.0], atol=1e-10)


def test_jvp_zero_tangents_give_zero():
    qp = QpData(P=np.eye(3), q=np.arange(3.0), G=-np.eye(3), h=np.ones(3))
    dx = jvp(qp, _solved(qp), dq=np.zeros(3))
    np.testing.assert_allclose(dx, np.zeros(3), atol=1e-12)


def test_adjoint_identity_on_random_qps(rng):
    for _ in range(30):
        n = int(rng.integers(2, 9))
        p = int(rng.integers(0, 3))
        m = int(rng.integers(1, 8))
        qp = random_feasible_qp(rng, n, p, m)
        sol = _solved(qp)
        if strict_complementarity_margin(qp, sol) <= 1e-6:
            continue
        xbar = rng.standard_normal(n)
        grads = vjp(qp, sol, xbar)
        analytic = {
            "dP": grads.dP,
            "dq": grads.dq,
            "dA": grads.dA,
            "db": grads.db,
            "dG": grads.dG,
            "dh": grads.dh,
        }
        tangents = {
            "dP": rng.standard_normal((n, n)),
            "dq": rng.standard_normal(n),
            "dA": rng.standard_normal((p, n)),
            "db": rng.standard_normal(p),
            "dG": rng.standard_normal((m, n)),
            "dh": rng.standard_normal(m),
        }
        dx = jvp(qp, sol, **tangents)
        lhs = float(xbar @ dx)
        rhs = sum(float((analytic[k] * tangents[k]).sum()) for k in tangents)
        assert abs(lhs - rhs) <= 1e-9


def test_vjp_matches_finite_differences_on_random_qps(rng):
    checked = 0
    while checked < 25:
        n = int(rng.integers(2, 8))
        p = int(rng.integers(0, 3))
        m = int(rng.integers(1, 7))
        qp = random_feasible_qp(rng, n, p, m)
        sol = _solved(qp)
        if strict_complementarity_margin(qp, sol) <= 1e-5:
            continue
        checked += 1
        xbar = rng.standard_normal(n)
        grads = vjp(qp, sol, xbar)
        fd = fd_solution_gradients(qp, xbar, step=1e-6)
        analytic = {
            "dP": grads.dP,
            "dq": grads.dq,
            "dA": grads.dA,
            "db": grads.db,
            "dG": grads.dG,
            "dh": grads.dh,
        }
        for key, fd_val in fd.items():
            if fd_val.size == 0:
                continue
            err = np.abs(analytic[key] - fd_val) / (1.0 + np.abs(fd_val))
            assert err.max() <= 1e-5, (key, err.max())


def test_vjp_matches_finite_differences_larger_instance():
    rng = np.random.default_rng(7)
    while True:
        qp = random_feasible_qp(rng, 16, 3, 12)
        sol = _solved(qp)
        if strict_complementarity_margin(qp, sol) > 1e-5:
            break
    xbar = rng.standard_normal(16)
    grads = vjp(qp, sol, xbar)
    fd = fd_solution_gradients(qp, xbar, step=1e-6)
    for key, analytic in (
        ("dP", grads.dP),
        ("dq", grads.dq),
        ("dA", grads.dA),
        ("db", grads.db),
        ("dG", grads.dG),
        ("dh", grads.dh),
    ):
        err = np.abs(analytic - fd[key]) / (1.0 + np.abs(fd[key]))
        assert err.max() <= 1e-5, (key, err.max())


def test_inactive_constraint_gradients_exactly_zero():
    # second constraint is slack with an exactly-zero multiplier
    qp = QpData(
        P=np.eye(2),
        q=np.array([-1.0, 0.0]),
        G=np.array([[1.0, 0.0], [0.0, 1.0]]),
        h=np.array([0.5, 100.0]),
    )
    sol = solve(qp)
    assert sol.status == OPTIMAL
    cleaned = QpSolution(
        x=sol.x,
        nu=sol.nu,
        lam=np.where(sol.lam < 1e-8, 0.0, sol.lam),
        status=OPTIMAL,
        iterations=sol.iterations,
        kkt_residuals=sol.kkt_residuals,
    )
    grads = vjp(qp, cleaned, np.array([1.0, 1.0]))
    np.testing.assert_array_equal(grads.dh[1], 0.0)
    np.testing.assert_array_equal(grads.dG[1], np.zeros(2))


def test_fallback_zero_matrix():
    z = least_squares_fallback(np.zeros((2, 2)), np.zeros(2))
    np.testing.assert_array_equal(z, np.zeros(2))


def test_fallback_diagonal_pseudoinverse():
    z = least_squares_fallback(np.diag([1.0, 0.0]), np.array([2.0, 0.0]))
    np.testing.assert_allclose(z, [2.0, 0.0], atol=1e-12)


def test_fallback_matches_svd_pseudoinverse(rng):
    for _ in range(10):
        base = rng.standard_normal((3, 2))
        M = base @ rng.standard_normal((2, 3))  # rank <= 2
        rhs = rng.standard_normal(3)
        z = least_squares_fallback(M, rhs)
        z_ref = np.linalg.pinv(M) @ rhs
        np.testing.assert_allclose(z, z_ref, atol=1e-9)
        assert abs(np.linalg.norm(M @ z - rhs) - np.linalg.norm(M @ z_ref - rhs)) <= 1e-9


def test_degenerate_point_uses_fallback_and_counts():
    # x <= 0 with minimum at the boundary: multiplier and slack both zero
    qp = QpData(P=[[1.0]], q=[0.0], G=[[1.0]], h=[0.0])
    sol = QpSolution(
        x=np.zeros(1),
        nu=np.zeros(0),
        lam=np.zeros(1),
        status=OPTIMAL,
        iterations=0,
        kkt_residuals=(0.0, 0.0, 0.0, 0.0),
    )
    assert strict_complementarity_margin(qp, sol) <= EPS_STRICT_COMP
    reset_counters()
    grads = vjp(qp, sol, np.ones(1))
    assert grads.fallback
    stats = counters()
    assert stats["fallback_calls"] == 1 and stats["vjp_calls"] == 1


def test_kkt_matrix_layout():
    qp = QpData(
        P=2 * np.eye(2),
        q=np.zeros(2),
        A=np.array([[1.0, 1.0]]),
        b=[1.0],
        G=np.array([[1.0, 0.0]]),
        h=[0.3],
    )
    sol = solve(qp)
    M = kkt_matrix(qp, sol)
    assert M.shape == (4, 4)
    np.testing.assert_allclose(M[:2, :2], qp.P)
    np.testing.assert_allclose(M[:2, 2], qp.A[0])
    np.testing.assert_allclose(M[2, :2], qp.A[0])
    np.testing.assert_allclose(M[3, :2], sol.lam[0] * qp.G[0])
    assert M[3, 3] == pytest.approx(float((qp.G @ sol.x - qp.h)[0]), abs=1e-12)


def test_qp_node_reproduces_linear_regulator_gain(rng):
    n, m = 3, 2
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    R = np.eye(m)
    theta = rng.standard_normal((n, n))
    x_val = rng.standard_normal(n)
    M = theta.T @ theta
    gain = -np.linalg.solve(R + B.T @ M @ B, B.T @ M @ A)

    g = Graph()
    th = g.param(theta)
    x = g.constant(x_val)
    Mt = g.matmul(g.transpose(th), th)
    BtM = g.matmul(g.constant(B.T.copy()), Mt)
    P = g.scale(2.0, g.add(g.constant(R), g.matmul(BtM, g.constant(B))))
    q = g.scale(2.0, g.matvec(g.matmul(BtM, g.constant(A)), x))
    u = qp_node(g, P, q)
    np.testing.assert_allclose(u.value, gain @ x_val, atol=1e-7)


def test_qp_node_gradient_unconstrained_closed_form():
    # d/dq ||x*(q)||^2 = -2 P^-1 x*  for x*(q) = -P^-1 q
    P_val = np.array([[2.0, 0.3], [0.3, 1.0]])
    q_val = np.array([0.4, -1.1])
    g = Graph()
    qn = g.param(q_val)
    xstar = qp_node(g, g.constant(P_val), qn)
    root = g.sum(g.square(xstar))
    g.backward(root)
    expected = -2.0 * np.linalg.solve(P_val, xstar.value)
    np.testing.assert_allclose(g.grad(qn), expected, atol=1e-8)


def test_qp_node_three_step_rollout_gradient_matches_fd(rng):
    # scalar system x' = a x + b u with policy u = argmin u^2 + (theta(ax+bu))^2
    a, b = 0.9, 0.5

    def run(theta_val):
        g = Graph()
        theta = g.param(np.array([theta_val]))
        x = g.constant(np.array([1.3]))
        total = None
        for _ in range(3):
            th2 = g.square(theta)
            P = g.scale(2.0, g.add(g.constant(np.ones(1)), g.scale(b * b, th2)))
            P = g.reshape(P, (1, 1))
            q = g.scale(2.0 * a * b, g.mul(th2, x))
            u = qp_node(g, P, q)
            cost = g.add(g.sum(g.square(x)), g.sum(g.square(u)))
            total = cost if total is None else g.add(total, cost)
            x = g.add(g.scale(a, x), g.scale(b, u))
        return g, theta, total

    theta0 = 0.8
    g, theta, total = run(theta0)
    g.backward(total)
    analytic = g.grad(theta)[0]
    eps = 1e-6
    hi = float(run(theta0 + eps)[2].value)
    lo = float(run(theta0 - eps)[2].value)
    fd = (hi - lo) / (2 * eps)
    assert abs(analytic - fd) <= 1e-4 * (1.0 + abs(fd))


def test_qp_node_propagates_solver_failure():
    from cocp.qp_diff import QpNodeError

    g = Graph()
    P = g.constant(np.array([[1.0]]))
    q = g.constant(np.array([0.0]))
    G = g.constant(np.array([[1.0], [-1.0]]))
    h = g.constant(np.array([-1.0, -1.0]))  # x <= -1 and x >= 1
    with pytest.raises(QpNodeError):
        qp_node(g, P, q, G=G, h=h, max_iters=40)
