"""Independent reference computations used for verification.

Nothing in here shares code with the interior-point solver or with the
implicit-differentiation path; these routines exist so the fast paths can be
checked against slower, structurally different ones:

* :func:`active_set_solve` finds the QP optimum by enumerating active sets
  and solving plain equality-constrained KKT systems.
* :func:`random_feasible_qp` generates strictly convex QPs around a known
  interior point, so feasibility is guaranteed by construction.
* :func:`fd_solution_gradients` differentiates the solver numerically,
  entry by entry, with central differences.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .qp_solver import OPTIMAL, QpData, QpError, solve

__all__ = [
    "active_set_solve",
    "random_feasible_qp",
    "fd_solution_gradients",
    "fd_gradient",
]

_MAX_ENUM_CONSTRAINTS = 20


def active_set_solve(qp: QpData, feas_tol: float = 1e-8):
    """Globally solve a small QP by enumerating inequality active sets.

    For each candidate subset of active inequalities, solves the
    equality-constrained KKT system and keeps the candidate that is primal
    and dual feasible with the lowest objective value. Requires strictly
    convex P for the inner systems to be well posed (singular candidates
    are skipped). Returns ``(x, nu, lam, objective)``.
    """
    n, p, m = qp.n_var, qp.n_eq, qp.n_in
    if m > _MAX_ENUM_CONSTRAINTS:
        raise ValueError(f"active-set enumeration limited to {_MAX_ENUM_CONSTRAINTS} inequalities")
    P, q, A, b, G, h = qp.P, qp.q, qp.A, qp.b, qp.G, qp.h
    P = 0.5 * (P + P.T)
    best = None
    for k in range(m + 1):
        for subset in combinations(range(m), k):
            idx = list(subset)
            Gs, hs = G[idx], h[idx]
            dim = n + p + k
            K = np.zeros((dim, dim))
            K[:n, :n] = P
            if p:
                K[:n, n : n + p] = A.T
                K[n : n + p, :n] = A
            if k:
                K[:n, n + p :] = Gs.T
                K[n + p :, :n] = Gs
            rhs = np.concatenate([-q, b, hs])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.isfinite(sol).all():
                continue
            # near-singular subsets can "solve" without satisfying the
            # system; verify the candidate truly is a KKT point
            resid = np.abs(K @ sol - rhs).max()
            if resid > 1e-7 * (1.0 + np.abs(rhs).max()):
                continue
            x = sol[:n]
            nu = sol[n : n + p]
            lam_s = sol[n + p :]
            if k and lam_s.min() < -feas_tol:
                continue
            if m and (G @ x - h).max() > feas_tol * (1.0 + np.abs(h).max()):
                continue
            lam = np.zeros(m)
            lam[idx] = np.maximum(lam_s, 0.0)
            obj = qp.objective(x)
            if best is None or obj < best[3] - 1e-12:
                best = (x, nu, lam, obj)
    if best is None:
        raise QpError("active-set enumeration found no feasible KKT point")
    return best


def random_feasible_qp(
    rng: np.random.Generator,
    n_var: int,
    n_eq: int,
    n_in: int,
    *,
    curvature: float = 0.3,
) -> QpData:
    """Strictly convex QP with a randomly drawn strictly feasible point."""
    M = rng.standard_normal((n_var, n_var))
    P = M @ M.T + curvature * np.eye(n_var)
    q = rng.standard_normal(n_var)
    x0 = rng.standard_normal(n_var)
    A = b = G = h = None
    if n_eq:
        A = rng.standard_normal((n_eq, n_var))
        b = A @ x0
    if n_in:
        G = rng.standard_normal((n_in, n_var))
        h = G @ x0 + rng.uniform(0.1, 1.0, size=n_in)
    return QpData(P=P, q=q, A=A, b=b, G=G, h=h)


def fd_gradient(f, x0: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Entrywise central-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.ravel()
    xf = x0.ravel()
    for i in range(xf.size):
        e = np.zeros_like(xf)
        e[i] = step
        hi = f((xf + e).reshape(x0.shape))
        lo = f((xf - e).reshape(x0.shape))
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def fd_solution_gradients(
    qp: QpData,
    xbar: np.ndarray,
    step: float = 1e-6,
    tol_solve: float = 1e-12,
    max_iters: int = 200,
):
    """Central-difference gradients of ``<xbar, x*(data)>`` w.r.t. all data.

    Re-solves the QP for every perturbed entry of (P, q, A, b, G, h); the
    perturbation of P is symmetric so the result is comparable with the
    symmetrized analytic gradient. Returns a dict of arrays.
    """

    def value(data: QpData) -> float:
        sol = solve(data, tol_solve=tol_solve, max_iters=max_iters)
        if sol.status != OPTIMAL:
            raise QpError(f"fd oracle: perturbed solve returned {sol.status}")
        return float(xbar @ sol.x)

    n, p, m = qp.n_var, qp.n_eq, qp.n_in

    def perturbed(field, delta):
        parts = {
            "P": qp.P.copy(),
            "q": qp.q.copy(),
            "A": qp.A.copy(),
            "b": qp.b.copy(),
            "G": qp.G.copy(),
            "h": qp.h.copy(),
        }
        parts[field] = parts[field] + delta
        return QpData(**parts)

    def vec_grad(field, size):
        g = np.zeros(size)
        for i in range(size):
            e = np.zeros(size)
            e[i] = step
            g[i] = (value(perturbed(field, e)) - value(perturbed(field, -e))) / (
                2.0 * step
            )
        return g

    def mat_grad(field, shape):
        g = np.zeros(shape)
        for i in range(shape[0]):
            for j in range(shape[1]):
                E = np.zeros(shape)
                E[i, j] = step
                g[i, j] = (
                    value(perturbed(field, E)) - value(perturbed(field, -E))
                ) / (2.0 * step)
        return g

    out = {}
    # single-entry perturbations of P are symmetrized inside the solver, so
    # this matches the symmetrized analytic gradient entrywise
    out["dP"] = mat_grad("P", (n, n))
    out["dq"] = vec_grad("q", n)
    out["dA"] = mat_grad("A", (p, n)) if p else np.zeros((0, n))
    out["db"] = vec_grad("b", p) if p else np.zeros(0)
    out["dG"] = mat_grad("G", (m, n)) if m else np.zeros((0, n))
    out["dh"] = vec_grad("h", m) if m else np.zeros(0)
    return out
