"""Differentiating the QP solution map through its KKT conditions.

At an optimal primal-dual triple ``(x, nu, lam)`` the KKT residual map

    F1 = Px + q + A'nu + G'lam = 0
    F2 = Ax - b = 0
    F3 = diag(lam) (Gx - h) = 0

is zero, and the Jacobian of F with respect to ``(x, nu, lam)`` is

    M = [ P            A'  G'            ]
        [ A            0   0             ]
        [ diag(lam) G  0   diag(Gx - h)  ]

When strict complementarity holds (every constraint has ``max(lam_i, s_i)``
above ``EPS_STRICT_COMP``) M is invertible and the implicit function theorem
gives the exact local derivative of the solution map. The adjoint of that
derivative is what :func:`vjp` computes; :func:`jvp` is the forward-mode
counterpart used to cross-check it. At degenerate points, or when the
condition estimate of M exceeds ``COND_TRIGGER``, the linear systems are
answered with a minimum-norm least-squares solution instead, and the result
is marked as a fallback (with module-level counters for observability).

:func:`qp_node` packages solve + vjp as a custom tape operation, so a QP
argmin can sit inside a recorded rollout and feed gradients to both the
policy parameters and the state that produced its data.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from . import qp_solver
from .qp_solver import OPTIMAL, QpData, QpError, QpSolution
from .tape import Graph, Node, accumulate, register_backward

__all__ = [
    "QpGradients",
    "QpNodeError",
    "EPS_STRICT_COMP",
    "COND_TRIGGER",
    "kkt_matrix",
    "strict_complementarity_margin",
    "vjp",
    "jvp",
    "least_squares_fallback",
    "qp_node",
    "counters",
    "reset_counters",
]

#: Strict-complementarity margin below which the derivative is declared
#: degenerate and the least-squares fallback is used.
EPS_STRICT_COMP = 1e-7

#: 1-norm condition estimate of the KKT Jacobian that triggers the fallback.
COND_TRIGGER = 1e12


class QpNodeError(QpError):
    def __init__(self, message: str, solution: QpSolution | None = None):
        super().__init__(message)
        self.solution = solution


@dataclass
class QpGradients:
    """Gradients of a scalar loss w.r.t. the QP data. dP is symmetrized."""

    dP: np.ndarray
    dq: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dG: np.ndarray
    dh: np.ndarray
    fallback: bool = False


_counter_lock = threading.Lock()
_counters = {"vjp_calls": 0, "fallback_calls": 0}


def counters() -> dict:
    with _counter_lock:
        return dict(_counters)


def reset_counters() -> None:
    with _counter_lock:
        for k in _counters:
            _counters[k] = 0


def _bump(key: str) -> None:
    with _counter_lock:
        _counters[key] += 1


def strict_complementarity_margin(qp: QpData, sol: QpSolution) -> float:
    """min over constraints of max(multiplier, slack); inf with no inequalities."""
    if qp.n_in == 0:
        return np.inf
    slack = qp.h - qp.G @ sol.x
    return float(np.maximum(sol.lam, slack).min())


def kkt_matrix(qp: QpData, sol: QpSolution) -> np.ndarray:
    n, p, m = qp.n_var, qp.n_eq, qp.n_in
    dim = n + p + m
    M = np.zeros((dim, dim))
    M[:n, :n] = 0.5 * (qp.P + qp.P.T)
    if p:
        M[:n, n : n + p] = qp.A.T
        M[n : n + p, :n] = qp.A
    if m:
        M[:n, n + p :] = qp.G.T
        M[n + p :, :n] = sol.lam[:, None] * qp.G
        diag = np.arange(m)
        M[n + p + diag, n + p + diag] = qp.G @ sol.x - qp.h
    return M


def least_squares_fallback(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution of ``mat z = rhs``."""
    z, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    return z


def _solve_possibly_singular(mat: np.ndarray, rhs: np.ndarray, degenerate: bool):
    """Solve ``mat z = rhs``; fall back to least squares when flagged or ill."""
    if not degenerate:
        try:
            factor = lu_factor(mat)
            gecon = get_lapack_funcs(("gecon",), (mat,))[0]
            anorm = np.abs(mat).sum(axis=0).max() if mat.size else 0.0
            rcond = gecon(factor[0], anorm, norm="1")[0]
            if rcond > 1.0 / COND_TRIGGER:
                z = lu_solve(factor, rhs)
                if np.isfinite(z).all():
                    return z, False
        except np.linalg.LinAlgError:
            pass
    _bump("fallback_calls")
    return least_squares_fallback(mat, rhs), True


def vjp(qp: QpData, sol: QpSolution, xbar: np.ndarray) -> QpGradients:
    """Pull an output cotangent back onto the QP data.

    ``xbar`` is the gradient of some scalar loss with respect to the primal
    solution x*. Requires ``sol.status == "optimal"``.
    """
    if sol.status != OPTIMAL:
        raise QpError(f"vjp requires an optimal solution, got {sol.status!r}")
    xbar = np.asarray(xbar, dtype=np.float64).ravel()
    n, p, m = qp.n_var, qp.n_eq, qp.n_in
    if xbar.shape[0] != n:
        raise QpError(f"cotangent length {xbar.shape[0]} != n_var {n}")
    _bump("vjp_calls")
    M = kkt_matrix(qp, sol)
    degenerate = strict_complementarity_margin(qp, sol) <= EPS_STRICT_COMP
    rhs = np.concatenate([xbar, np.zeros(p + m)])
    w, used_fallback = _solve_possibly_singular(M.T, rhs, degenerate)
    wx = w[:n]
    wnu = w[n : n + p]
    wlam = w[n + p :]
    x = sol.x
    dq = -wx
    dP = -0.5 * (np.outer(wx, x) + np.outer(x, wx))
    db = wnu.copy()
    dA = -(np.outer(sol.nu, wx) + np.outer(wnu, x)) if p else np.zeros((0, n))
    lam_wlam = sol.lam * wlam
    dh = lam_wlam.copy()
    dG = (
        -(np.outer(sol.lam, wx) + np.outer(lam_wlam, x)) if m else np.zeros((0, n))
    )
    return QpGradients(dP, dq, dA, db, dG, dh, fallback=used_fallback)


def jvp(
    qp: QpData,
    sol: QpSolution,
    dP=None,
    dq=None,
    dA=None,
    db=None,
    dG=None,
    dh=None,
) -> np.ndarray:
    """Forward-mode derivative: tangent on the data to tangent on x*.

    Used for testing the adjoint identity against :func:`vjp`; omitted
    tangents are zero.
    """
    if sol.status != OPTIMAL:
        raise QpError(f"jvp requires an optimal solution, got {sol.status!r}")
    n, p, m = qp.n_var, qp.n_eq, qp.n_in
    x, nu, lam = sol.x, sol.nu, sol.lam
    dP = np.zeros((n, n)) if dP is None else np.asarray(dP, dtype=np.float64)
    dq = np.zeros(n) if dq is None else np.asarray(dq, dtype=np.float64).ravel()
    dA = np.zeros((p, n)) if dA is None else np.asarray(dA, dtype=np.float64)
    db = np.zeros(p) if db is None else np.asarray(db, dtype=np.float64).ravel()
    dG = np.zeros((m, n)) if dG is None else np.asarray(dG, dtype=np.float64)
    dh = np.zeros(m) if dh is None else np.asarray(dh, dtype=np.float64).ravel()
    dPs = 0.5 * (dP + dP.T)
    r1 = dPs @ x + dq
    if p:
        r1 += dA.T @ nu
    if m:
        r1 += dG.T @ lam
    r2 = dA @ x - db if p else np.zeros(0)
    r3 = lam * (dG @ x - dh) if m else np.zeros(0)
    rhs = -np.concatenate([r1, r2, r3])
    M = kkt_matrix(qp, sol)
    degenerate = strict_complementarity_margin(qp, sol) <= EPS_STRICT_COMP
    step, _ = _solve_possibly_singular(M, rhs, degenerate)
    return step[:n]


_TAGS = ("P", "q", "A", "b", "G", "h")


def qp_node(
    graph: Graph,
    P: Node,
    q: Node,
    A: Node | None = None,
    b: Node | None = None,
    G: Node | None = None,
    h: Node | None = None,
    *,
    tol_solve: float = qp_solver.DEFAULT_TOL,
    max_iters: int = qp_solver.DEFAULT_MAX_ITERS,
) -> Node:
    """Record a QP argmin on the tape; value is x*, backward runs :func:`vjp`."""

    def val(node):
        return None if node is None else node.value

    qp = QpData(P=P.value, q=q.value, A=val(A), b=val(b), G=val(G), h=val(h))
    sol = qp_solver.solve(qp, tol_solve=tol_solve, max_iters=max_iters)
    if sol.status != OPTIMAL:
        raise QpNodeError(
            f"policy QP solve failed with status {sol.status!r}, "
            f"residuals {sol.kkt_residuals}",
            solution=sol,
        )
    present = [
        (node, tag)
        for node, tag in zip((P, q, A, b, G, h), _TAGS)
        if node is not None
    ]
    parents = tuple(node for node, _ in present)
    tags = tuple(tag for _, tag in present)
    return graph.record("qp", parents, sol.x.copy(), ctx=(qp, sol, tags))


def _qp_backward(node: Node, g: np.ndarray) -> None:
    from .tape import NumericError

    if not np.isfinite(g).all():
        raise NumericError(
            f"non-finite cotangent reached qp node {node.id}", node_id=node.id
        )
    qp, sol, tags = node.ctx
    grads = vjp(qp, sol, g)
    by_tag = {
        "P": grads.dP,
        "q": grads.dq,
        "A": grads.dA,
        "b": grads.db,
        "G": grads.dG,
        "h": grads.dh,
    }
    for parent, tag in zip(node.parents, tags):
        accumulate(parent, by_tag[tag])


register_backward("qp", _qp_backward)
