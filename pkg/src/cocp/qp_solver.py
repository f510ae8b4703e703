"""Dense convex quadratic programming to high accuracy.

Canonical form:

    minimize    (1/2) x'Px + q'x
    subject to  Ax = b,  Gx <= h

with P symmetric positive semidefinite. The solver is a primal-dual
interior-point method with a Mehrotra predictor-corrector step, aimed at the
small dense problems produced by control policy evaluation. Tight duals
matter here because the solutions are differentiated downstream, so the
method iterates until all four KKT residual norms fall below ``tol_solve``
and the duality gap satisfies ``lam'(h - Gx) <= tol_solve * (1 + |h|_inf)``.

Each Newton step solves the symmetric quasi-definite system

    [ P   A'  G'          ] [dx ]
    [ A   0   0           ] [dnu]
    [ G   0  -diag(s/lam) ] [dlam]

via dense LU with static diagonal regularization ``REG`` (+REG on the first
block, -REG on the rest) followed by one iterative-refinement pass against
the unregularized matrix. Problems with no inequalities reduce to a single
regularized KKT solve. The ``infeasible-detected`` status is a guardrail: it
fires when the complementarity measure stalls while the primal residual
stays above ``1e3 * (1 + |b| + |h|)`` for 10 consecutive iterations, and in
the equality-only path when no KKT point exists (inconsistent constraints or
an unbounded objective).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

__all__ = [
    "QpData",
    "QpSolution",
    "QpError",
    "QpDimensionError",
    "QpInfeasibleError",
    "QpNotConvexError",
    "OPTIMAL",
    "MAX_ITERS",
    "INFEASIBLE",
    "solve",
    "validate",
]

REG = 1e-9
FRACTION_TO_BOUNDARY = 0.99
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITERS = 100

_INFEAS_BLOWUP = 1e3
_INFEAS_STREAK = 10

OPTIMAL = "optimal"
MAX_ITERS = "max-iters"
INFEASIBLE = "infeasible-detected"


class QpError(Exception):
    pass


class QpDimensionError(QpError):
    pass


class QpInfeasibleError(QpError):
    pass


class QpNotConvexError(QpError):
    pass


def _empty_matrix(n):
    return np.zeros((0, n))


def _empty_vector():
    return np.zeros(0)


@dataclass
class QpData:
    """Problem data. ``A, b, G, h`` may be omitted (empty constraint blocks)."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
        self.q = np.asarray(self.q, dtype=np.float64).ravel()
        n = self.q.shape[0]
        self.A = (
            _empty_matrix(n)
            if self.A is None
            else np.asarray(self.A, dtype=np.float64).reshape(-1, n)
        )
        self.b = (
            _empty_vector()
            if self.b is None
            else np.asarray(self.b, dtype=np.float64).ravel()
        )
        self.G = (
            _empty_matrix(n)
            if self.G is None
            else np.asarray(self.G, dtype=np.float64).reshape(-1, n)
        )
        self.h = (
            _empty_vector()
            if self.h is None
            else np.asarray(self.h, dtype=np.float64).ravel()
        )
        if self.P.shape != (n, n):
            raise QpDimensionError(f"P shape {self.P.shape}, expected ({n}, {n})")
        if self.A.shape[0] != self.b.shape[0]:
            raise QpDimensionError("A and b row counts differ")
        if self.G.shape[0] != self.h.shape[0]:
            raise QpDimensionError("G and h row counts differ")

    @property
    def n_var(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_in(self) -> int:
        return self.G.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    status: str
    iterations: int
    # max-norms of (stationarity, primal equality, primal inequality
    # violation, complementarity)
    kkt_residuals: tuple = field(default=(np.inf,) * 4)


_EMPTY = np.zeros(0)


def _linf(v) -> float:
    return float(np.abs(v).max()) if v.size else 0.0


def validate(qp: QpData, *, psd_tol: float = 1e-9) -> QpData:
    """Normalize raw problem data.

    Symmetrizes P and checks it is PSD within ``psd_tol``; removes zero and
    linearly dependent equality rows after checking they are consistent.
    Raises :class:`QpInfeasibleError` when the dropped rows conflict, and
    :class:`QpNotConvexError` when P has an eigenvalue below ``-psd_tol``.
    """
    P = 0.5 * (qp.P + qp.P.T)
    eigs = np.linalg.eigvalsh(P)
    if eigs.min() < -psd_tol:
        raise QpNotConvexError(f"P has eigenvalue {eigs.min():.3e} < -{psd_tol}")
    A, b = qp.A, qp.b
    if A.shape[0]:
        scale = 1.0 + _linf(b)
        keep = []
        for i in range(A.shape[0]):
            if _linf(A[i]) <= 1e-14:
                if abs(b[i]) > 1e-12 * scale:
                    raise QpInfeasibleError(f"zero equality row {i} with b={b[i]}")
                continue
            keep.append(i)
        A = A[keep]
        b = b[keep]
        if A.shape[0]:
            # rank repair: keep a maximal independent row subset, then make
            # sure the dropped rows were implied by the kept ones
            from scipy.linalg import qr

            _, R, piv = qr(A.T, mode="economic", pivoting=True)
            diag = np.abs(np.diag(R))
            tol = diag.max() * max(A.shape) * np.finfo(float).eps if diag.size else 0.0
            rank = int((diag > tol).sum())
            if rank < A.shape[0]:
                x_ls, *_ = np.linalg.lstsq(A, b, rcond=None)
                if _linf(A @ x_ls - b) > 1e-9 * scale:
                    raise QpInfeasibleError("inconsistent equality constraints")
                kept = sorted(piv[:rank])
                A = A[kept]
                b = b[kept]
    return QpData(P=P, q=qp.q.copy(), A=A, b=b, G=qp.G.copy(), h=qp.h.copy())


def solve(
    qp: QpData,
    tol_solve: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> QpSolution:
    """Solve the QP, returning primal and dual variables with KKT residuals.

    Status ``optimal`` certifies every residual is at most ``tol_solve`` and
    all inequality multipliers are nonnegative (up to 1e-10).
    """
    if qp.n_var < 1:
        raise QpDimensionError("QP needs at least one variable")
    P = 0.5 * (qp.P + qp.P.T)
    if qp.n_in == 0:
        return _solve_equality(P, qp.q, qp.A, qp.b, tol_solve)
    return _solve_interior(P, qp.q, qp.A, qp.b, qp.G, qp.h, tol_solve, max_iters)


def _refined_solve(factor, k_exact, rhs, sweeps=1):
    sol = lu_solve(factor, rhs, check_finite=False)
    for _ in range(sweeps):
        resid = rhs - k_exact @ sol
        sol = sol + lu_solve(factor, resid, check_finite=False)
    return sol


def _solve_equality(P, q, A, b, tol) -> QpSolution:
    n = q.shape[0]
    p = A.shape[0]
    dim = n + p
    K = np.zeros((dim, dim))
    K[:n, :n] = P
    if p:
        K[:n, n:] = A.T
        K[n:, :n] = A
    rhs = np.concatenate([-q, b])
    Kreg = K.copy()
    idx = np.arange(dim)
    Kreg[idx, idx] += np.concatenate([np.full(n, REG), np.full(p, -REG)])
    try:
        sol = np.linalg.solve(Kreg, rhs)
        # one refinement sweep against the unregularized matrix removes the
        # O(REG) bias of the regularized solve
        sol = sol + np.linalg.solve(Kreg, rhs - K @ sol)
        if not np.isfinite(sol).all():
            sol = None
    except np.linalg.LinAlgError:
        sol = None
    if sol is None:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x, nu = sol[:n], sol[n:]
    stat = _linf(P @ x + q + (A.T @ nu if p else 0.0))
    peq = _linf(A @ x - b) if p else 0.0
    residuals = (stat, peq, 0.0, 0.0)
    if stat <= tol * (1.0 + _linf(q)) and peq <= tol * (1.0 + _linf(b)):
        status = OPTIMAL
    else:
        # no KKT point to the required accuracy: inconsistent equalities or
        # an objective unbounded on the feasible set
        status = INFEASIBLE
    return QpSolution(x, nu, _empty_vector(), status, 1, residuals)


def _max_step(v, dv) -> float:
    """Largest step keeping ``v + alpha * dv`` nonnegative (may exceed 1)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dv < 0.0, v / -dv, np.inf)
    return float(ratios.min())


def _initial_point(K_base, reg_diag, n, p, m, q, b, h):
    dim = n + p + m
    K = K_base.copy()
    didx = np.arange(dim)
    K[didx, didx] += reg_diag
    K[n + p + np.arange(m), n + p + np.arange(m)] += -1.0
    rhs = np.concatenate([-q, b, h])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        try:
            sol = lu_solve(lu_factor(K, check_finite=False), rhs, check_finite=False)
        except np.linalg.LinAlgError:
            sol = np.zeros(dim)
    if not np.isfinite(sol).all():
        sol = np.zeros(dim)
    x = sol[:n]
    nu = sol[n : n + p]
    z = sol[n + p :]
    s_raw = -z

    def shift(v):
        d = max(0.0, -1.5 * float(v.min())) if v.size else 0.0
        return v + d

    s1, l1 = shift(s_raw), shift(z)
    gap = float(s1 @ l1)
    sum_l, sum_s = float(l1.sum()), float(s1.sum())
    s = s1 + (0.5 * gap / sum_l if sum_l > 1e-12 else 1.0)
    lam = l1 + (0.5 * gap / sum_s if sum_s > 1e-12 else 1.0)
    s = np.maximum(s, 1e-4)
    lam = np.maximum(lam, 1e-4)
    return x, nu, lam, s


def _solve_interior(P, q, A, b, G, h, tol, max_iters) -> QpSolution:
    n, p, m = q.shape[0], A.shape[0], G.shape[0]
    dim = n + p + m
    norm_h = _linf(h)
    blowup = _INFEAS_BLOWUP * (1.0 + _linf(b) + norm_h)
    Gt = G.T.copy()
    At = A.T.copy() if p else None

    K_base = np.zeros((dim, dim))
    K_base[:n, :n] = P
    if p:
        K_base[:n, n : n + p] = At
        K_base[n : n + p, :n] = A
    K_base[:n, n + p :] = Gt
    K_base[n + p :, :n] = G
    reg_diag = np.concatenate([np.full(n, REG), np.full(p + m, -REG)])
    didx = np.arange(dim)
    ineq_idx = n + p + np.arange(m)

    x, nu, lam, s = _initial_point(K_base, reg_diag, n, p, m, q, b, h)

    status = MAX_ITERS
    stall = 0
    mu_prev = np.inf
    iteration = 0
    residuals = (np.inf,) * 4
    K = np.empty((dim, dim))
    Kreg = np.empty((dim, dim))
    rhs = np.empty(dim)
    for iteration in range(max_iters + 1):
        r_dual = P @ x + q + Gt @ lam
        if p:
            r_dual += At @ nu
        r_eq = A @ x - b if p else _EMPTY
        r_in = G @ x + s - h
        viol = max(0.0, float((r_in - s).max()))
        comp_vec = s * lam
        comp = float(comp_vec.max())
        gap = float(comp_vec.sum())
        stat = _linf(r_dual)
        peq = _linf(r_eq)
        residuals = (stat, peq, viol, comp)
        if (
            stat <= tol
            and peq <= tol
            and _linf(r_in) <= tol
            and comp <= tol
            and gap <= tol * (1.0 + norm_h)
        ):
            status = OPTIMAL
            break
        if iteration == max_iters:
            break
        mu = gap / m
        if max(peq, viol) > blowup and mu > 0.95 * mu_prev:
            stall += 1
            if stall >= _INFEAS_STREAK:
                status = INFEASIBLE
                break
        else:
            stall = 0
        mu_prev = mu

        np.copyto(K, K_base)
        K[ineq_idx, ineq_idx] = -s / lam
        np.copyto(Kreg, K)
        Kreg[didx, didx] += reg_diag
        # refinement against the unregularized matrix only matters once the
        # barrier is small and s/lam spans many orders of magnitude
        sweeps = 1 if mu < 1e-4 else 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            try:
                factor = lu_factor(Kreg, check_finite=False)
            except np.linalg.LinAlgError:
                break  # returns max-iters with the best iterate so far

            # predictor (affine scaling) direction
            rhs[:n] = -r_dual
            rhs[n : n + p] = -r_eq
            rhs[n + p :] = s - r_in
            step = _refined_solve(factor, K, rhs, sweeps=sweeps)
            dx_a, dlam_a = step[:n], step[n + p :]
            ds_a = -r_in - G @ dx_a
            alpha_p = min(1.0, _max_step(s, ds_a))
            alpha_d = min(1.0, _max_step(lam, dlam_a))
            mu_aff = float((s + alpha_p * ds_a) @ (lam + alpha_d * dlam_a)) / m
            sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))

            # corrector with centering
            rhs[n + p :] = -r_in - (sigma * mu - comp_vec - ds_a * dlam_a) / lam
            step = _refined_solve(factor, K, rhs, sweeps=sweeps)
        dx, dnu, dlam = step[:n], step[n : n + p], step[n + p :]
        ds = -r_in - G @ dx
        if not (np.isfinite(dx).all() and np.isfinite(dlam).all()):
            break
        alpha_p = min(1.0, FRACTION_TO_BOUNDARY * _max_step(s, ds))
        alpha_d = min(1.0, FRACTION_TO_BOUNDARY * _max_step(lam, dlam))
        x = x + alpha_p * dx
        s = s + alpha_p * ds
        nu = nu + alpha_d * dnu
        lam = lam + alpha_d * dlam

    return QpSolution(x, nu, lam, status, iteration, residuals)
