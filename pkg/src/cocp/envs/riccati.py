"""Infinite-horizon discrete-time LQR baseline via Riccati fixed point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RiccatiBaseline", "riccati", "steady_state_covariance", "RiccatiError"]


class RiccatiError(Exception):
    pass


@dataclass(frozen=True)
class RiccatiBaseline:
    """Quadratic value matrix P, optimal gain K, and average cost trace(P Sigma)."""

    P: np.ndarray
    K: np.ndarray
    j_opt: float


def riccati(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    sigma: np.ndarray,
    *,
    tol: float = 1e-10,
    max_iters: int = 10_000,
) -> RiccatiBaseline:
    """Fixed point of  P = Q + A'PA - A'PB (R + B'PB)^-1 B'PA.

    Requires (A, B) stabilizable, Q PSD, R PD. Raises :class:`RiccatiError`
    on divergence or when ``max_iters`` sweeps do not reach ``tol`` in the
    max-norm of the update.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    P = Q.copy()
    for _ in range(max_iters):
        BtP = B.T @ P
        gain_lhs = R + BtP @ B
        gain_rhs = BtP @ A
        try:
            KtRK = gain_rhs.T @ np.linalg.solve(gain_lhs, gain_rhs)
        except np.linalg.LinAlgError as exc:
            raise RiccatiError("singular input-cost block") from exc
        P_next = Q + A.T @ P @ A - KtRK
        delta = np.abs(P_next - P).max()
        P = P_next
        if not np.isfinite(delta) or np.abs(P).max() > 1e14:
            raise RiccatiError("Riccati iteration diverged (system not stabilizable?)")
        if delta <= tol:
            K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return RiccatiBaseline(P=P, K=K, j_opt=float(np.trace(P @ sigma)))
    raise RiccatiError(f"Riccati iteration did not converge in {max_iters} sweeps")


def steady_state_covariance(
    A_cl: np.ndarray,
    noise_cov: np.ndarray,
    *,
    tol: float = 1e-13,
    max_iters: int = 100_000,
) -> np.ndarray:
    """Fixed point of the closed-loop state covariance  S = A S A' + W."""
    S = np.asarray(noise_cov, dtype=np.float64).copy()
    A_cl = np.asarray(A_cl, dtype=np.float64)
    for _ in range(max_iters):
        S_next = A_cl @ S @ A_cl.T + noise_cov
        delta = np.abs(S_next - S).max()
        S = S_next
        if not np.isfinite(delta) or np.abs(S).max() > 1e14:
            raise RiccatiError("covariance iteration diverged (unstable closed loop)")
        if delta <= tol:
            return S
    raise RiccatiError("covariance iteration did not converge")
