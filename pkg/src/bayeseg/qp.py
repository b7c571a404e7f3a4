"""Mean-vector QP: minimize (mu - m)^T S^-1 (mu - m) subject to A mu <= b.

Solved with the Goldfarb-Idnani dual active-set method (``quadprog``),
which is exact on degenerate vertices where many rows are tight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import quadprog
from scipy.linalg import block_diag, cho_factor, cho_solve


class InfeasibleConstraints(ValueError):
    """A mu <= b admits no solution."""


@dataclass(frozen=True)
class QPResult:
    mu: np.ndarray
    multipliers: np.ndarray  # one per row, >= 0
    active: np.ndarray  # bool per row


def _as_matrix(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 3:
        return block_diag(*S)
    return S


def _precision(S: np.ndarray) -> np.ndarray:
    H = cho_solve(cho_factor(S, lower=True), np.eye(S.shape[0]))
    return 0.5 * (H + H.T)


def _solve(m, S, A, b):
    if A.shape[0] == 0 or (A @ m - b <= 0).all():
        return m.copy(), np.zeros(A.shape[0])
    H = _precision(S)
    try:
        mu, _, _, _, lam, _ = quadprog.solve_qp(H, H @ m, -A.T, -b, 0)
    except ValueError:
        # degenerate vertices (more tight rows than dimensions) can fail on
        # roundoff; retry once on a relaxation far below any tolerance used
        try:
            relax = 1e-11 * (1.0 + np.abs(b))
            mu, _, _, _, lam, _ = quadprog.solve_qp(H, H @ m, -A.T, -(b + relax), 0)
        except ValueError as exc:
            raise InfeasibleConstraints(f"mean constraints are infeasible ({exc})") from exc
    return mu, np.maximum(lam, 0.0)


def solve_constrained_means(m_mu, S_mu, A, b, fixed=None, x0=None) -> QPResult:
    """Constrained mode of the Gaussian N(m_mu, S_mu) on {A mu <= b}.

    ``S_mu`` is a full SPD matrix or a stack of diagonal blocks.  Entries
    flagged in ``fixed`` are held at ``x0`` (components with no data).
    """
    m = np.asarray(m_mu, dtype=np.float64).reshape(-1)
    S = _as_matrix(S_mu)
    A = np.asarray(A, dtype=np.float64).reshape(-1, m.size)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if fixed is None or not np.any(fixed):
        mu, lam = _solve(m, S, A, b)
        return QPResult(mu, lam, lam > 0)
    fixed = np.asarray(fixed, dtype=bool)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    free = ~fixed
    b_eff = b - A[:, fixed] @ x0[fixed]
    A_eff = A[:, free]
    keep = np.abs(A_eff).sum(axis=1) > 0
    if (b_eff[~keep] < -1e-9).any():
        raise InfeasibleConstraints("held means violate a constraint")
    out = x0.copy()
    lam = np.zeros(A.shape[0])
    if free.any():
        mu, sub = _solve(m[free], S[np.ix_(free, free)], A_eff[keep], b_eff[keep])
        out[free] = mu
        lam[keep] = sub
    return QPResult(out, lam, lam > 0)


def kkt_residual(mu, m_mu, S_mu, A, b, multipliers) -> float:
    """Max violation over stationarity, primal/dual feasibility, complementarity."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    m = np.asarray(m_mu, dtype=np.float64).reshape(-1)
    S = _as_matrix(S_mu)
    A = np.asarray(A, dtype=np.float64).reshape(-1, mu.size)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    lam = np.asarray(multipliers, dtype=np.float64).reshape(-1)
    grad = cho_solve(cho_factor(S, lower=True), mu - m)
    stat = grad + A.T @ lam if A.size else grad
    slack = A @ mu - b if A.size else np.zeros(0)
    parts = [
        np.abs(stat).max(initial=0.0),
        np.maximum(slack, 0.0).max(initial=0.0),
        np.maximum(-lam, 0.0).max(initial=0.0),
        np.abs(lam * slack).max(initial=0.0),
    ]
    return float(max(parts))
