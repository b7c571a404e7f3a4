"""Conditional draws used by the parameter sweep: truncated normals, IW, Gaussian bias."""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import log_ndtr, ndtri_exp
from scipy.stats import invwishart

from .qp import _as_matrix


def truncnorm_ppf(u, lo, hi):
    """Inverse CDF of N(0, 1) restricted to [lo, hi].

    Works in log space on the lower tail; intervals entirely above zero are
    reflected so the upper tail never loses precision.
    """
    u = np.asarray(u, dtype=np.float64)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), u.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), u.shape)
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    uu = np.where(flip, 1.0 - u, u)
    lp_lo = log_ndtr(a)
    lp_hi = log_ndtr(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = lp_hi + np.log(uu + (1.0 - uu) * np.exp(lp_lo - lp_hi))
    x = ndtri_exp(np.minimum(lp, 0.0))
    x = np.clip(x, a, b)
    return np.where(flip, -x, x)


def coordinate_bounds(A: np.ndarray, b: np.ndarray, mu: np.ndarray, j: int):
    """Interval for coordinate j implied by A mu <= b with the rest fixed."""
    col = A[:, j]
    nz = col != 0
    if not nz.any():
        return -np.inf, np.inf
    rest = b[nz] - A[nz] @ mu + col[nz] * mu[j]
    bound = rest / col[nz]
    pos = col[nz] > 0
    hi = bound[pos].min(initial=np.inf)
    lo = bound[~pos].max(initial=-np.inf)
    return lo, hi


def sample_truncated_mvn(m_mu, S_mu, A, b, mu_prev, rng, inner_sweeps: int = 1, frozen=None,
                         feas_tol: float = 1e-9) -> np.ndarray:
    """Coordinate Gibbs for N(m, S) restricted to {A mu <= b}.

    Each coordinate is drawn from its conditional normal truncated to the
    interval left by the other coordinates.  ``frozen`` coordinates are not
    resampled (used for components that received no voxels).
    """
    m = np.asarray(m_mu, dtype=np.float64).reshape(-1)
    S = _as_matrix(S_mu)
    n = m.size
    A = np.asarray(A, dtype=np.float64).reshape(-1, n)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    mu = np.array(mu_prev, dtype=np.float64).reshape(-1)
    if A.shape[0] and (A @ mu - b > feas_tol * (1.0 + np.abs(b))).any():
        raise ValueError("previous mean vector violates the constraints")
    frozen = np.zeros(n, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    todo = np.flatnonzero(~frozen)
    if todo.size == 0:
        return mu
    Sf = S[np.ix_(todo, todo)]
    Q = cho_solve((np.linalg.cholesky(Sf), True), np.eye(todo.size))
    for _ in range(inner_sweeps):
        u = rng.random(todo.size)
        for k, j in enumerate(todo):
            qjj = Q[k, k]
            dev = mu[todo] - m[todo]
            cm = m[j] - (Q[k] @ dev - qjj * dev[k]) / qjj
            sd = 1.0 / np.sqrt(qjj)
            lo, hi = coordinate_bounds(A, b, mu, j) if A.shape[0] else (-np.inf, np.inf)
            if lo > hi:
                # only reachable through roundoff at a tight vertex
                mu[j] = 0.5 * (lo + hi)
                continue
            mu[j] = cm + sd * truncnorm_ppf(u[k], (lo - cm) / sd, (hi - cm) / sd)
            mu[j] = min(max(mu[j], lo), hi)
    return mu


def sample_inverse_wishart(S: np.ndarray, nu: float, rng) -> np.ndarray:
    """Sigma ~ IW(S, nu), mean S / (nu - N - 1)."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    draw = invwishart.rvs(df=nu, scale=S, random_state=rng)
    return np.atleast_2d(draw).reshape(S.shape)


def sample_dirichlet(alpha: np.ndarray, rng) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 1:
        return np.ones(1)
    return rng.dirichlet(alpha)


def sample_gaussian_precision(mean: np.ndarray, precision: np.ndarray, rng) -> np.ndarray:
    """Draw from N(mean, precision^-1) using the precision's Cholesky factor."""
    L = np.linalg.cholesky(precision)
    z = rng.standard_normal(mean.size)
    return mean + solve_triangular(L.T, z, lower=False)
