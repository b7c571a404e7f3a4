"""Simplified-prior GEM for the likelihood parameters and the MAP starting state.

With the cRBM filters zeroed the tumor prior collapses to two constant
visible biases, the label prior factorizes over voxels, and theta can be
optimized by coordinate-wise conditional modes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .labels import BRAIN, CORE, EDEMA, GmmMapping
from .likelihood import (
    BiasBasis,
    ComponentLayout,
    HyperPriors,
    Theta,
    canonical_tag,
    gmm_log_likelihoods,
    log_prior_theta,
    residuals,
    weighted_component_logs,
)
from .posterior import ComboTable, combo_log_prior, combo_log_weights, label_arrays, log_atlas, normalized
from .qp import solve_constrained_means
from .volume import JointLabelState, MultiChannelImage, unflat

log = logging.getLogger(__name__)

# Tumor mean offsets in channel standard deviations.
TUMOR_DISTANCES = {
    "core": {"FLAIR": 1.0, "T2": 0.7, "T1": 0.2, "T1c": 1.5},
    "edema": {"FLAIR": 1.0, "T2": 0.7, "T1": 0.2, "T1c": 0.2},
}
EMPTY = 1e-8


@dataclass(frozen=True)
class SimplifiedPriorConfig:
    w: float = 0.1
    u: float = 0.5

    def __post_init__(self):
        if not (1e-6 <= self.w < 1.0):
            raise ValueError(f"tumor fraction w={self.w} outside [1e-6, 1)")
        if not (0.0 < self.u < 1.0):
            raise ValueError(f"core fraction u={self.u} outside (0, 1)")


def simplified_biases(cfg: SimplifiedPriorConfig) -> tuple[float, float]:
    """(a_z, a_y) that make w of brain voxels tumor and u of tumor core."""
    a_y = float(np.log(cfg.u / (1.0 - cfg.u)))
    a_z = float(np.log((cfg.w - cfg.w * cfg.u) / (1.0 - cfg.w)))
    return a_z, a_y


def simplified_log_prior(atlas_voxels: np.ndarray, cfg: SimplifiedPriorConfig, table: ComboTable) -> np.ndarray:
    """Per-voxel normalized log prior over combinations, (I, C)."""
    a_z, a_y = simplified_biases(cfg)
    return normalized(combo_log_prior(log_atlas(atlas_voxels), a_z, a_y, table))


@dataclass(frozen=True)
class GemConfig:
    max_iter: int = 100
    rel_tol: float = 1e-6
    prior: SimplifiedPriorConfig = SimplifiedPriorConfig()
    flip_fraction: float = 0.2
    seed: int = 0
    tie_core: bool = True


@dataclass(eq=False)
class GemState:
    theta: Theta
    resp: np.ndarray  # (I, G)
    objective: float
    trace: list = field(default_factory=list)
    tied: bool = False


@dataclass(eq=False)
class GemProblem:
    """Everything held fixed across GEM iterations."""

    voxels: np.ndarray  # (I, N)
    log_prior: np.ndarray  # (I, C), normalized
    table: ComboTable
    hyper: HyperPriors
    basis: BiasBasis | None
    bias_enabled: tuple[bool, ...]

    @classmethod
    def build(cls, data: MultiChannelImage, atlas_voxels, hyper, cfg: GemConfig, mapping: GmmMapping,
              basis: BiasBasis | None):
        table = ComboTable.from_mapping(mapping)
        return cls(data.voxels(), simplified_log_prior(atlas_voxels, cfg.prior, table), table, hyper, basis,
                   data.bias_enabled)


# ---------------------------------------------------------------- E step


def responsibilities(problem: GemProblem, theta: Theta):
    """Component posteriors t_i^{xg} and the data part of the objective."""
    wc = weighted_component_logs(residuals(problem.voxels, theta, problem.basis), theta)
    gll = gmm_log_likelihoods(wc, theta.layout)
    W = combo_log_weights(gll, problem.log_prior, problem.table)
    lse = logsumexp(W, axis=1)
    with np.errstate(invalid="ignore"):
        qc = np.exp(W - lse[:, None])
    qx = np.nan_to_num(qc) @ problem.table.gmm_indicator()
    gof = theta.layout.gmm_of
    with np.errstate(invalid="ignore"):
        within = np.exp(wc - gll[:, gof])
    t = qx[:, gof] * np.nan_to_num(within)
    return t, float(lse.sum())


def objective(problem: GemProblem, theta: Theta) -> float:
    return responsibilities(problem, theta)[1] + log_prior_theta(theta, problem.hyper)


def _state(problem: GemProblem, theta: Theta, trace, tied) -> GemState:
    t, data_term = responsibilities(problem, theta)
    obj = data_term + log_prior_theta(theta, problem.hyper)
    return GemState(theta, t, obj, list(trace) + [obj], tied)


# ---------------------------------------------------------------- M step


def _scatter(r: np.ndarray, w: np.ndarray, mu: np.ndarray) -> np.ndarray:
    d = r - mu
    return (d * w[:, None]).T @ d


def tie_components(theta: Theta, x: int = CORE) -> Theta:
    """Make every component of mixture ``x`` identical (equal weights, pooled moments)."""
    s = theta.layout.slice(x)
    g = s.stop - s.start
    w = theta.weights.copy()
    mu = theta.means.copy()
    cov = theta.covs.copy()
    w[s] = 1.0 / g
    mu[s] = theta.means[s].mean(axis=0)
    cov[s] = theta.covs[s].mean(axis=0)
    return theta.update(weights=w, means=mu, covs=cov)


def bias_system(problem: GemProblem, theta: Theta, t: np.ndarray, resid_nobias: np.ndarray):
    """Precision and right-hand side of the bias-coefficient conditional.

    Only channels with bias enabled take part; the others keep C = 0.
    """
    basis = problem.basis
    enabled = [n for n, e in enumerate(problem.bias_enabled) if e]
    P = basis.n_basis
    prec_g = np.linalg.inv(theta.covs)  # (G, N, N)
    n_ch = theta.n_channels
    lam = (t @ prec_g.reshape(len(prec_g), -1)).reshape(-1, n_ch, n_ch)  # (I, N, N)
    R = np.einsum("imn,in->im", lam, resid_nobias) - t @ np.einsum("gmn,gn->gm", prec_g, theta.means)
    nb = len(enabled)
    H = np.zeros((nb * P, nb * P))
    rhs = np.zeros(nb * P)
    for a, m in enumerate(enabled):
        rhs[a * P:(a + 1) * P] = basis.project(R[:, m])
        for c in range(a, nb):
            n = enabled[c]
            blk = basis.gram(lam[:, m, n])
            H[a * P:(a + 1) * P, c * P:(c + 1) * P] = blk
            if c != a:
                H[c * P:(c + 1) * P, a * P:(a + 1) * P] = blk.T
    return enabled, 0.5 * (H + H.T), rhs


def m_step(problem: GemProblem, state: GemState) -> Theta:
    theta = state.theta
    lay = theta.layout
    t = state.resp
    hyper = problem.hyper
    n_ch = theta.n_channels
    r = residuals(problem.voxels, theta, problem.basis)
    N = t.sum(axis=0)
    core = lay.slice(CORE)
    tied = state.tied

    # mixture weights
    w = theta.weights.copy()
    for x in range(lay.n_gmms):
        s = lay.slice(x)
        if tied and x == CORE:
            w[s] = 1.0 / (s.stop - s.start)
            continue
        a = hyper.alpha0 + N[s] - 1.0
        if a.sum() > 0:
            w[s] = a / a.sum()

    # means: constrained mode
    safe = np.maximum(N, EMPTY)
    m = (t.T @ r) / safe[:, None]
    S_blocks = theta.covs / safe[:, None, None]
    empty = N < EMPTY
    m[empty] = theta.means[empty]
    if tied:
        Nc = N[core].sum()
        if Nc >= EMPTY:
            m[core.start] = (t[:, core].sum(axis=1) @ r) / Nc
            S_blocks[core.start] = theta.covs[core.start] / Nc
        else:
            empty[core.start] = True
        empty[core.start + 1:core.stop] = True
    fixed = np.repeat(empty, n_ch)
    qp = solve_constrained_means(m.reshape(-1), S_blocks, hyper.constraints.A, hyper.constraints.b,
                                 fixed=fixed, x0=theta.stacked_means())
    mu = qp.mu.reshape(lay.total, n_ch)
    if tied:
        mu[core] = mu[core.start]

    # covariances: conditional IW modes
    cov = theta.covs.copy()
    gof = lay.gmm_of
    for g in range(lay.total):
        if tied and core.start <= g < core.stop:
            continue
        x = gof[g]
        denom = hyper.nu[x] + N[g] + n_ch + 1
        S = hyper.scatter[x] + (_scatter(r, t[:, g], mu[g]) if N[g] >= EMPTY else 0.0)
        if denom > 0 and np.linalg.eigvalsh(S).min() > 0:
            cov[g] = 0.5 * (S + S.T) / denom
    if tied:
        g0 = core.start
        k = core.stop - core.start
        tc = t[:, core].sum(axis=1)
        S = k * hyper.scatter[CORE] + _scatter(r, tc, mu[g0])
        denom = k * (hyper.nu[CORE] + n_ch + 1) + N[core].sum()
        if denom > 0 and np.linalg.eigvalsh(S).min() > 0:
            cov[core] = 0.5 * (S + S.T) / denom

    new = theta.update(weights=w, means=mu, covs=cov)

    # bias field coefficients
    if problem.basis is not None and any(problem.bias_enabled):
        enabled, H, rhs = bias_system(problem, new, t, problem.voxels)
        c = np.linalg.solve(H, rhs)
        C = np.zeros_like(theta.bias)
        P = problem.basis.n_basis
        for a, ch in enumerate(enabled):
            C[ch] = c[a * P:(a + 1) * P]
        new = new.update(bias=C)
    return new


def gem_step(problem: GemProblem, state: GemState) -> GemState:
    return _state(problem, m_step(problem, state), state.trace, state.tied)


# ---------------------------------------------------------------- initialization


def _weighted_moments(Y: np.ndarray, w: np.ndarray):
    s = w.sum()
    if s <= 0:
        w = np.ones(Y.shape[0])
        s = float(Y.shape[0])
    mean = (w @ Y) / s
    d = Y - mean
    cov = (d * w[:, None]).T @ d / s
    cov = 0.5 * (cov + cov.T) + 1e-6 * np.diag(np.maximum(np.diag(cov), 1e-6))
    return mean, cov


def init_theta(data: MultiChannelImage, atlas_voxels: np.ndarray, mapping: GmmMapping, hyper: HyperPriors | None = None,
               distances=TUMOR_DISTANCES, n_basis: int = 64, aliases=None) -> Theta:
    """Atlas-weighted moments for normal mixtures; tumor means offset from brain statistics.

    Multi-component mixtures start with their means spread by half a
    channel standard deviation around the atlas-weighted mean.  The result
    is projected onto the constraint set when ``hyper`` carries one.
    """
    Y = data.voxels()
    n_ch = Y.shape[1]
    lay = ComponentLayout.from_mapping(mapping)
    table = mapping.normal_table
    weights = np.zeros(lay.total)
    means = np.zeros((lay.total, n_ch))
    covs = np.zeros((lay.total, n_ch, n_ch))
    brain_w = atlas_voxels[:, sorted(mapping.brain_set)].sum(axis=1)
    b_mean, b_cov = _weighted_moments(Y, brain_w)
    b_std = np.sqrt(np.diag(b_cov))

    tags = [canonical_tag(t, aliases) for t in data.tags]
    for x in range(lay.n_gmms):
        s = lay.slice(x)
        G = s.stop - s.start
        weights[s] = 1.0 / G
        if x in (CORE, EDEMA):
            row = distances["core" if x == CORE else "edema"]
            off = np.zeros(n_ch)
            for c, tag in enumerate(tags):
                if tag == "CT":
                    continue
                if tag not in row:
                    raise ValueError(f"no tumor initialization distance for modality {data.tags[c]!r}")
                off[c] = row[tag]
            means[s] = b_mean + off * b_std
            covs[s] = b_cov
            continue
        w = atlas_voxels[:, table == x].sum(axis=1)
        mean, cov = _weighted_moments(Y, w)
        std = np.sqrt(np.diag(cov))
        for k, g in enumerate(range(s.start, s.stop)):
            means[g] = mean + (k - (G - 1) / 2.0) * 0.5 * std
            covs[g] = cov
    theta = Theta(weights, means, covs, np.zeros((n_ch, n_basis)), lay)
    if hyper is not None and hyper.constraints.n_rows:
        proj = solve_constrained_means(theta.stacked_means(), np.eye(lay.total * n_ch),
                                       hyper.constraints.A, hyper.constraints.b)
        theta = theta.update(means=proj.mu.reshape(lay.total, n_ch))
    return theta


# ---------------------------------------------------------------- MAP state


def map_labels(problem: GemProblem, theta: Theta) -> np.ndarray:
    """Index of the most probable combination per voxel (lowest index on ties)."""
    wc = weighted_component_logs(residuals(problem.voxels, theta, problem.basis), theta)
    W = combo_log_weights(gmm_log_likelihoods(wc, theta.layout), problem.log_prior, problem.table)
    return np.argmax(W, axis=1)


def flip_edema(z: np.ndarray, y: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Turn a uniformly random ``fraction`` of edema voxels (z=1, y=0) into core."""
    y = y.copy()
    ed = np.flatnonzero(z & ~y)
    k = int(round(fraction * ed.size))
    if k:
        pick = rngmod.generator(seed, rngmod.FLIP).choice(ed.size, size=k, replace=False)
        y[ed[np.sort(pick)]] = True
    return y


def map_initial_state(problem: GemProblem, theta: Theta, shape, flip_fraction: float = 0.2, seed: int = 0,
                      brain_set=BRAIN) -> JointLabelState:
    choice = map_labels(problem, theta)
    l, z, y = label_arrays(choice, problem.table)
    y = flip_edema(z, y, flip_fraction, seed)
    return JointLabelState(unflat(l, shape), unflat(z, shape), unflat(y, shape), brain_set)


@dataclass(eq=False)
class GemResult:
    theta: Theta
    state: JointLabelState
    trace: list
    iterations: int
    converged: bool


def run_gem(data: MultiChannelImage, atlas_voxels: np.ndarray, hyper: HyperPriors, cfg: GemConfig = GemConfig(),
            mapping: GmmMapping | None = None, basis: BiasBasis | None = None, theta0: Theta | None = None,
            aliases=None) -> GemResult:
    mapping = mapping or GmmMapping()
    problem = GemProblem.build(data, atlas_voxels, hyper, cfg, mapping, basis)
    n_basis = basis.n_basis if basis is not None else 0
    theta = theta0 if theta0 is not None else init_theta(data, atlas_voxels, mapping, hyper, n_basis=n_basis,
                                                         aliases=aliases)
    if cfg.tie_core:
        theta = tie_components(theta)
    state = _state(problem, theta, [], cfg.tie_core)
    converged = False
    it = 0
    while it < cfg.max_iter:
        prev = state.objective
        state = gem_step(problem, state)
        it += 1
        if state.objective < prev - 1e-8 * abs(prev):
            log.warning("GEM objective decreased: %.12g -> %.12g", prev, state.objective)
        if abs(state.objective - prev) < cfg.rel_tol * abs(prev):
            converged = True
            break
    # the tie only guides the simplified model; the sampler starts untied
    init = map_initial_state(problem, state.theta, data.shape.as_tuple(), cfg.flip_fraction, cfg.seed,
                             mapping.brain_set)
    return GemResult(state.theta, init, state.trace, it, converged)
