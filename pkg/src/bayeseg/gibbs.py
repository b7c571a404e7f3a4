"""Blocked Gibbs sampler over theta, the cRBM hidden units, and (l, z, y).

One outer sweep, in order: a single pass over the likelihood parameters
(component assignments t, weights, constrained means, covariances, bias
coefficients), the hidden units of both shape models given the current
tumor and core masks, and finally every voxel's label triple given theta
and the two visible fields.  The last S sweeps are tallied and the final
segmentation is a per-variable majority vote.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from . import rng as rngmod
from .crbm import CrbmParams, _Spectra
from .labels import BRAIN, LABELS, K, GmmMapping, allowed
from .likelihood import (
    BiasBasis,
    HyperPriors,
    Theta,
    gmm_log_likelihoods,
    log_prior_theta,
    residuals,
    weighted_component_logs,
)
from .posterior import ComboTable, combo_log_prior, combo_log_weights, log_atlas
from .sampling import sample_dirichlet, sample_gaussian_precision, sample_inverse_wishart, sample_truncated_mvn
from .volume import JointLabelState, MultiChannelImage, flat, unflat

log = logging.getLogger(__name__)

EMPTY = 1e-8


class RestrictionViolation(RuntimeError):
    """A sampled state contained a forbidden (l, z, y) triple."""


@dataclass(frozen=True)
class ChainConfig:
    burn_in: int = 200
    samples: int = 50
    seed: int = 0
    inner_sweeps: int = 1  # truncated-normal coordinate sweeps per outer sweep

    def __post_init__(self):
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.samples < 1:
            raise ValueError("need at least one retained sample")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be >= 1")

    @property
    def sweeps(self) -> int:
        return self.burn_in + self.samples


@dataclass(eq=False)
class LabelProblem:
    """Data, atlas and hyperparameters held fixed along the chain."""

    voxels: np.ndarray  # (I, N)
    log_pi: np.ndarray  # (I, K)
    shape: tuple[int, int, int]
    table: ComboTable
    hyper: HyperPriors
    basis: BiasBasis | None
    bias_enabled: tuple[bool, ...]
    brain_set: frozenset = BRAIN

    @classmethod
    def build(cls, data: MultiChannelImage, atlas_voxels: np.ndarray, hyper: HyperPriors,
              basis: BiasBasis | None = None, mapping: GmmMapping | None = None) -> "LabelProblem":
        mapping = mapping or GmmMapping()
        if atlas_voxels.shape[0] != data.shape.size:
            raise ValueError("atlas and image grids differ")
        return cls(data.voxels(), log_atlas(atlas_voxels), data.shape.as_tuple(), ComboTable.from_mapping(mapping),
                   hyper, basis, data.bias_enabled, mapping.brain_set)

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[0]

    def combo_index(self, state: JointLabelState) -> np.ndarray:
        """Combination index of every voxel of ``state``."""
        lut = -np.ones(K * 4, dtype=np.int64)
        t = self.table
        lut[t.l * 4 + t.z * 2 + t.y] = np.arange(t.size)
        l, z, y = state.flat()
        idx = lut[l.astype(np.int64) * 4 + z * 2 + y]
        if (idx < 0).any():
            raise RestrictionViolation("state contains forbidden (l, z, y) triples")
        return idx

    def state(self, choice: np.ndarray) -> JointLabelState:
        t = self.table
        return JointLabelState.from_flat(t.l[choice], t.z[choice].astype(bool), t.y[choice].astype(bool), self.shape,
                                         self.brain_set)


# ---------------------------------------------------------------- labels


def label_log_weights(problem: LabelProblem, wc: np.ndarray, theta: Theta, field_z, field_y) -> np.ndarray:
    """Unnormalized log weights over allowed combinations, (I, C)."""
    gll = gmm_log_likelihoods(wc, theta.layout)
    prior = combo_log_prior(problem.log_pi, field_z, field_y, problem.table)
    return combo_log_weights(gll, prior, problem.table)


def draw_combos(logw: np.ndarray, u: np.ndarray) -> np.ndarray:
    choice = kernels.categorical(logw, u)
    if (choice < 0).any():
        raise FloatingPointError("voxel with no admissible label combination")
    return choice.astype(np.int64)


def sample_labels(problem: LabelProblem, theta: Theta, field_z, field_y, rng, wc: np.ndarray | None = None):
    """One draw of every voxel's (l, z, y) from its conditional.

    ``field_z``/``field_y`` are the visible inputs of the two shape models on
    the image grid (scalars for a constant bias); ``rng`` supplies one
    uniform per voxel.  Returns (combination indices, component log terms).
    """
    if wc is None:
        wc = weighted_component_logs(residuals(problem.voxels, theta, problem.basis), theta)
    fz = flat(field_z) if np.ndim(field_z) == 3 else field_z
    fy = flat(field_y) if np.ndim(field_y) == 3 else field_y
    logw = label_log_weights(problem, wc, theta, fz, fy)
    return draw_combos(logw, rng.random(problem.n_voxels)), wc


# ---------------------------------------------------------------- hidden units


class ShapeField:
    """Cached filter spectra of one shape model on the image grid."""

    def __init__(self, params: CrbmParams, shape):
        self.params = params
        self.spec = _Spectra(params, shape)

    def sample_hidden(self, mask: np.ndarray, rng) -> np.ndarray:
        p = expit(self.spec.hidden_input(mask))
        return (rng.random(p.size).reshape(p.shape) < p).astype(np.uint8)

    def visible_field(self, H: np.ndarray) -> np.ndarray:
        return self.spec.visible_input(H)


# ---------------------------------------------------------------- theta


def sample_components(wc: np.ndarray, gmm: np.ndarray, theta: Theta, rng) -> np.ndarray:
    """Global component index per voxel, drawn within the voxel's mixture."""
    tab = theta.layout.table()  # (X, Gmax)
    cols = tab[gmm]  # (I, Gmax)
    if tab.shape[1] == 1:
        return cols[:, 0].copy()
    rows = np.arange(wc.shape[0])[:, None]
    logits = np.where(cols >= 0, wc[rows, np.maximum(cols, 0)], -np.inf)
    k = draw_combos(logits, rng.random(wc.shape[0]))
    return cols[np.arange(wc.shape[0]), k]


def _bias_system(problem: LabelProblem, theta: Theta, comp: np.ndarray):
    """Precision and right-hand side of the Gaussian bias conditional for one-hot t."""
    basis = problem.basis
    enabled = [n for n, e in enumerate(problem.bias_enabled) if e]
    P = basis.n_basis
    prec = np.linalg.inv(theta.covs)  # (G, N, N)
    lam = prec[comp]  # (I, N, N)
    d = problem.voxels
    R = np.einsum("imn,in->im", lam, d) - np.einsum("gmn,gn->gm", prec, theta.means)[comp]
    nb = len(enabled)
    H = np.zeros((nb * P, nb * P))
    rhs = np.zeros(nb * P)
    for a, m in enumerate(enabled):
        rhs[a * P:(a + 1) * P] = basis.project(R[:, m])
        for c in range(a, nb):
            blk = basis.gram(lam[:, m, enabled[c]])
            H[a * P:(a + 1) * P, c * P:(c + 1) * P] = blk
            if c != a:
                H[c * P:(c + 1) * P, a * P:(a + 1) * P] = blk.T
    return enabled, 0.5 * (H + H.T), rhs


def sample_theta(problem: LabelProblem, gmm: np.ndarray, theta: Theta, rng, component_rng,
                 wc: np.ndarray | None = None, inner_sweeps: int = 1) -> Theta:
    """Single sweep t -> gamma -> mu -> Sigma -> C given the voxel mixtures ``gmm``.

    Components that receive no voxels draw weights and covariances from the
    prior and keep their mean (the mean prior is flat).
    """
    hyper = problem.hyper
    lay = theta.layout
    n_ch = theta.n_channels
    r = residuals(problem.voxels, theta, problem.basis)
    if wc is None:
        wc = weighted_component_logs(r, theta)
    comp = sample_components(wc, gmm, theta, component_rng)
    N = np.bincount(comp, minlength=lay.total).astype(np.float64)

    w = np.empty(lay.total)
    for x in range(lay.n_gmms):
        s = lay.slice(x)
        w[s] = sample_dirichlet(hyper.alpha0 + N[s], rng)

    empty = N < EMPTY
    safe = np.maximum(N, 1.0)
    sums = np.zeros((lay.total, n_ch))
    np.add.at(sums, comp, r)
    m = sums / safe[:, None]
    m[empty] = theta.means[empty]
    S_mu = theta.covs / safe[:, None, None]
    cons = hyper.constraints
    mu = sample_truncated_mvn(m.reshape(-1), S_mu, cons.A, cons.b, theta.stacked_means(), rng,
                              inner_sweeps=inner_sweeps, frozen=np.repeat(empty, n_ch))
    mu = mu.reshape(lay.total, n_ch)

    cov = np.empty_like(theta.covs)
    gof = lay.gmm_of
    order = np.argsort(comp, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(N.astype(np.int64))])
    for g in range(lay.total):
        x = gof[g]
        dev = r[order[bounds[g]:bounds[g + 1]]] - mu[g]
        S = hyper.scatter[x] + dev.T @ dev
        cov[g] = sample_inverse_wishart(0.5 * (S + S.T), hyper.nu[x] + N[g], rng)
        cov[g] = 0.5 * (cov[g] + cov[g].T)
    new = theta.update(weights=w, means=mu, covs=cov)

    if problem.basis is not None and any(problem.bias_enabled):
        enabled, H, rhs = _bias_system(problem, new, comp)
        c = sample_gaussian_precision(np.linalg.solve(H, rhs), H, rng)
        C = np.zeros_like(theta.bias)
        P = problem.basis.n_basis
        for a, ch in enumerate(enabled):
            C[ch] = c[a * P:(a + 1) * P]
        new = new.update(bias=C)
    return new


# ---------------------------------------------------------------- voting


@dataclass(eq=False)
class SampleAccumulator:
    n_voxels: int
    l: np.ndarray = None  # (I, K)
    z: np.ndarray = None  # (I, 2)
    y: np.ndarray = None  # (I, 2)
    count: int = 0
    bias_sum: np.ndarray | None = None

    def __post_init__(self):
        if self.l is None:
            self.l = np.zeros((self.n_voxels, K), dtype=np.int32)
            self.z = np.zeros((self.n_voxels, 2), dtype=np.int32)
            self.y = np.zeros((self.n_voxels, 2), dtype=np.int32)

    def add(self, l: np.ndarray, z: np.ndarray, y: np.ndarray, bias: np.ndarray | None = None) -> None:
        idx = np.arange(self.n_voxels)
        self.l[idx, l.astype(np.int64)] += 1
        self.z[idx, z.astype(np.int64)] += 1
        self.y[idx, y.astype(np.int64)] += 1
        self.count += 1
        if bias is not None:
            self.bias_sum = bias.copy() if self.bias_sum is None else self.bias_sum + bias

    def add_state(self, state: JointLabelState, bias=None) -> None:
        self.add(*state.flat(), bias=bias)

    def conserved(self) -> bool:
        return all((v.sum(axis=1) == self.count).all() for v in (self.l, self.z, self.y))

    @property
    def bias_mean(self) -> np.ndarray | None:
        return None if self.bias_sum is None else self.bias_sum / self.count

    def fractions(self) -> dict:
        """Vote fractions for z=1, y=1 and the winning l, each (I,)."""
        c = max(self.count, 1)
        return {"z": self.z[:, 1] / c, "y": self.y[:, 1] / c, "l": self.l.max(axis=1) / c}


def majority_vote(acc: SampleAccumulator, shape, brain_set=BRAIN) -> JointLabelState:
    """Per-variable argmax (lowest code on ties) with a restriction repair."""
    if acc.count < 1:
        raise ValueError("no samples accumulated")
    l = np.argmax(acc.l, axis=1)
    z = np.argmax(acc.z, axis=1).astype(bool)
    y = np.argmax(acc.y, axis=1).astype(bool)
    y &= z
    z &= np.isin(l, sorted(brain_set))
    y &= z
    return JointLabelState.from_flat(l, z, y, shape, brain_set)


# ---------------------------------------------------------------- chain


@dataclass(eq=False)
class ChainResult:
    state: JointLabelState  # majority vote
    last: JointLabelState  # final sample
    accumulator: SampleAccumulator
    theta: Theta
    trace: list = field(default_factory=list)
    forbidden: int = 0

    def trace_csv(self) -> str:
        return diagnostics_csv(self.trace)


def _trace_row(sweep: int, problem: LabelProblem, theta: Theta, wc: np.ndarray, choice: np.ndarray) -> dict:
    t = problem.table
    gll = gmm_log_likelihoods(wc, theta.layout)
    idx = np.arange(problem.n_voxels)
    surrogate = float(gll[idx, t.gmm[choice]].sum() + problem.log_pi[idx, t.l[choice]].sum())
    surrogate += log_prior_theta(theta, problem.hyper)
    row = {"sweep": sweep, "log_posterior": surrogate,
           "n_tumor": int(t.z[choice].sum()), "n_core": int(t.y[choice].sum())}
    counts = np.bincount(t.l[choice], minlength=K)
    for k, name in enumerate(LABELS):
        row[f"n_{name}"] = int(counts[k])
    return row


def diagnostics_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _check(problem: LabelProblem, choice: np.ndarray) -> None:
    t = problem.table
    bad = int((~allowed(t.l[choice], t.z[choice], t.y[choice], problem.brain_set)).sum())
    if bad:
        raise RestrictionViolation(f"{bad} voxels carry forbidden triples")


def run_chain(problem: LabelProblem, theta0: Theta, state0: JointLabelState, cfg: ChainConfig = ChainConfig(),
              crbm_z: CrbmParams | None = None, crbm_y: CrbmParams | None = None, label_sampler=None,
              progress=None) -> ChainResult:
    """Blocked Gibbs chain: theta, hidden units, then labels; ``label_sampler`` swaps the tumor prior.

    ``label_sampler(problem, theta, choice, wc, sweep)`` must return the new
    combination indices; by default the cRBM fields are used (a missing
    model contributes a zero field).
    """
    shape = problem.shape
    sz = ShapeField(crbm_z, shape) if crbm_z is not None else None
    sy = ShapeField(crbm_y, shape) if crbm_y is not None else None
    choice = problem.combo_index(state0)
    theta = theta0
    acc = SampleAccumulator(problem.n_voxels)
    trace = []
    wc = None
    seed = cfg.seed
    t = problem.table
    for s in range(1, cfg.sweeps + 1):
        theta = sample_theta(problem, t.gmm[choice], theta, rngmod.generator(seed, rngmod.THETA, s),
                             rngmod.CounterStream(seed, rngmod.COMPONENTS, s), wc=wc,
                             inner_sweeps=cfg.inner_sweeps)
        wc = weighted_component_logs(residuals(problem.voxels, theta, problem.basis), theta)
        if label_sampler is None:
            fz = fy = 0.0
            if sz is not None:
                Hz = sz.sample_hidden(unflat(t.z[choice], shape), rngmod.CounterStream(seed, rngmod.HIDDEN_Z, s))
                fz = sz.visible_field(Hz)
            if sy is not None:
                Hy = sy.sample_hidden(unflat(t.y[choice], shape), rngmod.CounterStream(seed, rngmod.HIDDEN_Y, s))
                fy = sy.visible_field(Hy)
            choice, _ = sample_labels(problem, theta, fz, fy, rngmod.CounterStream(seed, rngmod.LABELS, s), wc=wc)
        else:
            choice = label_sampler(problem, theta, choice, wc, s)
        _check(problem, choice)
        trace.append(_trace_row(s, problem, theta, wc, choice))
        if s > cfg.burn_in:
            acc.add(t.l[choice], t.z[choice], t.y[choice], bias=theta.bias)
        if progress is not None:
            progress(s, trace[-1])
    final = majority_vote(acc, shape, problem.brain_set)
    return ChainResult(final, problem.state(choice), acc, theta, trace, 0)
