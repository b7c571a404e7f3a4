"""Pairwise 26-neighbour MRF tumor prior, a drop-in for the shape models.

Each voxel's z (and y) pays beta for every neighbour that disagrees.  The
sweep is chromatic: the eight parity classes of (x, y, z) are updated in
turn, so voxels updated together never neighbour each other and every
voxel sees its neighbours' latest values.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import rng as rngmod
from .gibbs import LabelProblem, draw_combos, label_log_weights
from .likelihood import Theta, residuals, weighted_component_logs
from .volume import flat, unflat


@dataclass(frozen=True)
class MrfConfig:
    beta_z: float = 4.0
    beta_y: float = 1.0

    def __post_init__(self):
        if self.beta_z < 0 or self.beta_y < 0:
            raise ValueError("pairwise weights must be nonnegative")


def color_classes(shape) -> np.ndarray:
    """Parity colour 0..7 of every voxel, flat x-fastest order."""
    x, y, z = np.indices(shape)
    return flat((x % 2) + 2 * (y % 2) + 4 * (z % 2))


def in_grid_neighbors(shape) -> np.ndarray:
    """|N_i|: 26 inside, fewer on faces, edges and corners."""
    return kernels.neighbor_count26(np.ones(shape, dtype=np.uint8))


def pairwise_field(mask: np.ndarray, n_nb: np.ndarray, beta: float) -> np.ndarray:
    """Log-odds added to a voxel's 1-state: -beta (|N_i| - 2 k_i), k = neighbours set."""
    k = kernels.neighbor_count26(mask.astype(np.uint8)).astype(np.float64)
    return -beta * (n_nb - 2.0 * k)


def sample_labels_mrf(problem: LabelProblem, theta: Theta, choice_prev: np.ndarray, cfg: MrfConfig, rng,
                      wc: np.ndarray | None = None) -> np.ndarray:
    """One chromatic sweep over all voxels; returns the new combination indices.

    ``rng`` supplies one uniform per voxel in flat order, so with both betas
    zero the draws equal ``sample_labels`` with zero shape fields.
    """
    if wc is None:
        wc = weighted_component_logs(residuals(problem.voxels, theta, problem.basis), theta)
    shape = problem.shape
    t = problem.table
    base = label_log_weights(problem, wc, theta, 0.0, 0.0)
    u = rng.random(problem.n_voxels)
    choice = np.array(choice_prev, dtype=np.int64)
    if cfg.beta_z == 0 and cfg.beta_y == 0:
        return draw_combos(base, u)
    colors = color_classes(shape)
    n_nb = flat(in_grid_neighbors(shape)).astype(np.float64)
    zc = t.z.astype(np.float64)
    yc = t.y.astype(np.float64)
    for c in range(8):
        idx = np.flatnonzero(colors == c)
        if idx.size == 0:
            continue
        fz = flat(pairwise_field(unflat(t.z[choice], shape), unflat(n_nb, shape), cfg.beta_z))[idx]
        fy = flat(pairwise_field(unflat(t.y[choice], shape), unflat(n_nb, shape), cfg.beta_y))[idx]
        logw = base[idx] + fz[:, None] * zc[None, :] + fy[:, None] * yc[None, :]
        choice[idx] = draw_combos(logw, u[idx])
    return choice


def mrf_sampler(cfg: MrfConfig, seed: int):
    """Label-step callable for ``gibbs.run_chain``."""

    def step(problem, theta, choice, wc, sweep):
        return sample_labels_mrf(problem, theta, choice, cfg, rngmod.CounterStream(seed, rngmod.LABELS, sweep), wc)

    return step


def beta_grid(lo: float = 0.0, hi: float = 5.0, step: float = 0.5):
    """All (beta_z, beta_y) pairs on a square grid, lexicographic."""
    vals = np.round(np.arange(lo, hi + 0.5 * step, step), 10)
    return list(itertools.product(vals.tolist(), vals.tolist()))


def grid_search(score, candidates) -> tuple[tuple[float, float], dict]:
    """Best-scoring (beta_z, beta_y); ties go to the lexicographically smallest pair.

    ``score(beta_z, beta_y)`` returns a number to maximize.
    """
    cands = sorted({(float(a), float(b)) for a, b in candidates})
    if not cands:
        raise ValueError("empty candidate grid")
    scores = {c: float(score(*c)) for c in cands}
    best = max(cands, key=lambda c: (scores[c], tuple(-v for v in c)))
    return best, scores
