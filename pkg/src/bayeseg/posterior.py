"""Per-voxel weights over the allowed (l, z, y) combinations.

Every label update in the package (simplified prior, cRBM prior, pairwise
MRF prior) has the same form

    log w_i(l, z, y) = log p_i(d_i | x(l, z, y)) + log pi_i(l) + z f^z_i + y f^y_i

and differs only in where the two tumor fields come from.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .labels import GmmMapping


@dataclass(frozen=True, eq=False)
class ComboTable:
    l: np.ndarray
    z: np.ndarray
    y: np.ndarray
    gmm: np.ndarray
    n_gmms: int

    @classmethod
    def from_mapping(cls, mapping: GmmMapping) -> "ComboTable":
        c = mapping.combos()
        return cls(c[:, 0].copy(), c[:, 1].copy(), c[:, 2].copy(), mapping.combo_gmm(), mapping.n_gmms)

    @property
    def size(self) -> int:
        return self.l.size

    def gmm_indicator(self) -> np.ndarray:
        """(C, X) one-hot of each combination's mixture."""
        out = np.zeros((self.size, self.n_gmms))
        out[np.arange(self.size), self.gmm] = 1.0
        return out


def log_atlas(atlas_voxels: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(atlas_voxels)


def combo_log_prior(log_pi: np.ndarray, field_z, field_y, table: ComboTable) -> np.ndarray:
    """log pi_i(l) + z f^z_i + y f^y_i for every allowed combination, (I, C)."""
    w = log_pi[:, table.l].copy()
    fz = np.broadcast_to(np.asarray(field_z, dtype=np.float64), (log_pi.shape[0],))
    fy = np.broadcast_to(np.asarray(field_y, dtype=np.float64), (log_pi.shape[0],))
    zc = table.z.astype(bool)
    yc = table.y.astype(bool)
    w[:, zc] += fz[:, None]
    w[:, yc] += fy[:, None]
    return w


def normalized(logw: np.ndarray) -> np.ndarray:
    return logw - logsumexp(logw, axis=1, keepdims=True)


def combo_log_weights(gmm_ll: np.ndarray, log_prior: np.ndarray, table: ComboTable) -> np.ndarray:
    return gmm_ll[:, table.gmm] + log_prior


def label_arrays(choice: np.ndarray, table: ComboTable):
    """Combination indices back to (l, z, y) flat arrays."""
    return table.l[choice].astype(np.uint8), table.z[choice].astype(bool), table.y[choice].astype(bool)
