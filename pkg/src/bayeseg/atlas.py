"""Rasterized probabilistic atlas over the K normal labels (deformation fixed)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nifti
from .labels import BRAIN, K, LABELS, UNSPECIFIED
from .volume import GridShape, flat

SUM_TOLERANCE = 1e-3


@dataclass(frozen=True, eq=False)
class AtlasPrior:
    """Per-voxel label probabilities, array of shape (K, nx, ny, nz)."""

    probs: np.ndarray
    label_table: tuple[str, ...] = LABELS
    brain_set: frozenset[int] = BRAIN

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64, copy=True)
        if p.ndim != 4 or p.shape[0] != K:
            raise ValueError(f"atlas must have shape ({K}, nx, ny, nz), got {p.shape}")
        if len(self.label_table) != K:
            raise ValueError("label table must name all 17 labels")
        if (p < 0).any():
            raise ValueError("atlas probabilities must be nonnegative")
        dev = np.abs(p.sum(axis=0) - 1.0).max()
        if dev > 1e-6:
            raise ValueError(f"atlas vectors must sum to 1 (max deviation {dev:.2e})")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> GridShape:
        return GridShape.of(self.probs.shape[1:])

    def voxels(self) -> np.ndarray:
        """(I, K) probability matrix, x-fastest voxel order."""
        return np.ascontiguousarray(flat(self.probs).T)

    def brain_probability(self) -> np.ndarray:
        return self.probs[sorted(self.brain_set)].sum(axis=0)


def normalize(probs: np.ndarray, tolerance: float = SUM_TOLERANCE) -> np.ndarray:
    """Validate and renormalize; vectors already summing to 1 are left bit-exact."""
    p = np.asarray(probs, dtype=np.float64)
    if (p < 0).any():
        raise ValueError("negative atlas probability")
    s = p.sum(axis=0)
    dev = np.abs(s - 1.0)
    if dev.max() > tolerance:
        bad = tuple(int(i) for i in np.unravel_index(np.argmax(dev), s.shape))
        raise ValueError(f"atlas vector at voxel {bad} sums to {s[bad]:.6f}")
    fix = dev > 1e-12
    if fix.any():
        p = p.copy()
        p[:, fix] /= s[fix]
    return p


def add_unspecified_tissue(atlas: AtlasPrior, epsilon: float = 0.01) -> AtlasPrior:
    """Give the unspecified-brain-tissue label a constant prior, then renormalize."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if (atlas.probs[UNSPECIFIED] > 0).any():
        raise ValueError("atlas already carries the unspecified-tissue label")
    p = np.array(atlas.probs)
    p[UNSPECIFIED] = epsilon
    p /= p.sum(axis=0, keepdims=True)
    return AtlasPrior(p, atlas.label_table, atlas.brain_set)


def save_atlas(atlas: AtlasPrior, directory, epsilon_unspecified: float | None = 0.01) -> Path:
    """Write one float64 NIfTI volume per label plus ``atlas.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, name in enumerate(atlas.label_table):
        fname = f"atlas_{k:02d}_{name}.nii.gz"
        nifti.write_volume(directory / fname, atlas.probs[k])
        files.append(fname)
    manifest = {
        "labels": list(atlas.label_table),
        "brain_set": [atlas.label_table[k] for k in sorted(atlas.brain_set)],
        "epsilon_unspecified": epsilon_unspecified,
        "files": files,
    }
    path = directory / "atlas.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_atlas(path, expected_shape=None) -> AtlasPrior:
    """Load an atlas from its manifest (or the directory holding ``atlas.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "atlas.json"
    if not path.exists():
        raise FileNotFoundError(path)
    manifest = json.loads(path.read_text())
    labels = tuple(manifest["labels"])
    if len(labels) != K:
        raise ValueError(f"atlas manifest lists {len(labels)} labels, need {K}")
    brain = frozenset(labels.index(n) for n in manifest["brain_set"])
    vols = [nifti.read_volume(path.parent / f)[0].astype(np.float64) for f in manifest["files"]]
    probs = np.stack(vols)
    if expected_shape is not None and probs.shape[1:] != GridShape.of(expected_shape).as_tuple():
        raise ValueError(f"atlas grid {probs.shape[1:]} does not match image grid {tuple(expected_shape)}")
    return AtlasPrior(normalize(probs), labels, brain)
