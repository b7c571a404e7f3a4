"""Overlap and surface-distance scores for label maps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .labels import LABEL_CODE
from .volume import JointLabelState

BRUTE_FORCE_LIMIT = 10_000
_FACES = ndimage.generate_binary_structure(3, 1)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a & b| / (|a| + |b|); two empty maps agree perfectly."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    tot = a.sum() + b.sum()
    if tot == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / tot)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one face neighbor outside it (grid edge counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(np.pad(m, 1), structure=_FACES)[1:-1, 1:-1, 1:-1]
    return m & ~inner


def _points(mask: np.ndarray, spacing) -> np.ndarray:
    return np.argwhere(mask).astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def directed_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0), method: str = "auto") -> np.ndarray:
    """Distance (mm) from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    na, nb = int(sa.sum()), int(sb.sum())
    if method == "auto":
        method = "brute" if max(na, nb) < BRUTE_FORCE_LIMIT else "edt"
    if method == "brute":
        return kernels.min_distances(_points(sa, spacing), _points(sb, spacing))
    if method == "edt":
        dt = ndimage.distance_transform_edt(~sb, sampling=spacing)
        return dt[sa]
    raise ValueError(f"unknown method {method!r}")


def robust_hausdorff(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0), percentile: float = 95,
                     method: str = "auto") -> float:
    """Max of the two directed percentile surface distances; NaN when a map is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return float("nan")
    dab = directed_distances(a, b, spacing, method)
    dba = directed_distances(b, a, spacing, method)
    return float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))


def _labels(*names):
    codes = [LABEL_CODE[n] for n in names]
    return lambda s: np.isin(s.l, codes)


STRUCTURES = {
    "WT": lambda s: s.z.copy(),
    "TC": lambda s: s.z & s.y,
    "ED": lambda s: s.z & ~s.y,
    "BS": _labels("brainstem"),
    "EB": _labels("L-eye-tissue", "R-eye-tissue", "L-eye-fluid", "R-eye-fluid"),
    "ON": _labels("L-optic-nerve", "R-optic-nerve"),
    "CH": _labels("optic-chiasm"),
    "HC": _labels("L-hippocampus", "R-hippocampus"),
}


@dataclass
class EvalReport:
    dice: dict = field(default_factory=dict)
    hausdorff: dict = field(default_factory=dict)  # NaN: not computable
    voxels_pred: dict = field(default_factory=dict)
    voxels_truth: dict = field(default_factory=dict)

    def missing(self) -> list[str]:
        return [k for k, v in self.hausdorff.items() if not np.isfinite(v)]

    def to_dict(self) -> dict:
        return {
            k: {
                "dice": self.dice[k],
                "hausdorff_mm": None if not np.isfinite(self.hausdorff[k]) else self.hausdorff[k],
                "voxels_pred": self.voxels_pred[k],
                "voxels_truth": self.voxels_truth[k],
            }
            for k in self.dice
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["structure", "dice", "hausdorff_mm", "voxels_pred", "voxels_truth"])
        for k, row in self.to_dict().items():
            hd = "" if row["hausdorff_mm"] is None else f"{row['hausdorff_mm']:.6g}"
            w.writerow([k, f"{row['dice']:.6g}", hd, row["voxels_pred"], row["voxels_truth"]])
        return buf.getvalue()


def evaluate(pred: JointLabelState, truth: JointLabelState, structures=None, spacing=(1.0, 1.0, 1.0)) -> EvalReport:
    if pred.l.shape != truth.l.shape:
        raise ValueError("prediction and truth grids differ")
    names = list(structures) if structures is not None else list(STRUCTURES)
    rep = EvalReport()
    for name in names:
        fn = STRUCTURES[name] if isinstance(name, str) else name
        key = name if isinstance(name, str) else getattr(name, "__name__", str(name))
        p, t = fn(pred), fn(truth)
        rep.dice[key] = dice(p, t)
        rep.hausdorff[key] = robust_hausdorff(p, t, spacing)
        rep.voxels_pred[key] = int(p.sum())
        rep.voxels_truth[key] = int(t.sum())
    return rep
