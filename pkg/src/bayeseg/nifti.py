"""NIfTI-1 reading and writing for intensity volumes and label maps."""
from __future__ import annotations

import json
from pathlib import Path

import nibabel as nib
import numpy as np


def _affine(spacing) -> np.ndarray:
    return np.diag([float(s) for s in spacing] + [1.0])


def write_volume(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype=np.float64) -> Path:
    path = Path(path)
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), _affine(spacing))
    img.header.set_data_dtype(dtype)
    nib.save(img, str(path))
    return path


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Return (data, voxel spacing).  Data keeps its on-disk dtype."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    return data, spacing


def _sidecar(path: Path) -> Path:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return path.with_name(name[: -len(ext)] + ".json")
    return path.with_name(name + ".json")


def write_label_map(path, codes: np.ndarray, names: dict[int, str], spacing=(1.0, 1.0, 1.0)) -> Path:
    """uint8 label volume plus a sidecar JSON code-to-name table."""
    codes = np.asarray(codes)
    if codes.min() < 0 or codes.max() > 255:
        raise ValueError("label codes must fit in uint8")
    path = write_volume(path, codes.astype(np.uint8), spacing, dtype=np.uint8)
    _sidecar(path).write_text(json.dumps({str(k): v for k, v in sorted(names.items())}, indent=1))
    return path


def read_label_map(path) -> tuple[np.ndarray, dict[int, str]]:
    path = Path(path)
    data, _ = read_volume(path)
    side = _sidecar(path)
    names = {}
    if side.exists():
        names = {int(k): v for k, v in json.loads(side.read_text()).items()}
    return data.astype(np.uint8), names
