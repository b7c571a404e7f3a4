"""Hot-loop dispatch: compiled Cython kernels when built, numpy otherwise.

Set ``BAYESEG_PURE_PYTHON=1`` to force the numpy path.  The thread count
comes from ``BAYESEG_THREADS`` (default 1) and never changes results.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

if os.environ.get("BAYESEG_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"
    else:
        BACKEND = "cython"

_threads = max(1, int(os.environ.get("BAYESEG_THREADS", "1") or 1))


def set_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def get_threads() -> int:
    return _threads


def counter_uniform(key: int, start: int, n: int) -> np.ndarray:
    return _impl.counter_uniform(int(key), int(start), int(n), _threads)


def categorical(logw: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw from unnormalized log-weights.

    Returns -1 for rows whose weights are all zero.
    """
    logw = np.ascontiguousarray(logw, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    return np.asarray(_impl.categorical(logw, u, _threads))


def neighbor_count26(mask: np.ndarray) -> np.ndarray:
    """Number of set voxels among the in-grid 26-neighbours of each voxel."""
    v = np.ascontiguousarray(mask, dtype=np.uint8)
    return np.asarray(_impl.neighbor_count26(v, _threads))


def min_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each row of ``a`` to its nearest row of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return np.asarray(_impl.min_distances(a, b, _threads))
