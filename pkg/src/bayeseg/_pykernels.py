"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_KERNEL26 = np.ones((3, 3, 3), dtype=np.int16)
_KERNEL26[1, 1, 1] = 0


def counter_uniform(key: int, start: int, n: int, num_threads: int = 1) -> np.ndarray:
    z = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    z *= _GOLDEN
    z += np.uint64(key)
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def categorical(logw: np.ndarray, u: np.ndarray, num_threads: int = 1) -> np.ndarray:
    n, k = logw.shape
    m = logw.max(axis=1)
    dead = m == -np.inf
    with np.errstate(invalid="ignore"):
        c = np.cumsum(np.exp(logw - m[:, None]), axis=1)
    target = u * c[:, -1]
    idx = (c <= target[:, None]).sum(axis=1)
    over = idx >= k
    if over.any():
        finite = np.isfinite(logw[over])
        idx[over] = k - 1 - np.argmax(finite[:, ::-1], axis=1)
    idx[dead] = -1
    return idx.astype(np.int32)


def neighbor_count26(v: np.ndarray, num_threads: int = 1) -> np.ndarray:
    return ndimage.convolve(v.astype(np.int16), _KERNEL26, mode="constant", cval=0)


def min_distances(a: np.ndarray, b: np.ndarray, num_threads: int = 1, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(a))
    bb = (b * b).sum(axis=1)
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = (blk * blk).sum(axis=1)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        # exact recomputation of the winner avoids cancellation error in the expansion
        j = np.argmin(d2, axis=1)
        out[s:s + chunk] = np.sqrt(((blk - b[j]) ** 2).sum(axis=1))
    return out
