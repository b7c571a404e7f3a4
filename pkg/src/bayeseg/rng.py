"""Counter-based random streams.

Every parallel lane (voxel, hidden unit) derives its uniform from
``(seed, stream, sweep, index)`` alone, so draws do not depend on how
work is split across threads.  Small sequential draws (Dirichlet,
inverse-Wishart, truncated normals) use a numpy ``Generator`` seeded
from the same triple.
"""
from __future__ import annotations

import numpy as np

from . import kernels

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# stream tags
LABELS = 1
HIDDEN_Z = 2
HIDDEN_Y = 3
COMPONENTS = 4
THETA = 5
FLIP = 6
PHANTOM = 7
TRAIN = 8
MRF = 9


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, stream: int, sweep: int = 0) -> int:
    """64-bit key for one (seed, stream, sweep) substream."""
    k = _finalize((int(seed) + _GOLDEN) & _MASK)
    k = _finalize(((k ^ int(stream)) + _GOLDEN) & _MASK)
    k = _finalize(((k ^ int(sweep)) + _GOLDEN) & _MASK)
    return k


def counter_uniforms(seed: int, stream: int, sweep: int, n: int, start: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) for lane indices ``start .. start + n - 1``."""
    return kernels.counter_uniform(stream_key(seed, stream, sweep), start, n)


class CounterStream:
    """Stateless-per-lane uniform source with a ``random`` method.

    Successive calls hand out consecutive lane ranges, which keeps
    distinct draws within one sweep on distinct counters.
    """

    def __init__(self, seed: int, stream: int, sweep: int = 0):
        self.key = stream_key(seed, stream, sweep)
        self.offset = 0

    def random(self, size=None) -> np.ndarray:
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape)) if shape else 1
        u = kernels.counter_uniform(self.key, self.offset, n)
        self.offset += n
        return u.reshape(shape) if shape else u[0]


def generator(seed: int, stream: int, sweep: int = 0) -> np.random.Generator:
    """Sequential numpy generator for the (seed, stream, sweep) triple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream), int(sweep)])))
