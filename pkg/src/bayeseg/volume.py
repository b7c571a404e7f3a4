"""Voxel-grid containers and shared preprocessing.

Volumes are numpy arrays indexed ``[x, y, z]``.  Where voxels are laid
out as a flat vector (RNG lanes, bias-field basis rows, reductions) the
order is x-fastest, i.e. ``ravel(order="F")``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .labels import BRAIN, K, allowed


@dataclass(frozen=True)
class GridShape:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"grid counts must be >= 1, got {self.as_tuple()}")

    @classmethod
    def of(cls, shape) -> "GridShape":
        if isinstance(shape, GridShape):
            return shape
        nx, ny, nz = (int(s) for s in shape)
        return cls(nx, ny, nz)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz


def flat(vol: np.ndarray) -> np.ndarray:
    """Flatten the three spatial axes (the last three) x-fastest."""
    vol = np.asarray(vol)
    if vol.ndim == 3:
        return vol.ravel(order="F")
    lead = vol.shape[:-3]
    return vol.reshape(lead + (-1,), order="F")


def unflat(vec: np.ndarray, shape) -> np.ndarray:
    shape = GridShape.of(shape).as_tuple()
    vec = np.asarray(vec)
    if vec.ndim == 1:
        return vec.reshape(shape, order="F")
    return vec.reshape(vec.shape[:-1] + shape, order="F")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


KNOWN_TAGS = ("FLAIR", "T1", "T1c", "T2", "CT", "FLAIR2", "DIR")


@dataclass(frozen=True, eq=False)
class MultiChannelImage:
    """N co-registered scalar channels on one grid.

    ``data`` has shape (N, nx, ny, nz).  ``bias_enabled`` defaults to True
    for every channel except CT.
    """

    data: np.ndarray
    tags: tuple[str, ...]
    bias_enabled: tuple[bool, ...] | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[0] < 1:
            raise ValueError("image data must have shape (N, nx, ny, nz)")
        tags = tuple(self.tags)
        if len(tags) != data.shape[0]:
            raise ValueError(f"{data.shape[0]} channels but {len(tags)} tags")
        if len(set(tags)) != len(tags):
            raise ValueError(f"modality tags must be unique: {tags}")
        bias = self.bias_enabled
        if bias is None:
            bias = tuple(t != "CT" for t in tags)
        if len(bias) != len(tags):
            raise ValueError("bias_enabled must have one flag per channel")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "bias_enabled", tuple(bool(b) for b in bias))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> GridShape:
        return GridShape.of(self.data.shape[1:])

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def voxels(self) -> np.ndarray:
        """(I, N) matrix of voxel intensity vectors, x-fastest."""
        return np.ascontiguousarray(flat(self.data).T)

    def channel(self, tag: str) -> np.ndarray:
        return self.data[self.tags.index(tag)]


def log_transform(raw: MultiChannelImage, floor: float = 1e-4) -> MultiChannelImage:
    """Natural log of ``max(raw, floor)`` channel-wise; tags are preserved."""
    if not floor > 0:
        raise ValueError("floor must be positive")
    bad = ~np.isfinite(raw.data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite raw intensity at (channel, x, y, z) = {idx}")
    return MultiChannelImage(
        np.log(np.maximum(raw.data, floor)), raw.tags, raw.bias_enabled, raw.spacing
    )


def flip_augment(mask: np.ndarray) -> list[np.ndarray]:
    """The eight axis-reflection images of a binary mask (identity first)."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError("flip_augment expects a 3D mask")
    out = []
    for fx in (False, True):
        for fy in (False, True):
            for fz in (False, True):
                axes = [a for a, f in zip(range(3), (fx, fy, fz)) if f]
                out.append(np.ascontiguousarray(np.flip(mask, axis=axes) if axes else mask.copy()))
    return out


@dataclass(frozen=True, eq=False)
class JointLabelState:
    """Per-voxel (l, z, y): normal label, tumor-affected flag, core flag."""

    l: np.ndarray
    z: np.ndarray
    y: np.ndarray
    brain_set: frozenset[int] = BRAIN

    def __post_init__(self):
        l = np.asarray(self.l)
        if l.ndim != 3:
            raise ValueError("label maps must be 3D")
        z = np.asarray(self.z)
        y = np.asarray(self.y)
        if z.shape != l.shape or y.shape != l.shape:
            raise ValueError("l, z, y must share one grid")
        if l.size and (l.min() < 0 or l.max() >= K):
            raise ValueError(f"normal labels must lie in 0..{K - 1}")
        for name, v in (("z", z), ("y", y)):
            if not np.isin(v, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
        ok = allowed(l, z, y, self.brain_set)
        if not ok.all():
            bad = tuple(int(i) for i in np.argwhere(~ok)[0])
            raise ValueError(f"forbidden (l, z, y) triple at voxel {bad}")
        object.__setattr__(self, "l", _frozen(l.astype(np.uint8)))
        object.__setattr__(self, "z", _frozen(z.astype(bool)))
        object.__setattr__(self, "y", _frozen(y.astype(bool)))

    @property
    def shape(self) -> GridShape:
        return GridShape.of(self.l.shape)

    @classmethod
    def from_flat(cls, l, z, y, shape, brain_set=BRAIN) -> "JointLabelState":
        return cls(unflat(l, shape), unflat(z, shape), unflat(y, shape), brain_set)

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return flat(self.l), flat(self.z), flat(self.y)

    def tobytes(self) -> bytes:
        return self.l.tobytes() + self.z.tobytes() + self.y.tobytes()

    def equals(self, other: "JointLabelState") -> bool:
        return (
            np.array_equal(self.l, other.l)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.y, other.y)
        )


def count_label(state: JointLabelState, predicate: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> int:
    """Number of voxels where ``predicate(l, z, y)`` holds."""
    return int(np.count_nonzero(predicate(state.l, state.z, state.y)))


def stack_channels(channels: Sequence[np.ndarray], tags: Sequence[str], **kw) -> MultiChannelImage:
    return MultiChannelImage(np.stack([np.asarray(c, dtype=np.float64) for c in channels]), tuple(tags), **kw)
