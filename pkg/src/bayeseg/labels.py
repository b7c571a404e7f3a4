"""Normal head-structure labels, the brain subset, and the label-to-GMM map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Normal labels, brain structures first.  Codes are 0-based positions here.
LABELS: tuple[str, ...] = (
    "WM",
    "GM",
    "CSF",
    "brainstem",
    "unspecified",
    "L-hippocampus",
    "R-hippocampus",
    "background",
    "eye-socket-fat",
    "eye-socket-muscles",
    "optic-chiasm",
    "L-optic-nerve",
    "R-optic-nerve",
    "L-eye-tissue",
    "R-eye-tissue",
    "L-eye-fluid",
    "R-eye-fluid",
)
K = len(LABELS)
LABEL_CODE = {name: i for i, name in enumerate(LABELS)}
BRAIN: frozenset[int] = frozenset(range(7))
BACKGROUND = LABEL_CODE["background"]
UNSPECIFIED = LABEL_CODE["unspecified"]

GMMS: tuple[str, ...] = (
    "core",
    "edema",
    "GGM",
    "GWM",
    "GNE",
    "eye-fluid",
    "CSF",
    "background",
    "unspecified",
    "optic-chiasm",
    "eye-socket-fat",
    "eye-socket-muscles",
)
GMM_CODE = {name: i for i, name in enumerate(GMMS)}
CORE = GMM_CODE["core"]
EDEMA = GMM_CODE["edema"]

_NORMAL_GMM = {
    "WM": "GWM",
    "brainstem": "GWM",
    "GM": "GGM",
    "L-hippocampus": "GGM",
    "R-hippocampus": "GGM",
    "CSF": "CSF",
    "unspecified": "unspecified",
    "background": "background",
    "eye-socket-fat": "eye-socket-fat",
    "eye-socket-muscles": "eye-socket-muscles",
    "optic-chiasm": "optic-chiasm",
    "L-optic-nerve": "GNE",
    "R-optic-nerve": "GNE",
    "L-eye-tissue": "GNE",
    "R-eye-tissue": "GNE",
    "L-eye-fluid": "eye-fluid",
    "R-eye-fluid": "eye-fluid",
}

DEFAULT_COMPONENTS = {
    "core": 3,
    "eye-socket-muscles": 3,
    "background": 3,
    "eye-socket-fat": 2,
    "CSF": 2,
    "GNE": 2,
}


class ForbiddenCombination(ValueError):
    """Raised for (l, z, y) triples excluded by the restriction function."""


def restriction(l: int, z: int, y: int, brain_set=BRAIN) -> float:
    """0 for allowed triples, ``inf`` for core outside tumor or tumor outside brain."""
    if z == 0 and y == 1:
        return np.inf
    if z == 1 and l not in brain_set:
        return np.inf
    return 0.0


def allowed(l, z, y, brain_set=BRAIN) -> np.ndarray:
    """Vectorized restriction check; True where the triple is allowed."""
    l = np.asarray(l)
    z = np.asarray(z).astype(bool)
    y = np.asarray(y).astype(bool)
    in_brain = np.isin(l, sorted(brain_set))
    return ~((~z & y) | (z & ~in_brain))


@dataclass(frozen=True)
class GmmMapping:
    """Table mapping allowed (l, z, y) to a GMM index, plus components per GMM."""

    components: tuple[int, ...] = field(
        default_factory=lambda: tuple(DEFAULT_COMPONENTS.get(g, 1) for g in GMMS)
    )
    brain_set: frozenset[int] = BRAIN

    def __post_init__(self):
        if len(self.components) != len(GMMS) or min(self.components) < 1:
            raise ValueError("need a positive component count for each of the 12 GMMs")

    @property
    def n_gmms(self) -> int:
        return len(GMMS)

    @property
    def normal_table(self) -> np.ndarray:
        return np.array([GMM_CODE[_NORMAL_GMM[name]] for name in LABELS], dtype=np.int64)

    def map(self, l: int, z: int, y: int) -> int:
        if restriction(l, z, y, self.brain_set) != 0.0:
            raise ForbiddenCombination(f"(l={l}, z={z}, y={y}) is excluded by the restriction")
        if z == 1:
            return CORE if y == 1 else EDEMA
        return int(self.normal_table[l])

    def combos(self) -> np.ndarray:
        """All allowed triples in lexicographic (l, z, y) order, shape (C, 3)."""
        out = [
            (l, z, y)
            for l in range(K)
            for z in (0, 1)
            for y in (0, 1)
            if restriction(l, z, y, self.brain_set) == 0.0
        ]
        return np.array(out, dtype=np.int64)

    def combo_gmm(self) -> np.ndarray:
        return np.array([self.map(*c) for c in self.combos()], dtype=np.int64)

    def map_array(self, l, z, y) -> np.ndarray:
        l = np.asarray(l, dtype=np.int64)
        z = np.asarray(z).astype(bool)
        y = np.asarray(y).astype(bool)
        if not allowed(l, z, y, self.brain_set).all():
            raise ForbiddenCombination("state contains forbidden (l, z, y) triples")
        x = self.normal_table[l]
        x = np.where(z & ~y, EDEMA, x)
        return np.where(z & y, CORE, x)
