"""Synthetic head phantoms drawn from the model's own generative process.

A geometric blueprint places all 17 normal labels; tumor and core masks
are planted inside the brain; intensities follow labels -> mixture ->
component -> Gaussian draw, shifted by a smooth DCT bias field.  The atlas
is the blurred one-hot blueprint, so it carries no tumor information.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nifti
from . import rng as rngmod
from .atlas import AtlasPrior, add_unspecified_tissue, load_atlas, save_atlas
from .labels import CORE, GMMS, K, LABEL_CODE, LABELS, GmmMapping
from .likelihood import BiasBasis, ComponentLayout, Theta, build_constraints, build_dct_basis, canonical_tag, load_theta, save_theta
from .volume import JointLabelState, MultiChannelImage, flat, log_transform, unflat

# Ground-truth log-intensity means per component, columns FLAIR, T1c, T2, T1.
# Every pair of classes sharing a boundary sits many noise widths apart.  All
# core components lie near the enhanced-core initialization; a far necrotic
# component such as NECROTIC_CORE is not reachable from it (pass it through
# ``PhantomSpec.means`` to reproduce that failure mode).
NECROTIC_CORE = [(1.60, 1.60, 1.40, 0.80), (1.50, 0.30, 2.40, 0.40), (1.85, 1.20, 1.50, 0.60)]
TRUE_MEANS = {
    "core": [(1.60, 1.60, 1.40, 0.80), (1.50, 1.30, 1.65, 0.70), (1.85, 1.20, 1.50, 0.60)],
    "edema": [(1.75, 0.70, 1.70, 0.70)],
    "GGM": [(1.30, 0.75, 1.20, 0.90)],
    "GWM": [(1.00, 1.00, 0.80, 1.20)],
    "GNE": [(1.10, 1.30, 0.50, 1.00), (1.25, 1.45, 0.30, 1.10)],
    "eye-fluid": [(0.30, 0.30, 2.30, 0.20)],
    "CSF": [(0.50, 0.40, 2.00, 0.30), (0.70, 0.55, 1.80, 0.45)],
    "background": [(-1.50, -1.50, -1.50, -1.50), (1.50, 1.80, 1.00, 1.60), (0.20, 0.10, 0.10, 0.10)],
    "unspecified": [(0.80, 0.60, 1.00, 0.90)],
    "optic-chiasm": [(0.80, 1.10, 0.60, 1.30)],
    "eye-socket-fat": [(2.00, 2.00, 1.50, 2.10), (2.20, 2.25, 1.30, 2.30)],
    "eye-socket-muscles": [(0.90, 1.40, 0.90, 1.00), (0.75, 1.25, 1.05, 0.85), (1.05, 1.55, 0.75, 1.15)],
}
_COLUMN = {"FLAIR": 0, "T1c": 1, "T2": 2, "T1": 3}


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    channels: tuple[str, ...] = ("FLAIR", "T1c", "T2")
    noise_std: float = 0.06
    bias_rms: float = 0.08
    per_axis: int = 4
    atlas_blur: float = 1.0
    unspecified_epsilon: float = 0.01
    tumor_scale: float = 1.0
    structured_core: bool = False
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    means: dict = field(default_factory=dict)  # per-GMM overrides of TRUE_MEANS

    def to_json(self) -> str:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["channels"] = list(self.channels)
        d["spacing"] = list(self.spacing)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for k in ("shape", "channels", "spacing"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(eq=False)
class Phantom:
    image: MultiChannelImage  # log-domain intensities
    truth: JointLabelState
    atlas: AtlasPrior
    theta: Theta
    basis: BiasBasis
    components: np.ndarray  # ground-truth component per voxel (flat)
    spec: PhantomSpec

    def bias_field(self) -> np.ndarray:
        """(I, N) true bias offsets."""
        return self.basis.field(self.theta.bias)


# ---------------------------------------------------------------- geometry


def _grid(shape):
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(X, Y, Z, c, r):
    return ((X - c[0]) / r[0]) ** 2 + ((Y - c[1]) / r[1]) ** 2 + ((Z - c[2]) / r[2]) ** 2 <= 1.0


def _segment(X, Y, Z, p, q, radius):
    p = np.asarray(p)
    q = np.asarray(q)
    d = q - p
    P = np.stack([X - p[0], Y - p[1], Z - p[2]], axis=-1)
    t = np.clip(P @ d / (d @ d), 0.0, 1.0)
    closest = t[..., None] * d
    return ((P - closest) ** 2).sum(-1) <= radius ** 2


def blueprint(shape) -> np.ndarray:
    """Label layout of a head-like volume (x: left-right, y: posterior-anterior, z: up)."""
    X, Y, Z = _grid(shape)
    lab = np.full(shape, LABEL_CODE["background"], dtype=np.uint8)
    brain = _ellipsoid(X, Y, Z, (0.0, -0.03, 0.06), (0.38, 0.38, 0.34))
    wm = _ellipsoid(X, Y, Z, (0.0, -0.03, 0.06), (0.32, 0.32, 0.28))
    lab[brain] = LABEL_CODE["GM"]
    lab[wm] = LABEL_CODE["WM"]
    for s in (-1, 1):
        lab[_ellipsoid(X, Y, Z, (0.07 * s, 0.0, 0.08), (0.04, 0.12, 0.05)) & brain] = LABEL_CODE["CSF"]
    lab[_ellipsoid(X, Y, Z, (0.0, -0.06, -0.18), (0.07, 0.07, 0.13)) & brain] = LABEL_CODE["brainstem"]
    lab[_ellipsoid(X, Y, Z, (-0.17, -0.02, -0.10), (0.045, 0.09, 0.04)) & brain] = LABEL_CODE["L-hippocampus"]
    lab[_ellipsoid(X, Y, Z, (0.17, -0.02, -0.10), (0.045, 0.09, 0.04)) & brain] = LABEL_CODE["R-hippocampus"]
    ez = -0.14
    for s, side in ((-1, "L"), (1, "R")):
        ec = (0.15 * s, 0.35, ez)
        fat = _ellipsoid(X, Y, Z, ec, (0.095, 0.095, 0.095)) & (Y < ec[1] + 0.02) & ~brain
        lab[fat] = LABEL_CODE["eye-socket-fat"]
        for dz in (-0.075, 0.075):
            lab[_ellipsoid(X, Y, Z, (ec[0], 0.29, ez + dz), (0.035, 0.06, 0.018)) & ~brain] = LABEL_CODE["eye-socket-muscles"]
        lab[_segment(X, Y, Z, (ec[0], 0.28, ez), (0.035 * s, 0.19, ez), 0.022)] = LABEL_CODE[f"{side}-optic-nerve"]
        lab[_ellipsoid(X, Y, Z, ec, (0.068, 0.068, 0.068))] = LABEL_CODE[f"{side}-eye-tissue"]
        lab[_ellipsoid(X, Y, Z, ec, (0.047, 0.047, 0.047))] = LABEL_CODE[f"{side}-eye-fluid"]
    lab[_ellipsoid(X, Y, Z, (0.0, 0.18, ez), (0.06, 0.025, 0.022))] = LABEL_CODE["optic-chiasm"]
    return lab


def ellipsoid_union(shape, rng, center, scale):
    """Irregular blob: a main ellipsoid plus two offset lobes (fractional coordinates)."""
    X, Y, Z = _grid(shape)
    radii = scale * rng.uniform(0.8, 1.2, 3)
    m = _ellipsoid(X, Y, Z, center, radii)
    for _ in range(2):
        off = rng.normal(0.0, 0.45, 3) * radii
        m |= _ellipsoid(X, Y, Z, np.asarray(center) + off, radii * rng.uniform(0.45, 0.7, 3))
    return m


def tumor_masks(shape, rng, center=(0.0, 0.0, 0.0), scale=0.14, core_ratio=0.55):
    """Whole-tumor and nested core masks; the core is kept two voxels inside the tumor."""
    z = ellipsoid_union(shape, rng, center, scale)
    z = ndimage.binary_closing(z, iterations=1)
    inner = ndimage.binary_erosion(z, iterations=2)
    core_center = np.asarray(center) + rng.normal(0.0, 0.15, 3) * scale
    y = ellipsoid_union(shape, rng, core_center, scale * core_ratio) & inner
    if not y.any():
        y = ndimage.binary_erosion(z, iterations=max(1, int(0.3 * scale * min(shape))))
    return z.astype(bool), y.astype(bool)


def mask_corpus(n: int, shape=(32, 32, 32), seed: int = 0, scale=None):
    """Training masks for the shape models: (whole-tumor list, core list)."""
    g = rngmod.generator(seed, rngmod.TRAIN, 0)
    zs, ys = [], []
    for _ in range(n):
        s = scale if scale is not None else 0.14 * 64 / shape[0] * g.uniform(0.85, 1.15)
        c = g.normal(0.0, 0.03, 3)
        z, y = tumor_masks(shape, g, c, s)
        zs.append(z.astype(np.uint8))
        ys.append(y.astype(np.uint8))
    return zs, ys


# ---------------------------------------------------------------- model pieces


def true_theta(spec: PhantomSpec, mapping: GmmMapping, n_basis: int, bias: np.ndarray | None = None) -> Theta:
    layout = ComponentLayout.from_mapping(mapping)
    cols = []
    for t in spec.channels:
        tag = canonical_tag(t)
        if tag not in _COLUMN:
            raise ValueError(f"phantom has no intensity table for modality {t!r}")
        cols.append(_COLUMN[tag])
    n = len(cols)
    weights = np.zeros(layout.total)
    means = np.zeros((layout.total, n))
    covs = np.zeros((layout.total, n, n))
    table = {**TRUE_MEANS, **spec.means}
    for x, name in enumerate(GMMS):
        s = layout.slice(x)
        g = s.stop - s.start
        rows = list(table[name])
        if len(rows) < g:
            raise ValueError(f"need {g} true means for {name}")
        weights[s] = 1.0 / g
        for k, gi in enumerate(range(s.start, s.stop)):
            means[gi] = np.asarray(rows[k], dtype=np.float64)[cols]
            covs[gi] = spec.noise_std ** 2 * np.eye(n)
    C = np.zeros((n, n_basis)) if bias is None else bias
    return Theta(weights, means, covs, C, layout)


def bias_coefficients(spec: PhantomSpec, basis: BiasBasis, gen) -> np.ndarray:
    """Zero-mean smooth field with the requested per-channel RMS (constant column left 0)."""
    n = len(spec.channels)
    C = np.zeros((n, basis.n_basis))
    if spec.bias_rms <= 0:
        return C
    k = basis.per_axis
    a, b, c = np.meshgrid(np.arange(k), np.arange(k), np.arange(k), indexing="ij")
    freq = (a + b + c).reshape(-1, order="F").astype(np.float64)
    for ch, tag in enumerate(spec.channels):
        if tag == "CT":
            continue
        coef = gen.normal(0.0, 1.0, basis.n_basis) / (1.0 + freq) ** 2
        coef[0] = 0.0
        f = basis.volume(coef)
        C[ch] = coef * spec.bias_rms / np.sqrt((f ** 2).mean())
    return C


def make_atlas(labels: np.ndarray, blur: float, epsilon: float) -> AtlasPrior:
    onehot = np.stack([(labels == k).astype(np.float64) for k in range(K)])
    if blur > 0:
        onehot = np.stack([ndimage.gaussian_filter(p, blur, mode="nearest") for p in onehot])
    onehot = np.maximum(onehot, 0.0)
    onehot /= onehot.sum(axis=0, keepdims=True)
    atlas = AtlasPrior(onehot)
    return add_unspecified_tissue(atlas, epsilon) if epsilon > 0 else atlas


def _tumor_site(shape):
    return np.array([0.15, 0.02, 0.14])


def generate_phantom(spec: PhantomSpec = PhantomSpec(), masks=None, mapping: GmmMapping | None = None) -> Phantom:
    """Sample a phantom; ``masks`` = (z, y) overrides the planted tumor shapes."""
    mapping = mapping or GmmMapping()
    shape = tuple(spec.shape)
    gen = rngmod.generator(spec.seed, rngmod.PHANTOM, 0)
    l = blueprint(shape)
    if masks is None:
        center = _tumor_site(shape) + gen.normal(0.0, 0.015, 3)
        z, y = tumor_masks(shape, gen, center, 0.14 * spec.tumor_scale)
    else:
        z, y = (np.asarray(m, dtype=bool) for m in masks)
        if z.shape != shape or y.shape != shape:
            raise ValueError("planted masks must match the phantom grid")
    in_brain = np.isin(l, sorted(mapping.brain_set))
    z &= in_brain
    y &= z
    truth = JointLabelState(l, z, y, mapping.brain_set)

    basis = build_dct_basis(shape, spec.per_axis)
    C = bias_coefficients(spec, basis, gen)
    theta = true_theta(spec, mapping, basis.n_basis, C)
    cons = build_constraints(spec.channels, theta.layout)
    if not cons.satisfied(theta.stacked_means()):
        raise ValueError("ground-truth means violate the mean constraints")

    lf, zf, yf = truth.flat()
    x = mapping.map_array(lf, zf, yf)
    I = x.size
    comp = np.empty(I, dtype=np.int64)
    u = gen.random(I)
    lay = theta.layout
    for xi in range(lay.n_gmms):
        s = lay.slice(xi)
        idx = np.flatnonzero(x == xi)
        cdf = np.cumsum(theta.weights[s])
        comp[idx] = s.start + np.minimum(np.searchsorted(cdf, u[idx], side="right"), s.stop - s.start - 1)
    if spec.structured_core:
        # enhancing rim, necrotic interior: a legal but spatially organized assignment
        core = lay.slice(CORE)
        ym = truth.z & truth.y
        interior = flat(ndimage.binary_erosion(ym, iterations=2) & ym)
        cf = flat(ym)
        comp[cf] = core.start
        comp[interior] = core.start + 1
    n = len(spec.channels)
    noise = gen.standard_normal((I, n))
    data = np.empty((I, n))
    for g in range(lay.total):
        idx = comp == g
        if idx.any():
            data[idx] = theta.means[g]
            if spec.noise_std > 0:
                data[idx] += noise[idx] @ np.linalg.cholesky(theta.covs[g]).T
    data += basis.field(C)
    vol = np.stack([unflat(data[:, c], shape) for c in range(n)])
    image = MultiChannelImage(vol, tuple(spec.channels), spacing=spec.spacing)
    atlas = make_atlas(l, spec.atlas_blur, spec.unspecified_epsilon)
    return Phantom(image, truth, atlas, theta, basis, comp, spec)


# ---------------------------------------------------------------- bundle IO


def save_bundle(ph: Phantom, directory) -> Path:
    """Raw-intensity NIfTI channels, truth label maps, atlas, spec and ground-truth theta."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c, tag in enumerate(ph.image.tags):
        nifti.write_volume(d / f"channel_{tag}.nii.gz", np.exp(ph.image.data[c]), ph.image.spacing)
    names = {k: n for k, n in enumerate(LABELS)}
    nifti.write_label_map(d / "truth_l.nii.gz", ph.truth.l, names, ph.image.spacing)
    nifti.write_label_map(d / "truth_z.nii.gz", ph.truth.z.astype(np.uint8), {0: "normal", 1: "tumor"}, ph.image.spacing)
    nifti.write_label_map(d / "truth_y.nii.gz", ph.truth.y.astype(np.uint8), {0: "non-core", 1: "core"}, ph.image.spacing)
    save_atlas(ph.atlas, d / "atlas", ph.spec.unspecified_epsilon)
    save_theta(ph.theta, d / "theta_true.bin", ph.image.tags)
    (d / "phantom.json").write_text(ph.spec.to_json())
    return d


def load_truth(directory) -> JointLabelState:
    d = Path(directory)
    l, _ = nifti.read_label_map(d / "truth_l.nii.gz")
    z, _ = nifti.read_label_map(d / "truth_z.nii.gz")
    y, _ = nifti.read_label_map(d / "truth_y.nii.gz")
    return JointLabelState(l, z, y)


def load_bundle_image(directory, tags=None) -> MultiChannelImage:
    d = Path(directory)
    spec = json.loads((d / "phantom.json").read_text())
    tags = tuple(tags or spec["channels"])
    vols, spacing = [], (1.0, 1.0, 1.0)
    for t in tags:
        v, spacing = nifti.read_volume(d / f"channel_{t}.nii.gz")
        vols.append(v)
    return log_transform(MultiChannelImage(np.stack(vols), tags, spacing=spacing))


def load_bundle(directory):
    d = Path(directory)
    image = load_bundle_image(d)
    atlas = load_atlas(d / "atlas", image.shape.as_tuple())
    theta, _ = load_theta(d / "theta_true.bin")
    return image, load_truth(d), atlas, theta
