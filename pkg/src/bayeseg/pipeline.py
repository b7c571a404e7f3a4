"""End-to-end segmentation: hyperpriors, GEM start, then the sampler."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels
from .crbm import CrbmParams
from .gem import GemConfig, GemResult, SimplifiedPriorConfig, run_gem, simplified_biases
from .gibbs import ChainConfig, ChainResult, LabelProblem, run_chain
from .labels import GmmMapping
from .likelihood import build_dct_basis, default_hyperpriors
from .mrf import MrfConfig, mrf_sampler
from .volume import MultiChannelImage


@dataclass
class RunConfig:
    """Every knob of a segmentation run; JSON keys match the field names.

    ``mrf`` may be given as ``{"beta_z": .., "beta_y": ..}`` or through the
    dotted keys ``mrf.beta_z`` / ``mrf.beta_y``.
    """

    channels: list = field(default_factory=list)  # [[tag, path], ...]
    bundle: str | None = None  # phantom bundle supplying channels and atlas
    atlas: str | None = None
    crbm_z: str | None = None
    crbm_y: str | None = None
    prior: str = "crbm"  # or "mrf"
    w: float = 0.1
    u: float = 0.5
    burn_in: int = 200
    samples: int = 50
    per_axis: int = 4  # P = per_axis ** 3 bias basis functions
    beta_z: float = 4.0
    beta_y: float = 1.0
    seed: int = 0
    threads: int | None = None
    gem_max_iter: int = 100
    flip_fraction: float = 0.2
    aliases: dict = field(default_factory=dict)
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        mrf = d.pop("mrf", None)
        if mrf is not None:
            if not isinstance(mrf, dict):
                raise ValueError("'mrf' must be an object with beta_z / beta_y")
            for k, v in mrf.items():
                d[f"mrf.{k}"] = v
        for k in [k for k in d if k.startswith("mrf.")]:
            sub = k[4:]
            if sub not in ("beta_z", "beta_y"):
                raise ValueError(f"unknown config key {k!r}")
            d[sub] = d.pop(k)
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.prior not in ("crbm", "mrf"):
            raise ValueError(f"prior must be 'crbm' or 'mrf', got {self.prior!r}")
        if self.burn_in < 0 or self.samples < 1:
            raise ValueError("need burn_in >= 0 and samples >= 1")
        if self.beta_z < 0 or self.beta_y < 0:
            raise ValueError("pairwise weights must be nonnegative")
        SimplifiedPriorConfig(self.w, self.u)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mrf"] = {"beta_z": d.pop("beta_z"), "beta_y": d.pop("beta_y")}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


@dataclass(eq=False)
class SegmentResult:
    gem: GemResult
    chain: ChainResult
    problem: LabelProblem


def constant_prior(w: float, u: float, n_filters: int = 1) -> tuple[CrbmParams, CrbmParams]:
    """Zero-filter shape models whose visible biases reproduce the simplified prior."""
    a_z, a_y = simplified_biases(SimplifiedPriorConfig(w, u))
    return (CrbmParams.zeros(n_filters, (1, 1, 1), visible_bias=a_z),
            CrbmParams.zeros(n_filters, (1, 1, 1), visible_bias=a_y))


def segment(image: MultiChannelImage, atlas_voxels: np.ndarray, cfg: RunConfig, crbm_z: CrbmParams | None = None,
            crbm_y: CrbmParams | None = None, mapping: GmmMapping | None = None, gem_result: GemResult | None = None,
            progress=None) -> SegmentResult:
    """GEM initialization followed by the chain under the configured tumor prior.

    Missing shape models fall back to the simplified constant prior.
    ``gem_result`` reuses an earlier initialization (shared starts).
    """
    if cfg.threads:
        kernels.set_threads(cfg.threads)
    mapping = mapping or GmmMapping()
    hyper = default_hyperpriors(image, atlas_voxels, mapping, cfg.w, cfg.u, cfg.aliases or None)
    basis = build_dct_basis(image.shape.as_tuple(), cfg.per_axis)
    if gem_result is None:
        gcfg = GemConfig(max_iter=cfg.gem_max_iter, prior=SimplifiedPriorConfig(cfg.w, cfg.u),
                         flip_fraction=cfg.flip_fraction, seed=cfg.seed)
        gem_result = run_gem(image, atlas_voxels, hyper, gcfg, mapping, basis, aliases=cfg.aliases or None)
    problem = LabelProblem.build(image, atlas_voxels, hyper, basis, mapping)
    chain_cfg = ChainConfig(cfg.burn_in, cfg.samples, cfg.seed)
    if cfg.prior == "mrf":
        sampler = mrf_sampler(MrfConfig(cfg.beta_z, cfg.beta_y), cfg.seed)
        chain = run_chain(problem, gem_result.theta, gem_result.state, chain_cfg, label_sampler=sampler,
                          progress=progress)
    else:
        if crbm_z is None or crbm_y is None:
            dz, dy = constant_prior(cfg.w, cfg.u)
            crbm_z = crbm_z or dz
            crbm_y = crbm_y or dy
        chain = run_chain(problem, gem_result.theta, gem_result.state, chain_cfg, crbm_z, crbm_y, progress=progress)
    return SegmentResult(gem_result, chain, problem)


def resolve_paths(cfg: RunConfig, base: Path | None = None) -> RunConfig:
    """Make relative paths in ``cfg`` relative to ``base`` (the config file's folder)."""
    if base is None:
        return cfg

    def fix(p):
        if p is None:
            return None
        q = Path(p)
        return str(q if q.is_absolute() else base / q)

    cfg.bundle = fix(cfg.bundle)
    cfg.atlas = fix(cfg.atlas)
    cfg.crbm_z = fix(cfg.crbm_z)
    cfg.crbm_y = fix(cfg.crbm_y)
    cfg.channels = [[t, fix(p)] for t, p in cfg.channels]
    return cfg
