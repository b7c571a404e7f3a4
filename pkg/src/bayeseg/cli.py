"""``bayeseg`` command line: train-crbm, phantom, segment, eval, grid-search-beta.

Exit codes: 0 success, 1 numerical failure, 2 bad input.  Every command
that writes an output directory also writes the effective configuration
there as ``config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import crbm as crbm_mod
from . import kernels, metrics, nifti, phantom
from .atlas import load_atlas
from .gibbs import RestrictionViolation
from .gem import GemConfig, SimplifiedPriorConfig, run_gem
from .labels import LABELS, GmmMapping
from .likelihood import NotPositiveDefinite, build_dct_basis, default_hyperpriors, save_theta
from .mrf import grid_search
from .pipeline import RunConfig, resolve_paths, segment
from .qp import InfeasibleConstraints
from .volume import KNOWN_TAGS, JointLabelState, MultiChannelImage, log_transform, unflat

log = logging.getLogger("bayeseg")

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_INPUT = 2
NUMERIC_ERRORS = (FloatingPointError, NotPositiveDefinite, InfeasibleConstraints, np.linalg.LinAlgError,
                  RestrictionViolation)


class InputError(Exception):
    """Bad configuration or missing input files."""


def _triple(s: str) -> tuple[int, int, int]:
    parts = [int(p) for p in s.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected one or three integers, got {s!r}")
    return tuple(parts)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file {p} not found")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise InputError(f"config file {p} must hold a JSON object")
    return d


def _write_config(out: Path, effective: dict, source: Path | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective, indent=1, sort_keys=True), encoding="utf-8")
    if source is not None:
        (out / "config_input.json").write_text(source.read_text(encoding="utf-8"), encoding="utf-8")


def _overrides(args, mapping: dict) -> dict:
    """Flag values that were actually given (flags win over the JSON file)."""
    out = {}
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _set_threads(n):
    if n:
        kernels.set_threads(n)


# ---------------------------------------------------------------- train-crbm


def _load_masks(directory) -> list[np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"corpus directory {d} not found")
    files = sorted(list(d.glob("*.nii")) + list(d.glob("*.nii.gz")))
    if not files:
        raise InputError(f"no NIfTI masks in {d}")
    masks = []
    for f in files:
        v, _ = nifti.read_volume(f)
        if not np.isin(v, (0, 1)).all():
            raise InputError(f"{f} is not a binary mask")
        masks.append(np.asarray(v, dtype=np.uint8))
    if len({m.shape for m in masks}) != 1:
        raise InputError("corpus masks must share one grid")
    return masks


def cmd_train_crbm(args) -> int:
    d = _read_json(args.config) if args.config else {}
    d.update(_overrides(args, {"n_filters": "n_filters", "filter_shape": "filter_shape", "block": "block",
                               "steps": "steps", "step_size": "step_size", "minibatch": "minibatch",
                               "init_std": "init_std", "seed": "seed"}))
    for k in ("filter_shape", "block"):
        if k in d:
            d[k] = tuple(d[k])
    try:
        cfg = crbm_mod.TrainConfig(**d)
    except TypeError as exc:
        raise InputError(f"bad training config: {exc}") from exc
    _set_threads(args.threads)
    masks = _load_masks(args.corpus)
    corpus = masks if args.no_augment else crbm_mod.augmented_corpus(masks)
    holdout = None
    if args.holdout:
        if not Path(args.holdout).exists():
            raise InputError(f"holdout mask {args.holdout} not found")
        holdout = np.asarray(nifti.read_volume(args.holdout)[0], dtype=np.float64)
    params = crbm_mod.train_crbm(corpus, cfg, holdout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    crbm_mod.save_checkpoint(params, out)
    side = out.with_name(out.name + ".config.json")
    side.write_text(json.dumps({"training": cfg.as_dict(), "corpus": str(args.corpus), "augment": not args.no_augment,
                                "n_masks": len(masks)}, indent=1, sort_keys=True), encoding="utf-8")
    print(f"wrote {out} (M={params.n_filters}, steps={cfg.steps})")
    return EXIT_OK


# ---------------------------------------------------------------- phantom


def cmd_phantom(args) -> int:
    d = _read_json(args.config) if args.config else {}
    d.update(_overrides(args, {"shape": "shape", "seed": "seed", "noise_std": "noise_std", "bias_rms": "bias_rms",
                               "tumor_scale": "tumor_scale"}))
    if args.channels:
        d["channels"] = args.channels.split(",")
    if args.structured_core:
        d["structured_core"] = True
    try:
        spec = phantom.PhantomSpec.from_dict(d)
    except TypeError as exc:
        raise InputError(f"bad phantom spec: {exc}") from exc
    out = Path(args.out)
    if args.mask_corpus:
        zs, ys = phantom.mask_corpus(args.mask_corpus, tuple(spec.shape), spec.seed)
        for sub, masks in (("z", zs), ("y", ys)):
            (out / sub).mkdir(parents=True, exist_ok=True)
            for i, m in enumerate(masks):
                nifti.write_volume(out / sub / f"mask_{i:04d}.nii.gz", m, dtype=np.uint8)
        _write_config(out, {"mask_corpus": args.mask_corpus, "shape": list(spec.shape), "seed": spec.seed})
        print(f"wrote {args.mask_corpus} whole-tumor and core masks to {out}")
        return EXIT_OK
    try:
        ph = phantom.generate_phantom(spec)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    phantom.save_bundle(ph, out)
    _write_config(out, json.loads(spec.to_json()))
    print(f"wrote phantom bundle {out}")
    return EXIT_OK


# ---------------------------------------------------------------- segment


def _load_image(cfg: RunConfig) -> MultiChannelImage:
    if cfg.channels:
        vols, spacing, tags = [], (1.0, 1.0, 1.0), []
        for tag, path in cfg.channels:
            if not Path(path).exists():
                raise InputError(f"channel file {path} not found")
            v, spacing = nifti.read_volume(path)
            vols.append(np.asarray(v, dtype=np.float64))
            tags.append(tag)
        if len({v.shape for v in vols}) != 1:
            raise InputError("channels must share one grid")
        return log_transform(MultiChannelImage(np.stack(vols), tuple(tags), spacing=spacing))
    if cfg.bundle:
        if not Path(cfg.bundle, "phantom.json").exists():
            raise InputError(f"{cfg.bundle} is not a phantom bundle")
        return phantom.load_bundle_image(cfg.bundle)
    raise InputError("no input channels (give --channel TAG=PATH or --bundle DIR)")


def _check_tags(image: MultiChannelImage, cfg: RunConfig) -> None:
    for t in image.tags:
        if t not in KNOWN_TAGS and t not in (cfg.aliases or {}):
            raise InputError(f"unknown modality tag {t!r}; alias it, e.g. --alias {t}=FLAIR")


def _load_crbm(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise InputError(f"cRBM checkpoint {path} not found")
    try:
        return crbm_mod.load_checkpoint(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _run_config(args) -> tuple[RunConfig, Path | None]:
    src = Path(args.config) if args.config else None
    d = _read_json(src) if src else {}
    base = src.parent if src else None
    flags = _overrides(args, {"bundle": "bundle", "atlas": "atlas", "crbm_z": "crbm_z", "crbm_y": "crbm_y",
                              "prior": "prior", "w": "w", "u": "u", "burn_in": "burn_in", "samples": "samples",
                              "per_axis": "per_axis", "beta_z": "beta_z", "beta_y": "beta_y", "seed": "seed",
                              "threads": "threads", "gem_max_iter": "gem_max_iter", "out": "out"})
    if args.channel:
        chans = []
        for item in args.channel:
            if "=" not in item:
                raise InputError(f"--channel expects TAG=PATH, got {item!r}")
            chans.append(item.split("=", 1))
        flags["channels"] = chans
    if args.alias:
        al = dict(d.get("aliases", {}))
        for item in args.alias:
            if "=" not in item:
                raise InputError(f"--alias expects TAG=CANONICAL, got {item!r}")
            k, v = item.split("=", 1)
            al[k] = v
        flags["aliases"] = al
    try:
        cfg = RunConfig.from_dict(d)
        cfg = resolve_paths(cfg, base)
        for k, v in flags.items():
            setattr(cfg, k, v)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if env := os.environ.get("BAYESEG_THREADS"):
        if cfg.threads is None:
            cfg.threads = int(env)
    return cfg, src


def cmd_segment(args) -> int:
    cfg, src = _run_config(args)
    if not cfg.out:
        raise InputError("no output directory (--out)")
    image = _load_image(cfg)
    _check_tags(image, cfg)
    atlas_path = cfg.atlas or (str(Path(cfg.bundle) / "atlas") if cfg.bundle else None)
    if atlas_path is None:
        raise InputError("no atlas given (--atlas)")
    try:
        atlas = load_atlas(atlas_path, image.shape.as_tuple())
    except FileNotFoundError as exc:
        raise InputError(f"atlas not found: {exc}") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    cz, cy = _load_crbm(cfg.crbm_z), _load_crbm(cfg.crbm_y)
    out = Path(cfg.out)
    _write_config(out, cfg.to_dict(), src)

    def progress(s, row):
        if args.verbose:
            log.info("sweep %d  log-posterior %.6g  tumor %d  core %d", s, row["log_posterior"], row["n_tumor"],
                     row["n_core"])

    res = segment(image, atlas.voxels(), cfg, cz, cy, progress=progress)
    write_segmentation(out, res, image)
    st = res.chain.state
    print(f"wrote {out}: tumor {int(st.z.sum())} voxels, core {int((st.z & st.y).sum())} voxels")
    return EXIT_OK


def write_segmentation(out: Path, res, image: MultiChannelImage) -> None:
    st = res.chain.state
    sp = image.spacing
    shape = image.shape.as_tuple()
    nifti.write_label_map(out / "labels_l.nii.gz", st.l, dict(enumerate(LABELS)), sp)
    nifti.write_label_map(out / "labels_z.nii.gz", st.z.astype(np.uint8), {0: "normal", 1: "tumor"}, sp)
    nifti.write_label_map(out / "labels_y.nii.gz", st.y.astype(np.uint8), {0: "non-core", 1: "core"}, sp)
    fr = res.chain.accumulator.fractions()
    for k in ("z", "y", "l"):
        nifti.write_volume(out / f"votes_{k}.nii.gz", unflat(fr[k], shape), sp)
    (out / "chain.csv").write_text(res.chain.trace_csv(), encoding="utf-8")
    gem_rows = "\n".join(["iteration,objective"] + [f"{i},{v:.12g}" for i, v in enumerate(res.gem.trace)]) + "\n"
    (out / "gem_trace.csv").write_text(gem_rows, encoding="utf-8")
    save_theta(res.chain.theta, out / "theta_final.bin", image.tags)
    bm = res.chain.accumulator.bias_mean
    if bm is not None:
        np.save(out / "bias_mean.npy", bm)


# ---------------------------------------------------------------- eval


def load_state(directory) -> JointLabelState:
    d = Path(directory)
    for prefix in ("labels", "truth"):
        if (d / f"{prefix}_l.nii.gz").exists():
            l, _ = nifti.read_label_map(d / f"{prefix}_l.nii.gz")
            z, _ = nifti.read_label_map(d / f"{prefix}_z.nii.gz")
            y, _ = nifti.read_label_map(d / f"{prefix}_y.nii.gz")
            return JointLabelState(l, z, y)
    raise InputError(f"{d} holds no labels_*/truth_* volumes")


def cmd_eval(args) -> int:
    pred = load_state(args.pred)
    truth = load_state(args.truth)
    if pred.l.shape != truth.l.shape:
        raise InputError("prediction and truth grids differ")
    names = args.structures.split(",") if args.structures else None
    if names:
        bad = [n for n in names if n not in metrics.STRUCTURES]
        if bad:
            raise InputError(f"unknown structures: {', '.join(bad)}")
    spacing = tuple(float(s) for s in nifti.read_volume(Path(args.truth) / (
        "truth_l.nii.gz" if (Path(args.truth) / "truth_l.nii.gz").exists() else "labels_l.nii.gz"))[1])
    rep = metrics.evaluate(pred, truth, names, spacing)
    text = rep.to_csv() if args.format == "csv" else rep.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="" if text.endswith("\n") else "\n")
    return EXIT_OK


# ---------------------------------------------------------------- grid search


def cmd_grid_search_beta(args) -> int:
    _set_threads(args.threads)
    bundles = []
    for b in args.corpus:
        if not Path(b, "phantom.json").exists():
            raise InputError(f"{b} is not a phantom bundle")
        image, truth, atlas, _ = phantom.load_bundle(b)
        bundles.append((image, truth, atlas.voxels()))
    base = RunConfig(prior="mrf", burn_in=args.burn_in, samples=args.samples, seed=args.seed,
                     per_axis=args.per_axis)
    mapping = GmmMapping()
    inits = []
    for image, _, av in bundles:
        hyper = default_hyperpriors(image, av, mapping, base.w, base.u)
        basis = build_dct_basis(image.shape.as_tuple(), base.per_axis)
        inits.append(run_gem(image, av, hyper, GemConfig(seed=base.seed, prior=SimplifiedPriorConfig(base.w, base.u)),
                             mapping, basis))

    def score(bz, by):
        vals = []
        for (image, truth, av), g in zip(bundles, inits):
            cfg = RunConfig(**{**base.__dict__, "beta_z": bz, "beta_y": by})
            st = segment(image, av, cfg, mapping=mapping, gem_result=g).chain.state
            vals.append(0.5 * (metrics.dice(st.z, truth.z) + metrics.dice(st.z & st.y, truth.z & truth.y)))
        return float(np.mean(vals))

    lo_z, hi_z = args.range_z if args.range_z else (args.lo, args.hi)
    lo_y, hi_y = args.range_y if args.range_y else (args.lo, args.hi)
    zs = np.round(np.arange(lo_z, hi_z + 0.5 * args.step, args.step), 10)
    ys = np.round(np.arange(lo_y, hi_y + 0.5 * args.step, args.step), 10)
    cands = [(a, b) for a in zs.tolist() for b in ys.tolist()]
    best, scores = grid_search(score, cands)
    result = {"best": {"beta_z": best[0], "beta_y": best[1]},
              "scores": [{"beta_z": k[0], "beta_y": k[1], "score": v} for k, v in sorted(scores.items())],
              "config": {"corpus": list(args.corpus), "step": args.step, "burn_in": args.burn_in,
                         "samples": args.samples, "seed": args.seed}}
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayeseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-crbm", help="train a shape model on a directory of binary NIfTI masks")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--n-filters", dest="n_filters", type=int)
    t.add_argument("--filter-shape", dest="filter_shape", type=_triple)
    t.add_argument("--block", type=_triple)
    t.add_argument("--steps", type=int)
    t.add_argument("--step-size", dest="step_size", type=float)
    t.add_argument("--minibatch", type=int)
    t.add_argument("--init-std", dest="init_std", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--holdout")
    t.add_argument("--no-augment", dest="no_augment", action="store_true")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train_crbm)

    ph = sub.add_parser("phantom", help="write a synthetic phantom bundle (or a training mask corpus)")
    ph.add_argument("--out", required=True)
    ph.add_argument("--config")
    ph.add_argument("--shape", type=_triple)
    ph.add_argument("--seed", type=int)
    ph.add_argument("--noise-std", dest="noise_std", type=float)
    ph.add_argument("--bias-rms", dest="bias_rms", type=float)
    ph.add_argument("--tumor-scale", dest="tumor_scale", type=float)
    ph.add_argument("--channels", help="comma-separated modality tags")
    ph.add_argument("--structured-core", dest="structured_core", action="store_true")
    ph.add_argument("--mask-corpus", dest="mask_corpus", type=int, help="write N training mask pairs instead")
    ph.set_defaults(func=cmd_phantom)

    s = sub.add_parser("segment", help="GEM initialization followed by the Gibbs sampler")
    s.add_argument("--config")
    s.add_argument("--bundle")
    s.add_argument("--channel", action="append", help="TAG=PATH (repeatable)")
    s.add_argument("--alias", action="append", help="TAG=CANONICAL, e.g. DIR=FLAIR (repeatable)")
    s.add_argument("--atlas")
    s.add_argument("--crbm-z", dest="crbm_z")
    s.add_argument("--crbm-y", dest="crbm_y")
    s.add_argument("--prior", choices=("crbm", "mrf"))
    s.add_argument("--w", type=float)
    s.add_argument("--u", type=float)
    s.add_argument("--burn-in", dest="burn_in", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--per-axis", dest="per_axis", type=int)
    s.add_argument("--beta-z", dest="beta_z", type=float)
    s.add_argument("--beta-y", dest="beta_y", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--gem-max-iter", dest="gem_max_iter", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="Dice and robust Hausdorff of a segmentation against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--structures")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grid-search-beta", help="choose MRF weights by mean tumor Dice over phantom bundles")
    g.add_argument("--corpus", nargs="+", required=True)
    g.add_argument("--lo", type=float, default=0.0)
    g.add_argument("--hi", type=float, default=5.0)
    g.add_argument("--range-z", dest="range_z", type=float, nargs=2)
    g.add_argument("--range-y", dest="range_y", type=float, nargs=2)
    g.add_argument("--step", type=float, default=0.5)
    g.add_argument("--burn-in", dest="burn_in", type=int, default=200)
    g.add_argument("--samples", type=int, default=50)
    g.add_argument("--per-axis", dest="per_axis", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_grid_search_beta)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if env := os.environ.get("BAYESEG_THREADS"):
        kernels.set_threads(int(env))
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
