"""Binary convolutional RBM over 3D masks.

The forward map is a valid (un-padded) cross-correlation of the mask with
each filter, giving hidden groups of shape ``image - filter + 1``.  Its
adjoint, a full convolution of each hidden group with its filter, drives
the visible units.  Both are evaluated with FFTs of the image size, which
is wrap-free for these two modes.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy.special import expit

from . import kernels
from .volume import flip_augment

_AXES = (1, 2, 3)
MAGIC = b"CRBM"
VERSION = 1


@dataclass(frozen=True, eq=False)
class CrbmParams:
    filters: np.ndarray  # (M, rx, ry, rz)
    hidden_bias: np.ndarray  # (M,)
    visible_bias: float
    block: tuple[int, int, int] = (1, 1, 1)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.filters, dtype=np.float64)
        if w.ndim != 4 or w.shape[0] < 1:
            raise ValueError("filters must have shape (M, rx, ry, rz) with M >= 1")
        b = np.array(self.hidden_bias, dtype=np.float64).reshape(-1)
        if b.shape != (w.shape[0],):
            raise ValueError("need one hidden bias per filter")
        block = tuple(int(s) for s in self.block)
        if any(r % s for r, s in zip(w.shape[1:], block)):
            raise ValueError(f"filter shape {w.shape[1:]} not divisible by tying block {block}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "filters", w)
        object.__setattr__(self, "hidden_bias", b)
        object.__setattr__(self, "visible_bias", float(self.visible_bias))
        object.__setattr__(self, "block", block)

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_shape(self) -> tuple[int, int, int]:
        return self.filters.shape[1:]

    def hidden_shape(self, image_shape) -> tuple[int, int, int]:
        j = tuple(int(s) - r + 1 for s, r in zip(image_shape, self.filter_shape))
        if min(j) < 1:
            raise ValueError(f"image {tuple(image_shape)} smaller than filter {self.filter_shape}")
        return j

    @classmethod
    def zeros(cls, n_filters, filter_shape, visible_bias=0.0, block=(1, 1, 1)) -> "CrbmParams":
        return cls(np.zeros((n_filters,) + tuple(filter_shape)), np.zeros(n_filters), visible_bias, block)

    def with_visible_bias(self, a: float) -> "CrbmParams":
        return replace(self, visible_bias=a)


def tie(arr: np.ndarray, block) -> np.ndarray:
    """Average filter entries within each tying block, broadcast back."""
    bx, by, bz = block
    if (bx, by, bz) == (1, 1, 1):
        return arr
    m, rx, ry, rz = arr.shape
    r = arr.reshape(m, rx // bx, bx, ry // by, by, rz // bz, bz).mean(axis=(2, 4, 6), keepdims=True)
    return np.broadcast_to(r, (m, rx // bx, bx, ry // by, by, rz // bz, bz)).reshape(arr.shape).copy()


class _Spectra:
    """Filter FFTs at one image size."""

    def __init__(self, params: CrbmParams, shape):
        self.shape = tuple(int(s) for s in shape)
        self.hshape = params.hidden_shape(self.shape)
        self.bias = params.hidden_bias[:, None, None, None]
        self.a = params.visible_bias
        self.W = sfft.rfftn(params.filters, s=self.shape, axes=_AXES, workers=kernels.get_threads())

    def hidden_input(self, v: np.ndarray) -> np.ndarray:
        return self.hidden_from_spectrum(sfft.rfftn(np.asarray(v, dtype=np.float64), workers=kernels.get_threads()))

    def hidden_from_spectrum(self, V: np.ndarray) -> np.ndarray:
        c = sfft.irfftn(V[None] * np.conj(self.W), s=self.shape, axes=_AXES, workers=kernels.get_threads())
        jx, jy, jz = self.hshape
        return c[:, :jx, :jy, :jz] + self.bias

    def visible_input(self, H: np.ndarray) -> np.ndarray:
        Hf = sfft.rfftn(np.asarray(H, dtype=np.float64), s=self.shape, axes=_AXES, workers=kernels.get_threads())
        return sfft.irfftn((Hf * self.W).sum(axis=0), s=self.shape, workers=kernels.get_threads()) + self.a


def hidden_input(params: CrbmParams, v: np.ndarray) -> np.ndarray:
    """Pre-activations ``(w_m * v)_j + b_m``, shape (M, Jx, Jy, Jz)."""
    return _Spectra(params, np.shape(v)).hidden_input(v)


def hidden_activation(params: CrbmParams, v: np.ndarray) -> np.ndarray:
    return expit(hidden_input(params, v))


def sample_hidden(params: CrbmParams, v: np.ndarray, rng) -> np.ndarray:
    """Bernoulli draw of every hidden unit given the visible mask."""
    p = hidden_activation(params, v)
    return (rng.random(p.shape) < p).astype(np.uint8)


def visible_input(params: CrbmParams, H: np.ndarray, image_shape=None) -> np.ndarray:
    """``sum_m (mirrored w_m full-conv h_m)_i + a`` on the image grid."""
    if image_shape is None:
        image_shape = tuple(j + r - 1 for j, r in zip(np.shape(H)[1:], params.filter_shape))
    return _Spectra(params, image_shape).visible_input(H)


def visible_activation(params: CrbmParams, H: np.ndarray, image_shape=None) -> np.ndarray:
    return expit(visible_input(params, H, image_shape))


def sample_visible(params: CrbmParams, H: np.ndarray, rng, image_shape=None) -> np.ndarray:
    p = visible_activation(params, H, image_shape)
    return (rng.random(p.shape) < p).astype(np.uint8)


def energy(params: CrbmParams, v: np.ndarray, H: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (params.n_filters,) + params.hidden_shape(v.shape):
        raise ValueError(f"hidden state shape {H.shape} inconsistent with mask {v.shape}")
    pre = hidden_input(params, v)
    return float(-(H * pre).sum() - params.visible_bias * v.sum())


def free_energy(params: CrbmParams, v: np.ndarray) -> float:
    """Energy of ``v`` with the hidden units summed out (clique-potential form)."""
    v = np.asarray(v, dtype=np.float64)
    pre = hidden_input(params, v)
    return float(-np.logaddexp(0.0, pre).sum() - params.visible_bias * v.sum())


def gibbs_sample(params: CrbmParams, shape, steps: int, rng, init=None) -> np.ndarray:
    """Run ``steps`` block-Gibbs v -> H -> v sweeps and return the last mask."""
    spec = _Spectra(params, shape)
    v = np.zeros(shape, dtype=np.uint8) if init is None else np.asarray(init, dtype=np.uint8)
    for _ in range(steps):
        ph = expit(spec.hidden_input(v))
        h = rng.random(ph.shape) < ph
        pv = expit(spec.visible_input(h))
        v = (rng.random(pv.shape) < pv).astype(np.uint8)
    return v


# ---------------------------------------------------------------- training


@dataclass
class CrbmGradient:
    filters: np.ndarray
    hidden_bias: np.ndarray
    visible_bias: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.filters.ravel(), self.hidden_bias, [self.visible_bias]])


def _correlate_batch(X: np.ndarray, shape, fshape) -> np.ndarray:
    """Inverse transform of a cross-spectrum, cropped to the filter support."""
    c = sfft.irfftn(X, s=shape, axes=tuple(range(X.ndim - 3, X.ndim)), workers=kernels.get_threads())
    rx, ry, rz = fshape
    return c[..., :rx, :ry, :rz]


def _statistics(params: CrbmParams, spec: "_Spectra", positives, negatives, pos_hidden=None,
                enhanced: bool = True) -> CrbmGradient:
    shape = spec.shape
    m = params.n_filters
    fshape = params.filter_shape
    n_hidden = int(np.prod(spec.hshape))
    n_vis = int(np.prod(shape))
    ones_h = sfft.rfftn(np.ones(spec.hshape), s=shape)
    th = kernels.get_threads()

    cross_w = 0.0
    cross_s = 0.0
    db = np.zeros(m)
    da = 0.0
    v_sum = 0.0
    h_sum = np.zeros(m)
    for k, (vp, vn) in enumerate(zip(positives, negatives)):
        if vp.shape != shape or vn.shape != shape:
            raise ValueError("minibatch masks must share one grid")
        Vp = sfft.rfftn(vp, workers=th)
        Vn = sfft.rfftn(vn, workers=th)
        php = expit(spec.hidden_from_spectrum(Vp)) if pos_hidden is None else pos_hidden[k]
        phn = expit(spec.hidden_from_spectrum(Vn))
        Gp = sfft.rfftn(php, s=shape, axes=_AXES, workers=th)
        Gn = sfft.rfftn(phn, s=shape, axes=_AXES, workers=th)
        # correlation is linear, so positive and negative phases share one inverse transform
        cross_w = cross_w + Vp[None] * np.conj(Gp) - Vn[None] * np.conj(Gn)
        cross_s = cross_s + (Vp - Vn) * np.conj(ones_h)
        hp = php.sum(axis=_AXES)
        hn = phn.sum(axis=_AXES)
        db += hp - hn
        da += vp.sum() - vn.sum()
        v_sum += vp.sum() + vn.sum()
        h_sum += hp + hn
    dW = _correlate_batch(cross_w, shape, fshape)
    dS = _correlate_batch(cross_s, shape, fshape)

    n = len(positives)
    if enhanced:
        v_bar = v_sum / (2 * n * n_vis)
        h_bar = h_sum / (2 * n * n_hidden)
        dW = dW - v_bar * db[:, None, None, None] - h_bar[:, None, None, None] * dS[None]
        w_tot = dW.sum(axis=_AXES)
        db = db - v_bar * w_tot
        da = da - float(h_bar @ w_tot)
    dW = tie(dW, params.block)
    return CrbmGradient(dW / (n * n_hidden), db / (n * n_hidden), da / (n * n_vis))


def cd_statistics(params: CrbmParams, positives, negatives, enhanced: bool = True) -> CrbmGradient:
    """Data-minus-model gradient from paired positive/negative visible maps.

    Hidden statistics use mean-field probabilities.  With ``enhanced`` the
    centered (bit-flip invariant) update is returned; filter gradients are
    block-tied either way.
    """
    positives = [np.asarray(v, dtype=np.float64) for v in positives]
    negatives = [np.asarray(v, dtype=np.float64) for v in negatives]
    if not positives or len(positives) != len(negatives):
        raise ValueError("need a non-empty minibatch with one negative per positive")
    spec = _Spectra(params, positives[0].shape)
    return _statistics(params, spec, positives, negatives, enhanced=enhanced)


def cd1_gradient(params: CrbmParams, minibatch, rng, enhanced: bool = True) -> CrbmGradient:
    """CD-1: one v -> H -> v' -> H' step per mask, sampled H, mean-field v'."""
    minibatch = [np.asarray(v, dtype=np.float64) for v in minibatch]
    if not minibatch:
        raise ValueError("empty minibatch")
    spec = _Spectra(params, minibatch[0].shape)
    negatives, pos_hidden = [], []
    for v in minibatch:
        ph = expit(spec.hidden_input(v))
        h = rng.random(ph.shape) < ph
        pos_hidden.append(ph)
        negatives.append(expit(spec.visible_input(h)))
    return _statistics(params, spec, minibatch, negatives, pos_hidden, enhanced)


def apply_gradient(params: CrbmParams, grad: CrbmGradient, step: float) -> CrbmParams:
    return replace(
        params,
        filters=params.filters + step * grad.filters,
        hidden_bias=params.hidden_bias + step * grad.hidden_bias,
        visible_bias=params.visible_bias + step * grad.visible_bias,
    )


@dataclass(frozen=True)
class TrainConfig:
    n_filters: int = 40
    filter_shape: tuple[int, int, int] = (14, 14, 14)
    block: tuple[int, int, int] = (2, 2, 2)
    steps: int = 9600
    step_size: float = 0.1
    minibatch: int = 10
    init_std: float = 0.01
    seed: int = 0
    enhanced: bool = True

    def __post_init__(self):
        if any(r % b for r, b in zip(self.filter_shape, self.block)):
            raise ValueError(f"filter shape {self.filter_shape} not divisible by block {self.block}")
        if self.n_filters < 1 or self.minibatch < 1 or self.steps < 0:
            raise ValueError("n_filters and minibatch must be >= 1, steps >= 0")

    def as_dict(self) -> dict:
        return {
            "n_filters": self.n_filters,
            "filter_shape": list(self.filter_shape),
            "block": list(self.block),
            "steps": self.steps,
            "step_size": self.step_size,
            "minibatch": self.minibatch,
            "init_std": self.init_std,
            "seed": self.seed,
            "enhanced": self.enhanced,
        }


def init_params(config: TrainConfig, rng) -> CrbmParams:
    bshape = tuple(r // b for r, b in zip(config.filter_shape, config.block))
    coarse = rng.normal(0.0, config.init_std, (config.n_filters,) + bshape)
    w = coarse
    for ax, b in zip((1, 2, 3), config.block):
        w = np.repeat(w, b, axis=ax)
    return CrbmParams(w, np.zeros(config.n_filters), 0.0, config.block)


def train_crbm(corpus, config: TrainConfig = TrainConfig(), holdout=None) -> CrbmParams:
    """Stochastic gradient ascent with CD-1 on a list of binary masks.

    ``holdout`` (a mask) is scored by free energy once per epoch; the whole
    log lands in ``params.metadata["log"]``.
    """
    corpus = [np.asarray(v, dtype=np.float64) for v in corpus]
    if not corpus:
        raise ValueError("empty training corpus")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 8])))
    params = init_params(config, rng)
    per_epoch = max(1, -(-len(corpus) // config.minibatch))
    probe = corpus[: min(len(corpus), 8)]
    log = []

    def record(step):
        entry = {"step": step, "train_free_energy": float(np.mean([free_energy(params, v) for v in probe]))}
        if holdout is not None:
            entry["holdout_free_energy"] = free_energy(params, holdout)
        log.append(entry)

    record(0)
    for step in range(1, config.steps + 1):
        k = min(config.minibatch, len(corpus))
        idx = rng.choice(len(corpus), size=k, replace=False)
        grad = cd1_gradient(params, [corpus[i] for i in idx], rng, config.enhanced)
        params = apply_gradient(params, grad, config.step_size)
        if step % per_epoch == 0 or step == config.steps:
            record(step)
    meta = {
        "M": config.n_filters,
        "filter_shape": list(config.filter_shape),
        "block": list(config.block),
        "training": config.as_dict(),
        "seed": config.seed,
        "corpus_size": len(corpus),
        "log": log,
    }
    return replace(params, metadata=meta)


def augmented_corpus(masks) -> list[np.ndarray]:
    out = []
    for m in masks:
        out.extend(flip_augment(np.asarray(m, dtype=np.uint8)))
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: CrbmParams, path) -> Path:
    """Binary layout: magic, version, M, filter shape, JSON length, JSON, float64 payload."""
    path = Path(path)
    meta = {k: v for k, v in params.metadata.items() if not k.startswith("_")}
    meta.update({"M": params.n_filters, "filter_shape": list(params.filter_shape), "block": list(params.block)})
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II3II", VERSION, params.n_filters, *params.filter_shape, len(blob)))
    buf.write(blob)
    buf.write(params.filters.astype("<f8").tobytes(order="C"))
    buf.write(params.hidden_bias.astype("<f8").tobytes())
    buf.write(np.array([params.visible_bias], dtype="<f8").tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> CrbmParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a cRBM checkpoint")
    version, m, rx, ry, rz, jlen = struct.unpack_from("<II3II", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<II3II")
    meta = json.loads(raw[off:off + jlen].decode("utf-8"))
    off += jlen
    nw = m * rx * ry * rz
    vals = np.frombuffer(raw, dtype="<f8", count=nw + m + 1, offset=off)
    filters = vals[:nw].reshape(m, rx, ry, rz).astype(np.float64)
    return CrbmParams(filters, vals[nw:nw + m].copy(), float(vals[-1]), tuple(meta.get("block", (1, 1, 1))), meta)
