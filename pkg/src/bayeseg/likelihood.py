"""GMM likelihood with an additive DCT bias field, and its restricted prior."""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp, multigammaln

from .labels import CORE, EDEMA, GMM_CODE, GMMS, GmmMapping
from .volume import MultiChannelImage

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
FLAIR_LIKE = ("FLAIR", "FLAIR2", "DIR")
# solver roundoff allowed on tight constraint rows
FEASIBILITY_TOL = 1e-10


class NotPositiveDefinite(ValueError):
    """Covariance matrix failed Cholesky even after jitter."""


def canonical_tag(tag: str, aliases=None) -> str:
    """Map a modality tag onto the row it shares in the tumor tables."""
    if aliases and tag in aliases:
        return aliases[tag]
    return "FLAIR" if tag in FLAIR_LIKE else tag


# ---------------------------------------------------------------- layout / theta


@dataclass(frozen=True)
class ComponentLayout:
    """Flat indexing of every Gaussian component across the X mixtures."""

    components: tuple[int, ...]

    @classmethod
    def from_mapping(cls, mapping: GmmMapping) -> "ComponentLayout":
        return cls(tuple(mapping.components))

    @property
    def n_gmms(self) -> int:
        return len(self.components)

    @property
    def total(self) -> int:
        return int(sum(self.components))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.components)]).astype(np.int64)

    @property
    def gmm_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_gmms), self.components)

    def slice(self, x: int) -> slice:
        o = self.offsets
        return slice(int(o[x]), int(o[x + 1]))

    def table(self) -> np.ndarray:
        """(X, Gmax) global component indices, -1 padded."""
        gmax = max(self.components)
        t = -np.ones((self.n_gmms, gmax), dtype=np.int64)
        for x in range(self.n_gmms):
            s = self.slice(x)
            t[x, : s.stop - s.start] = np.arange(s.start, s.stop)
        return t


@dataclass(frozen=True, eq=False)
class Theta:
    """Mixture weights, means, covariances (one row per component) and bias C."""

    weights: np.ndarray  # (G,)
    means: np.ndarray  # (G, N)
    covs: np.ndarray  # (G, N, N)
    bias: np.ndarray  # (N, P)
    layout: ComponentLayout

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        s = np.array(self.covs, dtype=np.float64)
        c = np.array(self.bias, dtype=np.float64)
        g = self.layout.total
        if w.shape != (g,) or mu.ndim != 2 or mu.shape[0] != g:
            raise ValueError(f"expected {g} components")
        n = mu.shape[1]
        if s.shape != (g, n, n) or c.ndim != 2 or c.shape[0] != n:
            raise ValueError("covariance or bias shape inconsistent with channel count")
        if (w < 0).any():
            raise ValueError("mixture weights must be nonnegative")
        for x in range(self.layout.n_gmms):
            tot = w[self.layout.slice(x)].sum()
            if abs(tot - 1.0) > 1e-9:
                raise ValueError(f"weights of GMM {GMMS[x] if x < len(GMMS) else x} sum to {tot}")
        if not np.allclose(s, np.swapaxes(s, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(s).max())):
            raise ValueError("covariances must be symmetric")
        for a in (w, mu, s, c):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", s)
        object.__setattr__(self, "bias", c)

    @property
    def n_channels(self) -> int:
        return self.means.shape[1]

    @property
    def n_basis(self) -> int:
        return self.bias.shape[1]

    def update(self, **kw) -> "Theta":
        return replace(self, **kw)

    def stacked_means(self) -> np.ndarray:
        """mu stacked as (..., mu_g^T, ...), index g * N + n."""
        return self.means.reshape(-1).copy()


def cholesky(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; retries once with jitter 1e-10 * trace / N."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        n = S.shape[0]
        jit = 1e-10 * max(np.trace(S), 1e-300) / n
        try:
            return np.linalg.cholesky(S + jit * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("covariance is not positive definite") from exc


# ---------------------------------------------------------------- bias basis


def _dct_factor(n: int, k: int) -> np.ndarray:
    x = np.arange(n)[:, None] + 0.5
    f = np.cos(np.pi * np.arange(k)[None, :] * x / n)
    f[:, 0] *= np.sqrt(1.0 / n)
    f[:, 1:] *= np.sqrt(2.0 / n)
    return f


@dataclass(frozen=True, eq=False)
class BiasBasis:
    """Separable 3D DCT-II basis; column p = a + k (b + k c) for axis freqs (a, b, c).

    The I x P matrix is never needed for the field, projections, or weighted
    Gram matrices, which all factor over axes.
    """

    shape: tuple[int, int, int]
    per_axis: int
    factors: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def n_basis(self) -> int:
        return self.per_axis ** 3

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def _coef(self, c: np.ndarray) -> np.ndarray:
        k = self.per_axis
        return np.asarray(c, dtype=np.float64).reshape(k, k, k, order="F")

    def volume(self, coeffs: np.ndarray) -> np.ndarray:
        """Bias field on the grid for a length-P coefficient vector."""
        fx, fy, fz = self.factors
        return np.einsum("xa,yb,zc,abc->xyz", fx, fy, fz, self._coef(coeffs), optimize=True)

    def field(self, C: np.ndarray) -> np.ndarray:
        """(I, N) voxel-wise offsets C phi_i, x-fastest order."""
        C = np.atleast_2d(C)
        out = np.empty((self.size, C.shape[0]))
        for n in range(C.shape[0]):
            out[:, n] = self.volume(C[n]).reshape(-1, order="F") if C[n].any() else 0.0
        return out

    def project(self, values: np.ndarray) -> np.ndarray:
        """Phi^T v for a voxel vector (length I, x-fastest)."""
        v = np.asarray(values, dtype=np.float64).reshape(self.shape, order="F")
        fx, fy, fz = self.factors
        r = np.einsum("xyz,xa,yb,zc->abc", v, fx, fy, fz, optimize=True)
        return r.reshape(-1, order="F")

    def gram(self, weights: np.ndarray) -> np.ndarray:
        """Phi^T diag(w) Phi, shape (P, P)."""
        k = self.per_axis
        w = np.asarray(weights, dtype=np.float64).reshape(self.shape, order="F")
        fx, fy, fz = self.factors
        px = (fx[:, :, None] * fx[:, None, :]).reshape(fx.shape[0], k * k)
        py = (fy[:, :, None] * fy[:, None, :]).reshape(fy.shape[0], k * k)
        pz = (fz[:, :, None] * fz[:, None, :]).reshape(fz.shape[0], k * k)
        t = np.tensordot(px, w, axes=(0, 0))  # (aA, y, z)
        t = np.tensordot(t, py, axes=(1, 0))  # (aA, z, bB)
        t = np.tensordot(t, pz, axes=(1, 0))  # (aA, bB, cC)
        g = t.reshape(k, k, k, k, k, k)  # a A b B c C
        return g.transpose(4, 2, 0, 5, 3, 1).reshape(k ** 3, k ** 3)

    def matrix(self) -> np.ndarray:
        """Dense I x P matrix (small grids only)."""
        fx, fy, fz = self.factors
        full = np.einsum("xa,yb,zc->xyzabc", fx, fy, fz)
        k = self.per_axis
        full = full.transpose(0, 1, 2, 5, 4, 3).reshape(self.shape + (k ** 3,))
        return full.reshape(self.size, k ** 3, order="F")


def build_dct_basis(shape, per_axis_count: int = 4) -> BiasBasis:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise ValueError("basis needs a 3D grid")
    if per_axis_count < 1:
        raise ValueError("per_axis_count must be >= 1")
    if per_axis_count > min(shape):
        raise ValueError(f"{per_axis_count} frequencies exceed axis length {min(shape)}")
    return BiasBasis(shape, per_axis_count, tuple(_dct_factor(n, per_axis_count) for n in shape))


# ---------------------------------------------------------------- densities


def component_log_densities(residual: np.ndarray, theta: Theta) -> np.ndarray:
    """log N(r_i | mu_g, Sigma_g) for bias-corrected data ``r = d - C phi``, shape (I, G)."""
    r = np.atleast_2d(residual)
    n = r.shape[1]
    out = np.empty((r.shape[0], theta.layout.total))
    for g in range(theta.layout.total):
        L = cholesky(theta.covs[g])
        u = solve_triangular(L, (r - theta.means[g]).T, lower=True, check_finite=False)
        out[:, g] = -0.5 * np.einsum("ij,ij->j", u, u) - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    return out


def weighted_component_logs(residual: np.ndarray, theta: Theta) -> np.ndarray:
    """log gamma_g + log N(...), shape (I, G)."""
    with np.errstate(divide="ignore"):
        return component_log_densities(residual, theta) + np.log(theta.weights)


def gmm_log_likelihoods(weighted: np.ndarray, layout: ComponentLayout) -> np.ndarray:
    """log p_i(d_i | x, theta) for every GMM x, shape (I, X)."""
    out = np.empty((weighted.shape[0], layout.n_gmms))
    for x in range(layout.n_gmms):
        s = layout.slice(x)
        out[:, x] = weighted[:, s.start] if s.stop - s.start == 1 else logsumexp(weighted[:, s], axis=1)
    return out


def residuals(voxels: np.ndarray, theta: Theta, basis: BiasBasis | None) -> np.ndarray:
    if basis is None or not theta.bias.any():
        return voxels
    return voxels - basis.field(theta.bias)


def voxel_likelihood(d_i, x: int, theta: Theta, phi_i=None) -> float:
    """Mixture density of one voxel's intensity vector under GMM ``x``."""
    d = np.atleast_1d(np.asarray(d_i, dtype=np.float64))
    if phi_i is not None:
        d = d - theta.bias @ np.asarray(phi_i, dtype=np.float64)
    s = theta.layout.slice(x)
    logs = weighted_component_logs(d[None, :], theta)[0, s]
    return float(np.exp(logsumexp(logs)))


# ---------------------------------------------------------------- constraints


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    A: np.ndarray
    b: np.ndarray
    rows: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def violation(self, mu_stacked: np.ndarray) -> np.ndarray:
        return self.A @ mu_stacked - self.b

    def satisfied(self, mu_stacked: np.ndarray, tol: float = FEASIBILITY_TOL) -> bool:
        """A mu <= b up to roundoff (``tol`` relative to 1 + |b|)."""
        if self.n_rows == 0:
            return True
        return bool((self.violation(mu_stacked) <= tol * (1.0 + np.abs(self.b))).all())


def build_constraints(present_channels, layout: ComponentLayout, aliases=None) -> ConstraintSystem:
    """Linear inequality rows A mu <= b on the stacked means.

    Each max/min against the two global references (GWM, GGM) becomes one
    row per reference component.
    """
    tags = [canonical_tag(t, aliases) for t in present_channels]
    n = len(tags)
    dim = layout.total * n
    refs = [layout.slice(GMM_CODE["GWM"]), layout.slice(GMM_CODE["GGM"])]
    ref_comps = [g for s in refs for g in range(s.start, s.stop)]
    A, b, names = [], [], []

    def emit(target: int, ch: int, lower: bool, offset: float, label: str):
        for r in ref_comps:
            row = np.zeros(dim)
            # lower: mu_t >= mu_r + off  ->  mu_r - mu_t <= -off
            # upper: mu_t <= mu_r - off  ->  mu_t - mu_r <= -off
            sgn = -1.0 if lower else 1.0
            row[target * n + ch] += sgn
            row[r * n + ch] -= sgn
            A.append(row)
            b.append(-offset)
            names.append(f"{label} {'>=' if lower else '<='} ref{r} [{present_channels[ch]}]")

    edema = layout.slice(EDEMA)
    tc1 = layout.slice(CORE).start
    us = layout.slice(GMM_CODE["unspecified"])
    ch_ = layout.slice(GMM_CODE["optic-chiasm"])
    for c, tag in enumerate(tags):
        if tag == "FLAIR":
            for g in range(edema.start, edema.stop):
                emit(g, c, True, np.log(1.15), "edema")
            emit(tc1, c, True, 0.0, "TC1")
        if tag == "T1c":
            emit(tc1, c, True, np.log(1.10), "TC1")
        if tag in ("FLAIR", "T1c"):
            for g in range(us.start, us.stop):
                emit(g, c, False, np.log(1.05), "unspecified")
        if tag == "FLAIR":
            for g in range(ch_.start, ch_.stop):
                emit(g, c, False, 0.0, "chiasm")
    if not any(t in ("FLAIR", "T1c") for t in tags):
        log.info("no FLAIR-like or T1c channel: mean constraints disabled")
    order = np.argsort([_row_key(nm) for nm in names], kind="stable") if names else []
    A = np.array(A).reshape(-1, dim)[order] if names else np.zeros((0, dim))
    b = np.array(b)[order] if names else np.zeros(0)
    return ConstraintSystem(A, b, tuple(names[i] for i in order))


def _row_key(name: str) -> int:
    for i, lab in enumerate(("edema", "TC1", "unspecified", "chiasm")):
        if name.startswith(lab):
            return i
    return 9


# ---------------------------------------------------------------- hyperpriors


@dataclass(frozen=True, eq=False)
class HyperPriors:
    alpha0: float
    scatter: np.ndarray  # (X, N, N)
    nu: np.ndarray  # (X,)
    constraints: ConstraintSystem

    @classmethod
    def flat_covariance(cls, layout: ComponentLayout, n_channels: int, constraints=None) -> "HyperPriors":
        """Limit in which every conditional mode is the classical EM update."""
        x = layout.n_gmms
        cons = constraints or ConstraintSystem(np.zeros((0, layout.total * n_channels)), np.zeros(0))
        return cls(1.0, np.zeros((x, n_channels, n_channels)), np.full(x, -(n_channels + 1.0)), cons)


def dirichlet_strength(n_voxels: int) -> float:
    return 1.0 + 1e-4 * n_voxels


def scatter_hyperprior(data, G_x: int, expected_voxels: float, wide: bool = False, n_gmms: int = 12):
    """(S_x^0, nu_x^0) from the global data covariance diagonal."""
    if expected_voxels <= 0:
        raise ValueError("expected voxel count must be positive")
    d = data.voxels() if isinstance(data, MultiChannelImage) else np.atleast_2d(data)
    n = d.shape[1]
    nu = n + 0.1 * expected_voxels / G_x
    var = d.var(axis=0)
    X = 1.0 if wide else float(n_gmms)
    diag = np.maximum(nu * var / X ** 2, 1e-8)
    return np.diag(diag), float(nu)


def expected_voxels(atlas_voxels: np.ndarray, mapping: GmmMapping, w: float, u: float) -> np.ndarray:
    """I_x: atlas mass for normal GMMs, brain mass times w(1-u) / wu for edema / core."""
    table = mapping.normal_table
    ix = np.zeros(mapping.n_gmms)
    mass = atlas_voxels.sum(axis=0)
    np.add.at(ix, table, mass)
    brain = mass[sorted(mapping.brain_set)].sum()
    ix[EDEMA] = w * (1 - u) * brain
    ix[CORE] = w * u * brain
    return np.maximum(ix, 1.0)


def default_hyperpriors(data: MultiChannelImage, atlas_voxels: np.ndarray, mapping: GmmMapping,
                        w: float = 0.1, u: float = 0.5, aliases=None) -> HyperPriors:
    layout = ComponentLayout.from_mapping(mapping)
    ix = expected_voxels(atlas_voxels, mapping, w, u)
    scat, nus = [], []
    for x in range(mapping.n_gmms):
        S, nu = scatter_hyperprior(data, mapping.components[x], ix[x], wide=(x == GMM_CODE["unspecified"]),
                                   n_gmms=mapping.n_gmms)
        scat.append(S)
        nus.append(nu)
    cons = build_constraints(data.tags, layout, aliases)
    return HyperPriors(dirichlet_strength(data.shape.size), np.array(scat), np.array(nus), cons)


def _proper_iw(S: np.ndarray, nu: float) -> bool:
    n = S.shape[0]
    if nu <= n - 1:
        return False
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def log_inverse_wishart(Sigma: np.ndarray, nu: float, S: np.ndarray) -> float:
    """IW log density with mode S / (nu + N + 1); only the kernel when improper."""
    n = Sigma.shape[0]
    L = cholesky(Sigma)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    inv = np.linalg.inv(Sigma)
    val = -0.5 * (nu + n + 1) * logdet - 0.5 * np.trace(S @ inv)
    if _proper_iw(S, nu):
        _, logdet_s = np.linalg.slogdet(S)
        val += 0.5 * nu * logdet_s - 0.5 * nu * n * np.log(2.0) - multigammaln(0.5 * nu, n)
    return float(val)


def log_dirichlet(gamma: np.ndarray, alpha: float) -> float:
    g = len(gamma)
    if g == 1:
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        body = (alpha - 1.0) * np.log(gamma) if alpha != 1.0 else np.zeros(g)
    return float(gammaln(g * alpha) - g * gammaln(alpha) + body.sum())


def log_prior_theta(theta: Theta, hyper: HyperPriors) -> float:
    if not hyper.constraints.satisfied(theta.stacked_means()):
        return -np.inf
    lay = theta.layout
    total = 0.0
    for x in range(lay.n_gmms):
        s = lay.slice(x)
        total += log_dirichlet(theta.weights[s], hyper.alpha0)
        for g in range(s.start, s.stop):
            total += log_inverse_wishart(theta.covs[g], hyper.nu[x], hyper.scatter[x])
    return total


# ---------------------------------------------------------------- checkpoint

THETA_MAGIC = b"THTA"


def save_theta(theta: Theta, path, tags=()) -> Path:
    path = Path(path)
    header = {
        "gmms": list(GMMS),
        "components": list(theta.layout.components),
        "channels": list(tags),
        "n_channels": theta.n_channels,
        "n_basis": theta.n_basis,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(THETA_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for a in (theta.weights, theta.means, theta.covs, theta.bias):
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_theta(path) -> tuple[Theta, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != THETA_MAGIC:
        raise ValueError(f"{path} is not a theta checkpoint")
    (jlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + jlen].decode("utf-8"))
    layout = ComponentLayout(tuple(header["components"]))
    g, n, p = layout.total, header["n_channels"], header["n_basis"]
    vals = np.frombuffer(raw, dtype="<f8", offset=8 + jlen)
    sizes = [g, g * n, g * n * n, n * p]
    parts = np.split(vals, np.cumsum(sizes)[:-1])
    theta = Theta(parts[0], parts[1].reshape(g, n), parts[2].reshape(g, n, n), parts[3].reshape(n, p), layout)
    return theta, header
