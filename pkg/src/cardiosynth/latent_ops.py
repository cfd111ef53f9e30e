"""Latent-space label deformation.

Everything here operates on per-subject latent matrices (one row per
short-axis slice, base to apex). Slice equalization fits a cubic spline
per latent dimension; subject morphing and pathology progression are
linear interpolation; pathology sampling draws from a truncated normal
parameterized by per-cohort statistics, then couples latent dimensions and
slices through Cholesky factors of Kendall-tau correlation matrices so
that stacked 2D reconstructions stay 3D-consistent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr, ndtri
from scipy.stats import kendalltau

from .data_io import one_hot
from .errors import EmptyCohortError, GeometryError, NotPositiveDefiniteError, ShapeMismatchError

N_EQUALIZED_SLICES = 32
DEFAULT_ALPHAS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class LatentSubject:
    """(n_s, n_z) latent coordinates, rows in anatomical slice order."""

    codes: np.ndarray
    subject_id: str = "unknown"

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float64)
        if codes.ndim != 2:
            raise ShapeMismatchError(f"codes must be 2D, got shape {codes.shape}")
        if not np.isfinite(codes).all():
            raise ValueError("latent codes contain non-finite entries")
        object.__setattr__(self, "codes", codes)

    @property
    def n_s(self) -> int:
        return self.codes.shape[0]

    @property
    def n_z(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class PathologyStats:
    """Elementwise cohort statistics of latent matrices, (n_s, n_z) each."""

    mu: np.ndarray
    sigma: np.ndarray
    min: np.ndarray
    max: np.ndarray
    pathology: str = "UNKNOWN"
    n_subjects: int = 0

    def __post_init__(self):
        for name in ("mu", "sigma", "min", "max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), np.float64))
        if not (self.mu.shape == self.sigma.shape == self.min.shape == self.max.shape):
            raise ShapeMismatchError("stats matrices must share one shape")
        if (self.sigma < 0).any() or (self.min > self.mu).any() or (self.mu > self.max).any():
            raise ValueError("stats violate min <= mu <= max, sigma >= 0")


@dataclass(frozen=True)
class CorrelationModel:
    """Kendall-tau correlations and Cholesky factors for dims and slices."""

    corr_z: np.ndarray
    corr_s: np.ndarray
    chol_z: np.ndarray = field(default=None)  # type: ignore[assignment]
    chol_s: np.ndarray = field(default=None)  # type: ignore[assignment]
    jitter_z: float = 0.0
    jitter_s: float = 0.0

    def __post_init__(self):
        for name in ("corr_z", "corr_s"):
            m = np.asarray(getattr(self, name), np.float64)
            object.__setattr__(self, name, m)
        if self.chol_z is None:
            L, eps = cholesky_jittered(self.corr_z)
            object.__setattr__(self, "chol_z", L)
            object.__setattr__(self, "jitter_z", eps)
        if self.chol_s is None:
            L, eps = cholesky_jittered(self.corr_s)
            object.__setattr__(self, "chol_s", L)
            object.__setattr__(self, "jitter_s", eps)

    @classmethod
    def identity(cls, n_z: int, n_s: int) -> "CorrelationModel":
        return cls(corr_z=np.eye(n_z), corr_s=np.eye(n_s))


# ---------------------------------------------------------------------------
# encoding / decoding through a trained VAE

def encode_subject(vae, subject) -> LatentSubject:
    """Encode every slice's one-hot label map; row i is the posterior mean."""
    if not subject.is_conforming():
        raise GeometryError(
            "subject must be preprocessed (128x128 @ 1.5mm) before encoding")
    rows = [vae.encode(one_hot(subject.labels[i])).mu for i in range(subject.n_slices)]
    return LatentSubject(codes=np.stack(rows), subject_id=subject.meta.subject_id)


def decode_subject(vae, ls: LatentSubject) -> np.ndarray:
    """Decode each row to a probability map and argmax; (n_s, H, W) labels."""
    slices = [np.argmax(vae.decode(ls.codes[i]), axis=0).astype(np.int16)
              for i in range(ls.n_s)]
    return np.stack(slices)


# ---------------------------------------------------------------------------
# interpolation

def cubic_interpolate(values: np.ndarray, n_target: int,
                      bc_type: str = "not-a-knot") -> np.ndarray:
    """Cubic-spline upsample of (n, d) rows over t = i/(n-1) to n_target rows.

    The default boundary condition reproduces cubic polynomials exactly;
    endpoint rows are copied from the input verbatim.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n < 2:
        raise ShapeMismatchError("need at least 2 rows to interpolate")
    if n_target < n:
        raise ValueError(f"n_target {n_target} < input rows {n}: only upsampling")
    t_in = np.linspace(0.0, 1.0, n)
    t_out = np.linspace(0.0, 1.0, n_target)
    if n == 2:  # straight segment; spline bc handling differs across versions
        out = values[0] + np.outer(t_out, values[1] - values[0])
    else:
        out = CubicSpline(t_in, values, axis=0, bc_type=bc_type)(t_out)
    out[0] = values[0]
    out[-1] = values[-1]
    return out


def intra_subject_interpolate(ls: LatentSubject,
                              n_target: int = N_EQUALIZED_SLICES) -> LatentSubject:
    """Equalize slice count by cubic interpolation; first/last rows are kept."""
    return LatentSubject(codes=cubic_interpolate(ls.codes, n_target),
                         subject_id=ls.subject_id)


def inter_subject_interpolate(a: LatentSubject, b: LatentSubject,
                              alphas: list[float]) -> list[LatentSubject]:
    """Linear morphs (1-alpha)*a + alpha*b, one LatentSubject per alpha."""
    if a.codes.shape != b.codes.shape:
        raise ShapeMismatchError(
            f"latent shapes differ: {a.codes.shape} vs {b.codes.shape}")
    out = []
    for alpha in alphas:
        codes = (1.0 - alpha) * a.codes + alpha * b.codes
        out.append(LatentSubject(
            codes=codes, subject_id=f"{a.subject_id}-to-{b.subject_id}@{alpha:g}"))
    return out


def pathology_interpolate(z_nor: LatentSubject, z_pseudo: LatentSubject,
                          alphas: tuple[float, ...] = DEFAULT_ALPHAS) -> list[LatentSubject]:
    """Blend a normal subject toward a correlated pseudo-pathological sample."""
    return inter_subject_interpolate(z_nor, z_pseudo, list(alphas))


# ---------------------------------------------------------------------------
# pathology statistics and sampling

def estimate_pathology_stats(cohort: list[LatentSubject], tag: str = "UNKNOWN") -> PathologyStats:
    """Elementwise mean/std/min/max across a cohort of equal-sized subjects."""
    if not cohort:
        raise EmptyCohortError("cannot estimate statistics from an empty cohort")
    shapes = {ls.codes.shape for ls in cohort}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"heterogeneous latent shapes in cohort: {shapes}")
    stacked = np.stack([ls.codes for ls in cohort])
    return PathologyStats(mu=stacked.mean(axis=0), sigma=stacked.std(axis=0),
                          min=stacked.min(axis=0), max=stacked.max(axis=0),
                          pathology=tag, n_subjects=len(cohort))


def truncated_normal(mu: np.ndarray, sigma: np.ndarray, lo: np.ndarray,
                     hi: np.ndarray, rng: np.random.Generator,
                     narrow_mass: float = 0.01, max_rounds: int = 50) -> np.ndarray:
    """Elementwise draws from Normal(mu, sigma) truncated to [lo, hi].

    Rejection sampling, falling back to inverse-CDF where the acceptance
    region holds less than ``narrow_mass`` probability (or rejection stalls).
    Entries with sigma == 0 (or lo == hi) return mu exactly.
    """
    mu, sigma, lo, hi = np.broadcast_arrays(*(np.asarray(a, np.float64)
                                              for a in (mu, sigma, lo, hi)))
    out = np.array(mu, dtype=np.float64, copy=True)
    active = (sigma > 0) & (hi > lo)
    if not active.any():
        return out

    alpha = np.zeros_like(out)
    beta = np.zeros_like(out)
    alpha[active] = (lo[active] - mu[active]) / sigma[active]
    beta[active] = (hi[active] - mu[active]) / sigma[active]
    mass = np.zeros_like(out)
    mass[active] = ndtr(beta[active]) - ndtr(alpha[active])

    reject = active & (mass >= narrow_mass)
    pending = reject.copy()
    for _ in range(max_rounds):
        if not pending.any():
            break
        idx = np.nonzero(pending)
        draw = rng.standard_normal(idx[0].size)
        ok = (draw >= alpha[idx]) & (draw <= beta[idx])
        took = tuple(ax[ok] for ax in idx)
        out[took] = mu[took] + sigma[took] * draw[ok]
        pending[took] = False

    inverse = (active & ~reject) | pending
    if inverse.any():
        idx = np.nonzero(inverse)
        p_lo = ndtr(alpha[idx])
        p_hi = ndtr(beta[idx])
        u = p_lo + (p_hi - p_lo) * rng.uniform(size=idx[0].size)
        out[idx] = mu[idx] + sigma[idx] * ndtri(u)
    np.clip(out, lo, hi, out=out)
    return out


def sample_truncated_normal(stats: PathologyStats, rng: np.random.Generator,
                            subject_id: str = "pseudo") -> LatentSubject:
    """One pseudo-pathological latent draw, elementwise within [min, max]."""
    codes = truncated_normal(stats.mu, stats.sigma, stats.min, stats.max, rng)
    return LatentSubject(codes=codes, subject_id=subject_id)


# ---------------------------------------------------------------------------
# correlation machinery

def kendall_tau_matrix(samples: np.ndarray) -> np.ndarray:
    """Kendall tau-b between every pair of columns of an (m, d) matrix.

    Constant columns make tau undefined; those entries are set to 0
    off-diagonal and a single warning lists the columns.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ShapeMismatchError(f"need an (m>=2, d) matrix, got {samples.shape}")
    m, d = samples.shape
    constant = np.array([np.unique(samples[:, j]).size == 1 for j in range(d)])
    if constant.any():
        warnings.warn(
            f"constant columns {np.nonzero(constant)[0].tolist()} have undefined "
            "tau; their off-diagonal entries are set to 0", stacklevel=2)
    corr = np.eye(d)
    for j in range(d):
        for k in range(j + 1, d):
            if constant[j] or constant[k]:
                tau = 0.0
            else:
                tau = kendalltau(samples[:, j], samples[:, k]).statistic
                if np.isnan(tau):
                    tau = 0.0
            corr[j, k] = corr[k, j] = tau
    return corr


def cholesky_jittered(C: np.ndarray, eps_start: float = 1e-10,
                      eps_max: float = 1e-4) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of C, adding escalating eps*I if not PD.

    Returns (L, eps_used); raises if C stays non-PD at ``eps_max``.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeMismatchError(f"expected a square matrix, got {C.shape}")
    if not np.allclose(C, C.T, atol=1e-9):
        raise ValueError("matrix is not symmetric")
    eps = 0.0
    while True:
        try:
            L = np.linalg.cholesky(C + eps * np.eye(C.shape[0]))
            return L, eps
        except np.linalg.LinAlgError:
            if eps >= eps_max:
                raise NotPositiveDefiniteError(
                    f"matrix not positive-definite even with jitter {eps:g}")
            eps = eps_start if eps == 0.0 else eps * 10.0


def cholesky(C: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == C (jittered if needed)."""
    return cholesky_jittered(C)[0]


def correlate_sample(x: LatentSubject, model: CorrelationModel) -> LatentSubject:
    """Couple latent dimensions, then slices, of an uncorrelated draw.

    Each row r becomes chol_z @ r (dimension coupling), then each column c
    becomes chol_s @ c (slice coupling). With identity factors this is the
    identity map.
    """
    if model.chol_z.shape[0] != x.n_z:
        raise ShapeMismatchError(
            f"chol_z is {model.chol_z.shape} but codes have n_z={x.n_z}")
    if model.chol_s.shape[0] != x.n_s:
        raise ShapeMismatchError(
            f"chol_s is {model.chol_s.shape} but codes have n_s={x.n_s}")
    y = x.codes @ model.chol_z.T
    z = model.chol_s @ y
    return LatentSubject(codes=z, subject_id=f"{x.subject_id}_corr")


def estimate_correlation_model(cohort: list[LatentSubject],
                               reference: LatentSubject) -> CorrelationModel:
    """corr_z from a pathology cohort's stacked slices, corr_s from one subject.

    The dimension correlation pools all slices of all cohort members
    (rows = slice observations); the slice correlation treats the reference
    subject's latent dimensions as observations of its slices.
    """
    if not cohort:
        raise EmptyCohortError("need a nonempty cohort for dimension correlation")
    stacked = np.vstack([ls.codes for ls in cohort])
    corr_z = kendall_tau_matrix(stacked)
    corr_s = kendall_tau_matrix(reference.codes.T)
    return CorrelationModel(corr_z=corr_z, corr_s=corr_s)


# ---------------------------------------------------------------------------
# embedding / cluster diagnostics

def embed_latents_2d(all_slice_codes: np.ndarray, labels: list[str],
                     seed: int = 0) -> tuple[np.ndarray, float]:
    """t-SNE embedding of slice codes plus the pathology silhouette score."""
    from sklearn.manifold import TSNE
    from sklearn.metrics import silhouette_score

    codes = np.asarray(all_slice_codes, dtype=np.float64)
    if codes.shape[0] < 10:
        raise ShapeMismatchError("need at least 10 slice codes to embed")
    if codes.shape[0] != len(labels):
        raise ShapeMismatchError("one tag per code row required")
    perplexity = min(30.0, max(2.0, (codes.shape[0] - 1) / 3.0))
    emb = TSNE(n_components=2, perplexity=perplexity, init="pca",
               random_state=seed).fit_transform(codes)
    score = float(silhouette_score(emb, labels)) if len(set(labels)) > 1 else 0.0
    return np.asarray(emb, np.float64), score


def nearest_centroid_accuracy(codes: np.ndarray, labels: list[str]) -> float:
    """Leave-in accuracy of a nearest-centroid classifier on standardized codes."""
    codes = np.asarray(codes, dtype=np.float64)
    tags = np.asarray(labels)
    std = codes.std(axis=0)
    std[std == 0] = 1.0
    z = (codes - codes.mean(axis=0)) / std
    classes = np.unique(tags)
    centroids = np.stack([z[tags == c].mean(axis=0) for c in classes])
    d = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d, axis=1)]
    return float((pred == tags).mean())
