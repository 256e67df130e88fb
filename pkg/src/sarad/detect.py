"""Anomaly maps from local second-order statistics, plus the RX baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComplexSlcImage, DegenerateInputError, Domain, SarImage, exp_transform, log_transform, merge_cross_pol, minmax_normalize

__all__ = [
    "RX_REGULARIZATION",
    "AnomalyMap",
    "CovarianceField",
    "sample_moments",
    "box_sum",
    "local_moments",
    "anomaly_map_frobenius",
    "anomaly_map_l1",
    "normalize_map",
    "mahalanobis",
    "rx_map",
    "merged_log",
    "prepare_input",
    "detect_pipeline",
]

RX_REGULARIZATION = 1e-6


@dataclass(frozen=True)
class AnomalyMap:
    scores: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError(f"anomaly map must be 2-D, got shape {s.shape}")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def shape(self):
        return self.scores.shape


@dataclass(frozen=True)
class CovarianceField:
    """Per-pixel ``c x c`` sample covariance over a ``(2k+1)``-sided boxcar."""

    matrices: np.ndarray
    k: int
    boundary: str = "reflect"


def sample_moments(vectors) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and biased (divide-by-n) covariance of ``(n, c)`` samples."""
    v = np.asarray(vectors)
    if v.ndim == 1:
        v = v[:, None]
    if len(v) == 0:
        raise ValueError("no samples")
    mu = v.mean(axis=0)
    d = v - mu
    return mu, np.einsum("ni,nj->ij", d, d.conj()) / len(v)


def box_sum(field: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the ``(2r+1)^2`` window around each pixel of a reflect-padded field.

    ``field`` has shape ``(h, w, ...)``; the result has the same shape.
    """
    h, w = field.shape[:2]
    if radius == 0:
        return field.copy()
    if 2 * radius + 1 > min(h, w) or radius >= min(h, w):
        raise ValueError(f"window {2 * radius + 1} larger than image {h}x{w}")
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (field.ndim - 2)
    p = np.pad(field, pad, mode="reflect")
    cs = np.zeros((p.shape[0] + 1, p.shape[1] + 1) + p.shape[2:], dtype=p.dtype)
    cs[1:, 1:] = p.cumsum(axis=0).cumsum(axis=1)
    n = 2 * radius + 1
    return cs[n:, n:] - cs[:-n, n:] - cs[n:, :-n] + cs[:-n, :-n]


def _window_stats(x: np.ndarray, radius: int, guard: int | None = None):
    """Local mean and covariance of the ``(h, w, c)`` field ``x``.

    With ``guard`` the inner ``(2g+1)^2`` window is excluded.
    """
    ref = x.mean(axis=(0, 1))
    d = x - ref  # centring keeps the moment differences well conditioned
    outer = np.einsum("hwi,hwj->hwij", d, d.conj())
    s1, s2 = box_sum(d, radius), box_sum(outer, radius)
    n = (2 * radius + 1) ** 2
    if guard is not None:
        s1 = s1 - box_sum(d, guard)
        s2 = s2 - box_sum(outer, guard)
        n -= (2 * guard + 1) ** 2
    m = s1 / n
    cov = s2 / n - np.einsum("hwi,hwj->hwij", m, m.conj())
    return m + ref, cov


def _channels_last(img) -> np.ndarray:
    data = img.data if isinstance(img, (SarImage, ComplexSlcImage)) else np.asarray(img)
    return data[:, :, None] if data.ndim == 2 else data


def local_moments(img, k: int = 3) -> tuple[np.ndarray, CovarianceField]:
    """Boxcar sample mean vector and sample covariance matrix at every pixel."""
    x = _channels_last(img).astype(np.float64)
    if k < 0:
        raise ValueError("k must be non-negative")
    if 2 * k + 1 > min(x.shape[:2]):
        raise ValueError(f"window {2 * k + 1} larger than image {x.shape[0]}x{x.shape[1]}")
    mean, cov = _window_stats(x, k)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mean, CovarianceField(cov, k)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def anomaly_map_frobenius(x, x_hat, k: int = 3) -> AnomalyMap:
    """Squared Frobenius distance between the local covariances of two images."""
    a, b = _channels_last(x), _channels_last(x_hat)
    _same_shape(a, b)
    if isinstance(x, SarImage) and isinstance(x_hat, SarImage) and x.domain is not x_hat.domain:
        raise ValueError("images are in different domains")
    diff = local_moments(a, k)[1].matrices - local_moments(b, k)[1].matrices
    return AnomalyMap(np.einsum("hwij,hwij->hw", diff, diff))


def anomaly_map_l1(x, x_hat) -> AnomalyMap:
    """Per-pixel mean absolute difference across channels."""
    a, b = _channels_last(x), _channels_last(x_hat)
    _same_shape(a, b)
    return AnomalyMap(np.mean(np.abs(a - b), axis=2))


def normalize_map(raw: AnomalyMap | np.ndarray) -> AnomalyMap:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    s = raw.scores if isinstance(raw, AnomalyMap) else np.asarray(raw, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty anomaly map")
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        return AnomalyMap(np.zeros_like(s), True)
    return AnomalyMap(np.clip((s - lo) / (hi - lo), 0.0, 1.0), True)


def mahalanobis(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Real part of ``(x - mu)^H cov^-1 (x - mu)`` for ``(..., c)`` vectors.

    ``mean`` and ``cov`` broadcast against ``x``; one matrix may serve every pixel.
    """
    d = np.asarray(x) - np.asarray(mean)
    cov = np.broadcast_to(np.asarray(cov), d.shape + d.shape[-1:])
    sol = np.linalg.solve(cov, d[..., None])[..., 0]
    return np.real(np.einsum("...i,...i->...", d.conj(), sol))


def rx_map(img, outer: int = 15, guard: int = 7, regularization: float = RX_REGULARIZATION) -> AnomalyMap:
    """Reed-Xiaoli scores with background statistics from a guarded ring.

    ``outer`` and ``guard`` are odd window sides.  The covariance is
    regularized by ``regularization * trace / c`` on the diagonal.
    """
    if outer % 2 == 0 or guard % 2 == 0:
        raise ValueError("window sides must be odd")
    if guard >= outer:
        raise ValueError(f"guard window {guard} must be smaller than outer window {outer}")
    x = _channels_last(img)
    x = x.astype(np.complex128 if np.iscomplexobj(x) else np.float64)
    if outer > min(x.shape[:2]):
        raise ValueError(f"outer window {outer} larger than image {x.shape[0]}x{x.shape[1]}")
    c = x.shape[2]
    mean, cov = _window_stats(x, outer // 2, guard // 2)
    cov = 0.5 * (cov + np.conj(np.swapaxes(cov, -1, -2)))
    tr = np.real(np.trace(cov, axis1=-2, axis2=-1))
    if np.any(tr <= 0):
        raise DegenerateInputError("background covariance is zero; RX is undefined")
    cov = cov + (regularization * tr / c)[..., None, None] * np.eye(c)
    try:
        scores = mahalanobis(x, mean, cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInputError(f"singular background covariance: {exc}") from None
    return AnomalyMap(scores)


def merged_log(noisy: SarImage, despeckler=None) -> SarImage:
    """Despeckle each polarization, then merge the cross channels in log intensity.

    ``noisy`` is a 4-channel linear intensity image.  With ``despeckler``
    ``None`` the image goes through the same chain undenoised.
    """
    from .despeckler import despeckle

    if noisy.domain is not Domain.LINEAR:
        raise ValueError("expected a linear intensity image")
    log_img = log_transform(noisy)
    if despeckler is not None:
        log_img = despeckle(despeckler, log_img)
    return log_transform(merge_cross_pol(exp_transform(log_img)))


def prepare_input(noisy: SarImage, despeckler, lo: float, hi: float) -> SarImage:
    """:func:`merged_log` followed by min-max normalization with fixed bounds."""
    return minmax_normalize(merged_log(noisy, despeckler), lo, hi)[0]


def detect_pipeline(noisy: SarImage, despeckler, aae, k: int = 3, return_images: bool = False):
    """Despeckle, reconstruct with the AAE, and score covariance changes.

    Returns the normalized map, or ``(map, X, X_hat)`` with ``return_images``.
    """
    from .aae import reconstruct_image

    if aae.norm_lo is None or aae.norm_hi is None:
        raise ValueError("AAE checkpoint has no normalization bounds")
    x = prepare_input(noisy, despeckler, aae.norm_lo, aae.norm_hi)
    x_hat = reconstruct_image(aae, x)
    amap = normalize_map(anomaly_map_frobenius(x, x_hat, k))
    return (amap, x, x_hat) if return_images else amap
