"""Image data model, value-domain transforms and patch utilities.

Every image is stored channel-last (``height x width x channels``) in 64-bit
floats and tagged with the value domain it lives in.  Arrays held by the
image types are made read-only so instances can be shared freely.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

__all__ = [
    "Domain",
    "SarImage",
    "ComplexSlcImage",
    "Patch",
    "DegenerateInputError",
    "make_rng",
    "merge_cross_pol",
    "log_transform",
    "exp_transform",
    "minmax_normalize",
    "denormalize",
    "visualization_threshold",
    "clip_top_percent",
    "patch_origins",
    "extract_patches",
    "stitch_patches",
]

LOG_EPSILON = 1e-10


class DegenerateInputError(ValueError):
    """Raised when an input carries no usable dynamic range."""


class Domain(enum.IntEnum):
    """Value domain of an image; the integer is the on-disk tag."""

    LINEAR = 0
    LOG = 1
    NORMLOG = 2
    COMPLEX = 3


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the substream ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SarImage:
    data: np.ndarray
    domain: Domain = Domain.LINEAR

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected h x w x c data, got shape {data.shape}")
        domain = Domain(self.domain)
        if domain is Domain.COMPLEX:
            raise ValueError("complex data belongs in ComplexSlcImage")
        if data.size and not np.all(np.isfinite(data)):
            raise ValueError("image values must be finite")
        if domain is Domain.LINEAR and data.size and data.min() < 0:
            raise ValueError("linear intensities must be non-negative")
        if domain is Domain.NORMLOG and data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("normalized log values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "domain", domain)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, i: int) -> "SarImage":
        return SarImage(self.data[:, :, i : i + 1], self.domain)


@dataclass(frozen=True)
class ComplexSlcImage:
    """Single-look complex image; ``intensity`` is the squared magnitude."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected h x w x c data, got shape {data.shape}")
        if data.size and not (np.all(np.isfinite(data.real)) and np.all(np.isfinite(data.imag))):
            raise ValueError("complex values must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def intensity(self) -> SarImage:
        return SarImage(self.data.real**2 + self.data.imag**2, Domain.LINEAR)


@dataclass(frozen=True)
class Patch:
    origin: tuple[int, int]
    data: np.ndarray
    domain: Domain = Domain.LINEAR

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


def _require_domain(img: SarImage, domain: Domain, op: str) -> None:
    if img.domain is not domain:
        raise ValueError(f"{op} expects a {domain.name} image, got {img.domain.name}")


def merge_cross_pol(img):
    """Average the HV and VH channels (reciprocity): HH,HV,VH,VV -> HH,X,VV.

    Accepts a linear-intensity :class:`SarImage` or a :class:`ComplexSlcImage`;
    complex cross-pol channels are averaged as complex values.
    """
    if img.channels != 4:
        raise ValueError(f"cross-pol merge needs 4 channels (HH,HV,VH,VV), got {img.channels}")
    d = img.data
    merged = np.stack([d[..., 0], 0.5 * (d[..., 1] + d[..., 2]), d[..., 3]], axis=-1)
    if isinstance(img, ComplexSlcImage):
        return ComplexSlcImage(merged)
    _require_domain(img, Domain.LINEAR, "merge_cross_pol")
    return SarImage(merged, Domain.LINEAR)


def log_transform(img: SarImage, epsilon: float = LOG_EPSILON) -> SarImage:
    _require_domain(img, Domain.LINEAR, "log_transform")
    return SarImage(np.log(img.data + epsilon), Domain.LOG)


def exp_transform(img: SarImage, epsilon: float = LOG_EPSILON) -> SarImage:
    """Inverse of :func:`log_transform`; tiny negatives from the epsilon shift are clamped."""
    _require_domain(img, Domain.LOG, "exp_transform")
    return SarImage(np.maximum(np.exp(img.data) - epsilon, 0.0), Domain.LINEAR)


def minmax_normalize(img: SarImage, lo: float | None = None, hi: float | None = None):
    """Affine map of a log image to [0, 1].

    With explicit ``lo``/``hi`` (e.g. dataset-wide bounds stored with a model)
    values outside the range are clipped.  Returns ``(image, lo, hi)``.
    """
    _require_domain(img, Domain.LOG, "minmax_normalize")
    if img.data.size == 0:
        raise DegenerateInputError("cannot normalize an empty image")
    lo = float(img.data.min()) if lo is None else float(lo)
    hi = float(img.data.max()) if hi is None else float(hi)
    if not hi > lo:
        raise DegenerateInputError(f"constant image (min == max == {lo})")
    out = np.clip((img.data - lo) / (hi - lo), 0.0, 1.0)
    return SarImage(out, Domain.NORMLOG), lo, hi


def denormalize(img: SarImage, lo: float, hi: float) -> SarImage:
    _require_domain(img, Domain.NORMLOG, "denormalize")
    return SarImage(img.data * (hi - lo) + lo, Domain.LOG)


def visualization_threshold(img: SarImage | np.ndarray) -> float:
    """mean + 3 * std over all pixels and channels (population std)."""
    data = np.asarray(img.data if isinstance(img, SarImage) else img, dtype=np.float64)
    if data.size == 0:
        raise ValueError("visualization threshold of an empty image")
    mu = data.mean()
    sigma = np.sqrt(np.mean((data - mu) ** 2))
    return float(mu + 3.0 * sigma)


def _percent(p) -> Fraction:
    return Fraction(p).limit_denominator(10**9)


def clip_top_percent(values: np.ndarray, p: float) -> np.ndarray:
    """Clip a score map so that the top ``p`` percent of pixels saturate.

    The threshold is the ascending order statistic at index
    ``ceil(N * (100 - p) / 100) - 1``; every value above it is replaced by it.
    """
    if not 0 < p <= 100:
        raise ValueError(f"p must lie in (0, 100], got {p}")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot clip an empty map")
    n = arr.size
    idx = math.ceil(n * (100 - _percent(p)) / 100) - 1
    idx = min(max(idx, 0), n - 1)
    t = np.partition(arr.ravel(), idx)[idx]
    return np.minimum(arr, t)


def patch_origins(dim: int, size: int, stride: int) -> list[int]:
    if size > dim:
        raise ValueError(f"patch size {size} exceeds image dimension {dim}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return origins


def extract_patches(img: SarImage, size: int, stride: int) -> list[Patch]:
    """Sliding-window patches, row-major, with a final window flush to each edge."""
    rows = patch_origins(img.height, size, stride)
    cols = patch_origins(img.width, size, stride)
    return [Patch((r, c), img.data[r : r + size, c : c + size], img.domain) for r in rows for c in cols]


def stitch_patches(patches: Sequence[Patch], height: int, width: int, domain: Domain | None = None) -> SarImage:
    """Reassemble patches; overlapping pixels receive the mean of their covers."""
    if not patches:
        raise ValueError("no patches to stitch")
    channels = patches[0].data.shape[2]
    acc = np.zeros((height, width, channels))
    count = np.zeros((height, width), dtype=np.int64)
    for p in patches:
        r, c = p.origin
        ph, pw = p.size
        if r < 0 or c < 0 or r + ph > height or c + pw > width:
            raise ValueError(f"patch at {p.origin} of size {p.size} falls outside {height}x{width}")
        acc[r : r + ph, c : c + pw] += p.data
        count[r : r + ph, c : c + pw] += 1
    if np.any(count == 0):
        r, c = np.argwhere(count == 0)[0]
        raise ValueError(f"pixel ({r}, {c}) is not covered by any patch")
    return SarImage(acc / count[:, :, None], patches[0].domain if domain is None else domain)
