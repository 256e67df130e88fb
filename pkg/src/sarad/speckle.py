"""Goodman speckle simulation and despeckling validation.

Clean scenes are piecewise-constant reflectivity maps with an optional
unit-mean texture and point scatterers.  Fully developed speckle turns a
reflectivity ``R`` into an intensity ``I = R * S`` with ``S ~ Exp(1)``; in the
log domain this is an additive, non-Gaussian noise ``log S``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ComplexSlcImage, Domain, SarImage, make_rng

__all__ = [
    "Segment",
    "Scatterer",
    "SceneSpec",
    "RatioImage",
    "exponential",
    "render_clean",
    "sample_slc",
    "apply_speckle_log",
    "ratio_image",
    "ks_exp1",
    "exp1_goodness",
    "parse_scene_spec",
    "format_scene_spec",
    "load_scene_spec",
]


@dataclass(frozen=True)
class Segment:
    """Axis-aligned rectangle ``[row0, row1) x [col0, col1)`` with per-channel reflectivity."""

    row0: int
    col0: int
    row1: int
    col1: int
    levels: tuple[float, ...]


@dataclass(frozen=True)
class Scatterer:
    row: int
    col: int
    amplitude: float | tuple[float, ...]


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    channels: int = 4
    background: tuple[float, ...] = (1.0, 0.25, 0.25, 0.8)
    segments: tuple[Segment, ...] = ()
    scatterers: tuple[Scatterer, ...] = ()
    texture_shape: float | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.background) != self.channels:
            raise ValueError("background needs one level per channel")
        levels = [self.background, *(s.levels for s in self.segments)]
        for lv in levels:
            if len(lv) != self.channels:
                raise ValueError("segment needs one level per channel")
            if min(lv) <= 0:
                raise ValueError("reflectivity levels must be positive")
        if self.texture_shape is not None and self.texture_shape <= 0:
            raise ValueError("texture shape parameter must be positive")


@dataclass(frozen=True)
class RatioImage:
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("ratio values must be finite and non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


def exponential(rng: np.random.Generator, shape) -> np.ndarray:
    """Exp(1) draws by inverse CDF, ``-log(1 - u)``; never exactly zero."""
    u = rng.random(shape)
    return np.maximum(-np.log1p(-u), 1e-300)


def render_clean(spec: SceneSpec) -> SarImage:
    if spec.height <= 0 or spec.width <= 0:
        raise ValueError("scene must have positive area")
    r = np.empty((spec.height, spec.width, spec.channels))
    r[:] = np.asarray(spec.background, dtype=np.float64)
    for seg in spec.segments:
        r[seg.row0 : seg.row1, seg.col0 : seg.col1] = np.asarray(seg.levels, dtype=np.float64)
    if spec.texture_shape is not None:
        rng = make_rng(spec.seed, 0x7E)
        nu = spec.texture_shape
        r *= rng.gamma(nu, 1.0 / nu, size=(spec.height, spec.width, 1))
    for sc in spec.scatterers:
        if not (0 <= sc.row < spec.height and 0 <= sc.col < spec.width):
            raise ValueError(f"scatterer at ({sc.row}, {sc.col}) outside the scene")
        r[sc.row, sc.col] = sc.amplitude
    return SarImage(r, Domain.LINEAR)


def sample_slc(clean: SarImage, rng: np.random.Generator) -> ComplexSlcImage:
    """Circular complex Gaussian pixels with variance equal to the reflectivity."""
    if clean.domain is not Domain.LINEAR:
        raise ValueError("sample_slc expects a linear-intensity reflectivity map")
    if np.any(clean.data <= 0):
        raise ValueError("reflectivity must be strictly positive")
    intensity = clean.data * exponential(rng, clean.shape)
    phase = 2.0 * np.pi * rng.random(clean.shape)
    return ComplexSlcImage(np.sqrt(intensity) * np.exp(1j * phase))


def apply_speckle_log(clean_log: SarImage, rng: np.random.Generator) -> SarImage:
    """``y = x + log(E)`` with ``E ~ Exp(1)`` i.i.d. per pixel."""
    if clean_log.domain is not Domain.LOG:
        raise ValueError("apply_speckle_log expects a log-intensity image")
    return SarImage(clean_log.data + np.log(exponential(rng, clean_log.shape)), Domain.LOG)


def ratio_image(noisy: SarImage, despeckled: SarImage) -> RatioImage:
    for img in (noisy, despeckled):
        if img.domain is not Domain.LINEAR:
            raise ValueError("ratio image needs linear intensities")
    if noisy.shape != despeckled.shape:
        raise ValueError(f"shape mismatch {noisy.shape} vs {despeckled.shape}")
    if np.any(despeckled.data <= 0):
        raise ValueError("despeckled intensity has a zero pixel")
    return RatioImage(noisy.data / despeckled.data)


def ks_exp1(samples) -> float:
    """One-sample Kolmogorov-Smirnov distance to the Exp(1) CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    cdf = -np.expm1(-x)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def ks_critical(alpha: float) -> float:
    """Asymptotic constant c(alpha); c(0.01) = 1.628."""
    return math.sqrt(-0.5 * math.log(alpha / 2.0))


def exp1_goodness(samples, alpha: float = 0.01) -> tuple[float, bool]:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise ValueError(f"need at least 100 samples, got {x.size}")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite and non-negative")
    d = ks_exp1(x)
    return d, d < ks_critical(alpha) / math.sqrt(x.size)


# ---------------------------------------------------------------------------
# key=value scene files
#
#   height=128
#   width=128
#   channels=4
#   seed=3
#   background=1.0,0.25,0.25,0.8
#   segment=0,64,128,128:2.0,0.5,0.5,1.6     # row0,col0,row1,col1:levels
#   scatterer=40,40:150                      # row,col:amplitude[,...]
#   texture=8                                # gamma shape, optional


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def parse_scene_spec(text: str) -> SceneSpec:
    fields_: dict = {"segments": [], "scatterers": []}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in ("height", "width", "channels", "seed"):
                fields_[key] = int(value)
            elif key == "background":
                fields_[key] = _floats(value)
            elif key == "texture":
                fields_["texture_shape"] = None if value.lower() == "none" else float(value)
            elif key == "segment":
                box, levels = value.split(":")
                r0, c0, r1, c1 = (int(v) for v in box.split(","))
                fields_["segments"].append(Segment(r0, c0, r1, c1, _floats(levels)))
            elif key == "scatterer":
                pos, amp = value.split(":")
                r, c = (int(v) for v in pos.split(","))
                amps = _floats(amp)
                fields_["scatterers"].append(Scatterer(r, c, amps[0] if len(amps) == 1 else amps))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    for key in ("height", "width"):
        if key not in fields_:
            raise ValueError(f"scene file lacks {key}")
    fields_["segments"] = tuple(fields_["segments"])
    fields_["scatterers"] = tuple(fields_["scatterers"])
    return SceneSpec(**fields_)


def format_scene_spec(spec: SceneSpec) -> str:
    fmt = lambda vals: ",".join(repr(float(v)) for v in np.atleast_1d(vals))  # noqa: E731
    lines = [
        f"height={spec.height}",
        f"width={spec.width}",
        f"channels={spec.channels}",
        f"seed={spec.seed}",
        f"background={fmt(spec.background)}",
    ]
    if spec.texture_shape is not None:
        lines.append(f"texture={spec.texture_shape!r}")
    lines += [f"segment={s.row0},{s.col0},{s.row1},{s.col1}:{fmt(s.levels)}" for s in spec.segments]
    lines += [f"scatterer={s.row},{s.col}:{fmt(s.amplitude)}" for s in spec.scatterers]
    return "\n".join(lines) + "\n"


def load_scene_spec(path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())
