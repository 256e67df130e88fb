"""Synthetic scene generators used for training and benchmarking."""
from __future__ import annotations

import numpy as np

from .core import SarImage, make_rng
from .despeckler import AcquisitionStack
from .speckle import SceneSpec, Scatterer, Segment, render_clean, sample_slc

__all__ = ["polarimetric_levels", "random_scene_spec", "simulate_stack", "training_stacks"]


def polarimetric_levels(hh: float, cross: float, vv: float, channels: int = 4) -> tuple[float, ...]:
    """Channel levels with HV == VH (reciprocity)."""
    if channels == 4:
        return (hh, cross, cross, vv)
    if channels == 3:
        return (hh, cross, vv)
    if channels == 1:
        return (hh,)
    raise ValueError(f"unsupported channel count {channels}")


def _random_levels(rng: np.random.Generator, channels: int) -> tuple[float, ...]:
    hh = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
    cross = hh * float(rng.uniform(0.1, 0.5))
    vv = hh * float(rng.uniform(0.6, 1.3))
    return polarimetric_levels(hh, cross, vv, channels)


def random_scene_spec(seed: int, height: int = 128, width: int = 128, channels: int = 4,
                      n_segments: int = 6, n_scatterers: int = 4, n_small: int = 24) -> SceneSpec:
    """Piecewise-constant scene of random rectangles plus a few bright points.

    ``n_small`` extra rectangles of 1 to 6 pixels a side, brighter or darker
    than what they cover, give the scene fine detail.
    """
    rng = make_rng(seed, 0x5CE)
    segments = []
    for _ in range(n_segments):
        r0, r1 = sorted(int(v) for v in rng.integers(0, height + 1, size=2))
        c0, c1 = sorted(int(v) for v in rng.integers(0, width + 1, size=2))
        if r1 - r0 < 4 or c1 - c0 < 4:
            continue
        segments.append(Segment(r0, c0, r1, c1, _random_levels(rng, channels)))
    small_rng = make_rng(seed, 0x5CE, 1)
    for _ in range(n_small):
        hh, ww = (int(v) for v in small_rng.integers(1, 7, size=2))
        r0, c0 = int(small_rng.integers(0, height - hh + 1)), int(small_rng.integers(0, width - ww + 1))
        segments.append(Segment(r0, c0, r0 + hh, c0 + ww, _random_levels(small_rng, channels)))
    scatterers = []
    for _ in range(n_scatterers):
        r, c = int(rng.integers(0, height)), int(rng.integers(0, width))
        scatterers.append(Scatterer(r, c, float(np.exp(rng.uniform(np.log(50.0), np.log(500.0))))))
    return SceneSpec(height, width, channels, _random_levels(rng, channels), tuple(segments),
                     tuple(scatterers), None, seed)


def simulate_stack(clean: SarImage, dates: int, seed: int) -> AcquisitionStack:
    """Independent single-look acquisitions of an unchanging scene."""
    acqs = tuple(sample_slc(clean, make_rng(seed, 0xDA7E, t)).intensity() for t in range(dates))
    return AcquisitionStack(acqs, clean)


def training_stacks(seed: int, count: int = 2, size: int = 128, dates: int = 32, channels: int = 4):
    """Anomaly-free despeckler training data: ``count`` random scenes, ``dates`` looks each."""
    stacks = []
    for i in range(count):
        spec = random_scene_spec(seed * 1000 + i, size, size, channels)
        stacks.append(simulate_stack(render_clean(spec), dates, seed * 1000 + i))
    return stacks
