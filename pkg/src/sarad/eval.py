"""Synthetic anomaly benchmark: pattern embedding, ROC/AUC and method comparison."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from .core import ComplexSlcImage, Domain, SarImage, clip_top_percent, make_rng, merge_cross_pol
from .detect import AnomalyMap, anomaly_map_frobenius, anomaly_map_l1, normalize_map, prepare_input, rx_map
from .scenes import polarimetric_levels
from .speckle import sample_slc
from .tensorio import write_pgm, write_tensor

__all__ = [
    "SHAPES",
    "CONTRASTS",
    "METHODS",
    "Pattern",
    "LabeledScene",
    "RocCurve",
    "MethodResult",
    "pattern_footprint",
    "embed_anomalies",
    "correlated_texture",
    "benchmark_scene",
    "rank_auc",
    "sweep_auc",
    "roc_auc",
    "benchmark_compare",
    "write_results",
]

SHAPES = ("square", "cross", "line")
# pattern reflectivity relative to the local background, one row per level
CONTRASTS = (30.0, 6.0, 0.15)
TEXTURE_STD = 0.35
TEXTURE_CORR = 1.5
METHODS = ("A_E", "A_E_noisy", "L1", "RX")


@dataclass(frozen=True)
class Pattern:
    """A footprint of ``size`` pixels on a side with its top-left corner at ``(row, col)``.

    ``intensity`` is one reflectivity for every channel or one per channel.
    """

    shape: str
    row: int
    col: int
    size: int
    intensity: float | tuple[float, ...]


@dataclass(frozen=True)
class LabeledScene:
    noisy: ComplexSlcImage
    clean: SarImage
    labels: np.ndarray
    patterns: tuple[Pattern, ...] = ()

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=bool)
        if labels.shape != self.clean.shape[:2]:
            raise ValueError(f"labels {labels.shape} do not match image {self.clean.shape[:2]}")
        if labels.mean() >= 0.05:
            raise ValueError("anomalies must cover less than 5% of the scene")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass
class MethodResult:
    method: str
    auc: float
    runtime: float
    roc: RocCurve
    anomaly_map: AnomalyMap
    extras: dict = field(default_factory=dict)


def pattern_footprint(shape: str, size: int) -> np.ndarray:
    if size < 1:
        raise ValueError("pattern size must be positive")
    fp = np.zeros((size, size), dtype=bool)
    mid = size // 2
    if shape == "square":
        fp[:] = True
    elif shape == "cross":
        fp[mid, :] = True
        fp[:, mid] = True
    elif shape == "line":
        fp[mid, :] = True
    else:
        raise ValueError(f"unknown pattern shape {shape!r}; expected one of {SHAPES}")
    return fp


def embed_anomalies(clean: SarImage, patterns, seed: int = 0, variant: int = 0) -> LabeledScene:
    """Overwrite pattern pixels with their intensity, label them, and add speckle."""
    if clean.domain is not Domain.LINEAR:
        raise ValueError("embed_anomalies expects a linear reflectivity image")
    h, w, c = clean.shape
    data = clean.data.copy()
    labels = np.zeros((h, w), dtype=bool)
    for p in patterns:
        fp = pattern_footprint(p.shape, p.size)
        if p.row < 0 or p.col < 0 or p.row + p.size > h or p.col + p.size > w:
            raise ValueError(f"pattern {p} lies outside the {h}x{w} image")
        region = labels[p.row : p.row + p.size, p.col : p.col + p.size]
        if np.any(region & fp):
            raise ValueError(f"pattern {p} overlaps another pattern")
        level = np.broadcast_to(np.asarray(p.intensity, dtype=np.float64), (c,))
        if np.any(level <= 0):
            raise ValueError("pattern intensity must be positive")
        region |= fp
        data[p.row : p.row + p.size, p.col : p.col + p.size][fp] = level
    scene_clean = SarImage(data, Domain.LINEAR)
    noisy = sample_slc(scene_clean, make_rng(seed, 0xBE9C, variant))
    return LabeledScene(noisy, scene_clean, labels, tuple(patterns))


def correlated_texture(rng: np.random.Generator, shape, log_std: float, corr: float) -> np.ndarray:
    """Unit-mean log-normal field with Gaussian-smoothed spatial correlation."""
    if log_std == 0:
        return np.ones(shape)
    g = rng.standard_normal(shape)
    if corr > 0:
        g = gaussian_filter(g, corr, mode="reflect")
    g *= log_std / g.std()
    return np.exp(g - 0.5 * log_std**2)


def benchmark_scene(seed: int = 0, height: int = 256, width: int = 256, channels: int = 4,
                    variant: int = 0, contrasts: Sequence[float] = CONTRASTS,
                    texture_std: float = TEXTURE_STD, texture_corr: float = TEXTURE_CORR) -> LabeledScene:
    """Two-segment background with nine patterns: three shapes at three contrasts.

    The scene is split into a 3x3 grid.  Each grid row holds one contrast
    level, brightest at the top and darker than the background at the bottom;
    within its cell each pattern lands at a random position.  ``variant``
    draws further independent scenes from the same seed.

    The background is heterogeneous clutter: the segment levels are modulated
    by a unit-mean log-normal texture whose log has standard deviation
    ``texture_std`` and Gaussian spatial correlation of ``texture_corr``
    pixels.  Pattern intensities are relative to the untextured level.
    """
    if height < 64 or width < 64:
        raise ValueError("benchmark scene needs at least 64x64 pixels")
    rng = make_rng(seed, 0xB5, variant)
    split = int(width * 0.625)
    left = polarimetric_levels(1.0, 0.3, 0.8, channels)
    right = polarimetric_levels(3.0, 0.6, 2.0, channels)
    bg = np.empty((height, width, channels))
    bg[:, :split] = left
    bg[:, split:] = right
    bg *= float(np.exp(rng.uniform(-0.5, 0.5)))
    textured = bg * correlated_texture(rng, (height, width), texture_std, texture_corr)[:, :, None]
    clean = SarImage(textured, Domain.LINEAR)

    size, margin = 5, 4
    patterns = []
    for i, contrast in enumerate(contrasts):
        r0, r1 = i * height // 3 + margin, (i + 1) * height // 3 - margin - size
        for j, shape in enumerate(rng.permutation(SHAPES)):
            c0, c1 = j * width // 3 + margin, (j + 1) * width // 3 - margin - size
            while True:
                r, cc = int(rng.integers(r0, r1 + 1)), int(rng.integers(c0, c1 + 1))
                # keep clear of the segment boundary so the local level is defined
                if cc + size + margin <= split or cc >= split + margin:
                    break
            local = bg[r + size // 2, cc + size // 2]
            patterns.append(Pattern(str(shape), r, cc, size, tuple(float(v) for v in contrast * local)))
    return embed_anomalies(clean, patterns, seed, variant)


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney estimate of P(anomaly score > background score), ties counted half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("labels must contain both anomaly and background pixels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def _sweep(scores: np.ndarray, labels: np.ndarray):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("labels must contain both anomaly and background pixels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores: one ROC point per distinct threshold
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tp / n1]
    fpr = np.r_[0.0, fp / n0]
    return fpr, tpr, np.r_[np.inf, s[ends]]


def sweep_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Trapezoidal area under the threshold-sweep ROC curve."""
    fpr, tpr, _ = _sweep(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(amap, labels: np.ndarray) -> RocCurve:
    """ROC over every distinct score threshold; AUC from the rank statistic."""
    scores = amap.scores if isinstance(amap, AnomalyMap) else np.asarray(amap)
    if np.shape(scores) != np.shape(labels):
        raise ValueError(f"map {np.shape(scores)} and labels {np.shape(labels)} differ in shape")
    fpr, tpr, thr = _sweep(scores, labels)
    return RocCurve(fpr, tpr, thr, rank_auc(scores, labels))


def benchmark_compare(scene: LabeledScene, despeckler, aae, aae_noisy, k: int = 3, rx_outer: int = 15,
                      rx_guard: int = 7) -> list[MethodResult]:
    """Score the scene with every method and compute their ROC curves.

    ``aae`` works on despeckled input and ``aae_noisy`` on the undespeckled
    image.  L1 compares the same pair of images as A_E.
    """
    from .aae import reconstruct_image

    for name, model in (("despeckler", despeckler), ("aae", aae), ("aae_noisy", aae_noisy)):
        if model is None:
            raise ValueError(f"missing {name} checkpoint")
    noisy = scene.noisy.intensity()
    results = []

    def timed(method, fn):
        t0 = time.perf_counter()
        amap, extras = fn()
        elapsed = time.perf_counter() - t0
        amap = normalize_map(amap)
        roc = roc_auc(amap, scene.labels)
        results.append(MethodResult(method, roc.auc, elapsed, roc, amap, extras))

    cache = {}

    def a_e():
        x = prepare_input(noisy, despeckler, aae.norm_lo, aae.norm_hi)
        x_hat = reconstruct_image(aae, x)
        cache["x"], cache["x_hat"] = x, x_hat
        return anomaly_map_frobenius(x, x_hat, k), {"X": x, "X_hat": x_hat}

    def a_e_noisy():
        x = prepare_input(noisy, None, aae_noisy.norm_lo, aae_noisy.norm_hi)
        return anomaly_map_frobenius(x, reconstruct_image(aae_noisy, x), k), {}

    timed("A_E", a_e)
    timed("A_E_noisy", a_e_noisy)
    timed("L1", lambda: (anomaly_map_l1(cache["x"], cache["x_hat"]), {}))
    timed("RX", lambda: (rx_map(merge_cross_pol(scene.noisy), rx_outer, rx_guard), {}))
    return results


def write_results(results, out_dir, p: float = 10.0, record_runtime: bool = False) -> None:
    """Results CSV, one ROC CSV, tensor and clipped PGM rendering per method.

    Runtimes are wall-clock and so vary between runs; the column stays empty
    unless ``record_runtime`` is set, keeping default outputs byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "auc", "runtime_seconds"])
        for r in results:
            wr.writerow([r.method, repr(r.auc), f"{r.runtime:.3f}" if record_runtime else ""])
    for r in results:
        with open(out / f"roc_{r.method}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["fpr", "tpr"])
            for a, b in zip(r.roc.fpr, r.roc.tpr):
                wr.writerow([repr(float(a)), repr(float(b))])
        write_tensor(out / f"map_{r.method}.sart", r.anomaly_map.scores)
        write_pgm(out / f"map_{r.method}.pgm", clip_top_percent(r.anomaly_map.scores, p))
