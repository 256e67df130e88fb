"""End-to-end orchestration shared by the command line and the benchmark tests."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aae import AaeBundle, AaeConfig, save_aae, train_aae, write_epoch_log
from .core import SarImage, extract_patches, log_transform, minmax_normalize
from .despeckler import DespecklerConfig, despeckle, train_despeckler, write_loss_log
from .detect import merged_log
from .eval import LabeledScene, MethodResult, benchmark_compare, benchmark_scene, write_results
from .nn import ModelBundle, save_model
from .scenes import training_stacks
from .tensorio import save_image, write_tensor

__all__ = [
    "PipelineConfig",
    "TrainedModels",
    "aae_dataset",
    "fit_aae",
    "train_models",
    "run_pipeline",
    "mean_auc",
]


@dataclass
class PipelineConfig:
    seed: int = 0
    train_scenes: int = 2
    train_size: int = 128
    dates: int = 32
    scene_size: int = 256
    aae_scenes: int = 4
    k: int = 3
    rx_outer: int = 15
    rx_guard: int = 7
    clip_percent: float = 10.0
    despeckler: DespecklerConfig = field(default_factory=DespecklerConfig)
    aae: AaeConfig = field(default_factory=AaeConfig)


@dataclass
class TrainedModels:
    despeckler: ModelBundle
    aae: AaeBundle
    aae_noisy: AaeBundle
    despeckler_log: list
    aae_log: list
    aae_noisy_log: list


Say = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def aae_dataset(images: Sequence[SarImage], patch: int, stride: int):
    """Patches of several log images normalized by their joint min and max."""
    lo = min(float(img.data.min()) for img in images)
    hi = max(float(img.data.max()) for img in images)
    patches = [
        p.data for img in images for p in extract_patches(minmax_normalize(img, lo, hi)[0], patch, stride)
    ]
    return np.stack(patches), lo, hi


def fit_aae(images: Sequence[SarImage], config: AaeConfig, log: list | None = None) -> AaeBundle:
    patches, lo, hi = aae_dataset(images, config.patch, config.stride)
    bundle = train_aae(patches, replace(config), log)
    bundle.norm_lo, bundle.norm_hi = lo, hi
    return bundle


def train_models(cfg: PipelineConfig, scenes: Sequence[LabeledScene], say: Say = _quiet) -> TrainedModels:
    """Train the despeckler on simulated stacks and both AAEs on ``scenes``.

    The AAE dataset is ``scenes`` topped up with extra benchmark-style scenes
    to ``cfg.aae_scenes``; anomalies stay in the training data.
    """
    dcfg = replace(cfg.despeckler, seed=cfg.seed)
    acfg = replace(cfg.aae, seed=cfg.seed)
    stacks = training_stacks(cfg.seed, cfg.train_scenes, cfg.train_size, cfg.dates)
    dlog: list = []
    say(f"training despeckler on {len(stacks)} stacks of {cfg.dates} dates")
    despeckler = train_despeckler(stacks, dcfg, dlog)

    extra = [
        benchmark_scene(cfg.seed, cfg.scene_size, cfg.scene_size, variant=1000 + i)
        for i in range(max(0, cfg.aae_scenes - len(scenes)))
    ]
    noisy = [s.noisy.intensity() for s in list(scenes) + extra]
    alog: list = []
    say(f"training AAE on {len(noisy)} despeckled scenes")
    aae = fit_aae([merged_log(img, despeckler) for img in noisy], acfg, alog)
    nlog: list = []
    say(f"training AAE on {len(noisy)} noisy scenes")
    aae_noisy = fit_aae([merged_log(img, None) for img in noisy], acfg, nlog)
    return TrainedModels(despeckler, aae, aae_noisy, dlog, alog, nlog)


def mean_auc(per_scene: Sequence[Sequence[MethodResult]]) -> dict[str, float]:
    methods = [r.method for r in per_scene[0]]
    return {m: float(np.mean([next(r.auc for r in rs if r.method == m) for rs in per_scene])) for m in methods}


def run_pipeline(cfg: PipelineConfig, out_dir=None, say: Say = _quiet, record_runtime: bool = False):
    """Simulate the benchmark scene, train every model, and compare detectors.

    With ``out_dir`` every artifact is written there.  Returns
    ``(results, models, scene)``.
    """
    scene = benchmark_scene(cfg.seed, cfg.scene_size, cfg.scene_size)
    models = train_models(cfg, [scene], say)
    say("scoring the benchmark scene")
    results = benchmark_compare(scene, models.despeckler, models.aae, models.aae_noisy, cfg.k,
                                cfg.rx_outer, cfg.rx_guard)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(models.despeckler, out / "despeckler")
        write_loss_log(out / "despeckler_loss.csv", models.despeckler_log)
        save_aae(models.aae, out / "aae")
        write_epoch_log(out / "aae_loss.csv", models.aae_log)
        save_aae(models.aae_noisy, out / "aae_noisy")
        write_epoch_log(out / "aae_noisy_loss.csv", models.aae_noisy_log)
        save_image(out / "scene_slc.sart", scene.noisy)
        save_image(out / "scene_clean.sart", scene.clean)
        write_tensor(out / "labels.sart", scene.labels.astype(np.float64))
        save_image(out / "despeckled.sart", despeckle(models.despeckler, log_transform(scene.noisy.intensity())))
        a_e = next(r for r in results if r.method == "A_E")
        save_image(out / "X.sart", a_e.extras["X"])
        save_image(out / "X_hat.sart", a_e.extras["X_hat"])
        write_results(results, out, cfg.clip_percent, record_runtime)
    return results, models, scene
