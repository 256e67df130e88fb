"""Self-supervised despeckling trained on pairs of speckle realizations.

The network works on log intensities, one polarization channel at a time,
and is residual: ``f(y) = y + scale * g((y - mean(y)) / scale)`` with the mean
taken per patch.  Removing the mean makes the output shift exactly with the
input, i.e. the despeckler commutes with a global intensity gain.  With its
last layer zero-initialised the untrained network is the identity.

Training runs three phases:

* A: two synthetic speckle draws on a clean reference (temporal average).
* B: two acquisition dates, the target's reflectivity swapped for the
  input's using the network frozen at the start of the phase on 2x-decimated
  images.
* C: as B without decimation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Domain, Patch, SarImage, log_transform, make_rng, patch_origins, stitch_patches
from .nn import Conv2d, LeakyRelu, ModelBundle, adam_step, backward, build_model, forward
from .speckle import exponential

__all__ = [
    "Phase",
    "TrainingPair",
    "AcquisitionStack",
    "DespecklerConfig",
    "TrainingDiverged",
    "LossRecord",
    "loss_speck",
    "temporal_reference",
    "make_pairs_phase_a",
    "make_pairs_change_compensated",
    "build_despeckler",
    "denoise_log",
    "cosine_lr",
    "train_despeckler",
    "despeckle",
    "write_loss_log",
]

EXP_CLAMP = 50.0


class TrainingDiverged(FloatingPointError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite loss {loss} at batch {batch_index}")
        self.batch_index = batch_index


Phase = str  # "A", "B" or "C"


@dataclass(frozen=True)
class TrainingPair:
    y1: np.ndarray
    y2: np.ndarray
    phase: Phase

    def __post_init__(self):
        if self.y1.shape != self.y2.shape:
            raise ValueError(f"pair shapes differ: {self.y1.shape} vs {self.y2.shape}")
        if self.phase not in ("A", "B", "C"):
            raise ValueError(f"unknown phase {self.phase!r}")


@dataclass(frozen=True)
class AcquisitionStack:
    """Co-registered linear-intensity acquisitions of one scene, oldest first."""

    acquisitions: tuple[SarImage, ...]
    clean: SarImage | None = None

    def __post_init__(self):
        acqs = tuple(self.acquisitions)
        if not acqs:
            raise ValueError("empty acquisition stack")
        shape = acqs[0].shape
        for a in acqs:
            if a.shape != shape:
                raise ValueError("acquisitions must share shape and channel count")
            if a.domain is not Domain.LINEAR:
                raise ValueError("acquisitions must be linear intensities")
        object.__setattr__(self, "acquisitions", acqs)

    def __len__(self):
        return len(self.acquisitions)

    @property
    def shape(self):
        return self.acquisitions[0].shape

    def log_date(self, i: int) -> np.ndarray:
        return log_transform(self.acquisitions[i]).data


@dataclass
class DespecklerConfig:
    patch: int = 32
    stride: int = 16
    infer_patch: int = 64
    infer_stride: int = 32
    batch: int = 16
    epochs_a: int = 5
    epochs_b: int = 3
    epochs_c: int = 3
    patches_per_epoch: int = 1600
    width: int = 16
    depth: int = 6
    lr: float = 1e-2
    scale: float = 2.0
    min_looks: int = 16
    seed: int = 0


@dataclass(frozen=True)
class LossRecord:
    batch: int
    phase: Phase
    lr: float
    loss: float


def loss_speck(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Log-domain speckle negative log-likelihood, summed over elements.

    ``sum(f - t + exp(t - f))`` with gradient ``1 - exp(t - f)``.  The exponent
    is clamped at 50; the gradient uses the clamped value.
    """
    f = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {t.shape}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t))):
        raise FloatingPointError("loss_speck inputs must be finite")
    e = np.exp(np.minimum(t - f, EXP_CLAMP))
    return float(np.sum(f - t + e)), 1.0 - e


def temporal_reference(stack: AcquisitionStack, min_looks: int = 16) -> SarImage:
    """Log of the temporal mean intensity: the phase-A clean stand-in."""
    if len(stack) < min_looks:
        raise ValueError(f"need >= {min_looks} acquisitions for a clean reference, got {len(stack)}")
    mean = np.mean([a.data for a in stack.acquisitions], axis=0)
    return log_transform(SarImage(mean, Domain.LINEAR))


def make_pairs_phase_a(clean: SarImage | np.ndarray, rng: np.random.Generator) -> TrainingPair:
    if isinstance(clean, SarImage):
        if clean.domain is not Domain.LOG:
            raise ValueError("phase A pairs need a log-intensity clean image")
        clean = clean.data
    y1 = clean + np.log(exponential(rng, clean.shape))
    y2 = clean + np.log(exponential(rng, clean.shape))
    return TrainingPair(y1, y2, "A")


# --- network ---------------------------------------------------------------

Denoiser = Callable[[np.ndarray], np.ndarray]


def build_despeckler(config: DespecklerConfig | None = None) -> ModelBundle:
    cfg = config or DespecklerConfig()
    if cfg.depth < 2:
        raise ValueError("despeckler needs at least 2 conv layers")
    w = cfg.width
    layers = [Conv2d(1, w, 3, 1, 1), LeakyRelu(0.2)]
    for _ in range(cfg.depth - 2):
        layers += [Conv2d(w, w, 3, 1, 1), LeakyRelu(0.2)]
    layers.append(Conv2d(w, 1, 3, 1, 1))
    meta = {"kind": "despeckler", "scale": cfg.scale, "patch": cfg.infer_patch, "stride": cfg.infer_stride}
    model = build_model(layers, (None, None, 1), seed=cfg.seed, meta=meta)
    model.params[f"{len(layers) - 1}.weight"][:] = 0.0
    return model


def _net_forward(model: ModelBundle, y: np.ndarray):
    scale = model.meta["scale"]
    g, cache = forward(model, (y - y.mean(axis=(1, 2, 3), keepdims=True)) / scale)
    return y + scale * g, cache


def denoise_log(model: ModelBundle, y: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Apply the network to a batch of single-channel log patches ``(n, h, w, 1)``."""
    out = [_net_forward(model, y[i : i + batch_size])[0] for i in range(0, len(y), batch_size)]
    return np.concatenate(out, axis=0)


def _as_denoiser(model) -> Denoiser:
    if isinstance(model, ModelBundle):
        return lambda y: denoise_log(model, y)
    return model


def _decimate_expand(y: np.ndarray, denoise: Denoiser) -> np.ndarray:
    """Denoise a 2x-decimated batch and expand back by pixel repetition."""
    h, w = y.shape[1:3]
    small = denoise(y[:, ::2, ::2, :])
    return np.repeat(np.repeat(small, 2, axis=1), 2, axis=2)[:, :h, :w, :]


def _compensate(y_n: np.ndarray, y_m: np.ndarray, denoise: Denoiser, subsampled: bool) -> np.ndarray:
    est = (lambda y: _decimate_expand(y, denoise)) if subsampled else denoise
    return y_m - est(y_m) + est(y_n)


def make_pairs_change_compensated(stack: AcquisitionStack, n: int, m: int, model, subsampled: bool,
                                  rng: np.random.Generator | None = None) -> TrainingPair:
    """Pair date ``n`` with date ``m`` carrying date ``n``'s reflectivity.

    ``model`` is a despeckler bundle or any callable mapping a batch of log
    patches ``(b, h, w, 1)`` to its denoised version.  Channels are treated
    independently.
    """
    if len(stack) < 2:
        raise ValueError("change compensation needs at least two dates")
    if n == m:
        raise ValueError("dates n and m must differ")
    for i in (n, m):
        if not 0 <= i < len(stack):
            raise IndexError(f"date {i} outside a stack of {len(stack)}")
    denoise = _as_denoiser(model)
    y_n = stack.log_date(n)
    y_m = stack.log_date(m)
    as_batch = lambda y: np.moveaxis(y, 2, 0)[..., None]  # noqa: E731  (h,w,c) -> (c,h,w,1)
    y2 = _compensate(as_batch(y_n), as_batch(y_m), denoise, subsampled)
    return TrainingPair(y_n, np.moveaxis(y2[..., 0], 0, 2), "B" if subsampled else "C")


# --- training --------------------------------------------------------------


def cosine_lr(base: float, batch_index: int, total: int) -> float:
    """Half-cosine decay from ``base`` at batch 0 towards 0 at ``total``."""
    return 0.5 * base * (1.0 + math.cos(math.pi * min(batch_index, total) / total))


def _train_batch(model: ModelBundle, y1: np.ndarray, y2: np.ndarray, lr: float) -> float:
    pred, cache = _net_forward(model, y1)
    total, grad = loss_speck(pred, y2)
    k = pred.size
    loss = total / k
    if not math.isfinite(loss):
        raise FloatingPointError(loss)
    grads, _ = backward(model, cache, grad * model.meta["scale"] / k)
    adam_step(model, grads, lr)
    return loss


def train_despeckler(stacks: Sequence[AcquisitionStack], config: DespecklerConfig | None = None,
                     log: list | None = None, model: ModelBundle | None = None) -> ModelBundle:
    """Run phases A, B and C; per-batch losses are appended to ``log``."""
    cfg = config or DespecklerConfig()
    if not stacks:
        raise ValueError("no training stacks")
    model = model if model is not None else build_despeckler(cfg)
    rng = make_rng(cfg.seed, 0xD5)
    per_epoch = -(-cfg.patches_per_epoch // cfg.batch)
    total = max(1, per_epoch * (cfg.epochs_a + cfg.epochs_b + cfg.epochs_c))
    log = log if log is not None else []
    batch_index = 0

    refs = [temporal_reference(s, cfg.min_looks).data for s in stacks]
    logs = [[s.log_date(i) for i in range(len(s))] for s in stacks]
    pool = []
    for si, s in enumerate(stacks):
        h, w, c = s.shape
        size = min(cfg.patch, h, w)
        for ch in range(c):
            for r in patch_origins(h, size, cfg.stride):
                for col in patch_origins(w, size, cfg.stride):
                    pool.append((si, ch, r, col, size))

    def epoch_entries():
        reps = -(-cfg.patches_per_epoch // len(pool))
        order = np.concatenate([rng.permutation(len(pool)) for _ in range(reps)])[: cfg.patches_per_epoch]
        return [pool[i] for i in order]

    def run(phase: Phase, y1: np.ndarray, y2: np.ndarray):
        nonlocal batch_index
        lr = cosine_lr(cfg.lr, batch_index, total)
        try:
            loss = _train_batch(model, y1, y2, lr)
        except FloatingPointError:
            raise TrainingDiverged(batch_index, float("nan")) from None
        log.append(LossRecord(batch_index, phase, lr, loss))
        batch_index += 1

    def batches(entries):
        for i in range(0, len(entries), cfg.batch):
            chunk = entries[i : i + cfg.batch]
            # same-size patches only within a batch
            size = chunk[0][4]
            yield [e for e in chunk if e[4] == size]

    for _ in range(cfg.epochs_a):
        for chunk in batches(epoch_entries()):
            pairs = [make_pairs_phase_a(refs[si][r : r + sz, c : c + sz, ch : ch + 1], rng) for si, ch, r, c, sz in chunk]
            run("A", np.stack([p.y1 for p in pairs]), np.stack([p.y2 for p in pairs]))

    for phase, epochs in (("B", cfg.epochs_b), ("C", cfg.epochs_c)):
        # targets come from the network as it stood when the phase began; a
        # network updated in the loop would see its own output in the target
        frozen = model.copy()
        denoise = lambda y, f=frozen: denoise_log(f, y, cfg.batch)  # noqa: E731
        for _ in range(epochs):
            for chunk in batches(epoch_entries()):
                y_n, y_m = [], []
                for si, ch, r, c, sz in chunk:
                    n, m = rng.choice(len(stacks[si]), size=2, replace=False)
                    y_n.append(logs[si][n][r : r + sz, c : c + sz, ch : ch + 1])
                    y_m.append(logs[si][m][r : r + sz, c : c + sz, ch : ch + 1])
                y1 = np.stack(y_n)
                y2 = _compensate(y1, np.stack(y_m), denoise, subsampled=(phase == "B"))
                run(phase, y1, y2)
    return model


def despeckle(model: ModelBundle, img: SarImage, stride: int | None = None, batch_size: int = 16) -> SarImage:
    """Despeckle each channel of a log image patch-wise and stitch by averaging."""
    if img.domain is not Domain.LOG:
        raise ValueError("despeckle expects a log-intensity image")
    if model.input_shape[-1] != 1:
        raise ValueError("despeckler must be a single-channel model")
    size = min(int(model.meta.get("patch", 64)), img.height, img.width)
    stride = stride or int(model.meta.get("stride", size // 2)) or 1
    rows = patch_origins(img.height, size, stride)
    cols = patch_origins(img.width, size, stride)
    origins = [(r, c) for r in rows for c in cols]
    out = np.empty(img.shape)
    for ch in range(img.channels):
        plane = img.data[:, :, ch]
        batch = np.stack([plane[r : r + size, c : c + size, None] for r, c in origins])
        den = denoise_log(model, batch, batch_size)
        patches = [Patch(o, d, Domain.LOG) for o, d in zip(origins, den)]
        out[:, :, ch] = stitch_patches(patches, img.height, img.width).data[:, :, 0]
    return SarImage(out, Domain.LOG)


def write_loss_log(path, log: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["batch", "phase", "lr", "loss"])
        for rec in log:
            wr.writerow([rec.batch, rec.phase, repr(rec.lr), repr(rec.loss)])
