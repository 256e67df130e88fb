"""Adversarial autoencoder that reconstructs anomaly-free patches.

An encoder maps a normalized log patch to a latent vector, a decoder maps it
back, and a discriminator pushes the latent distribution towards N(0, I).
Rare patterns are reconstructed poorly, which is what the detector exploits.

The discriminator network stops at its last dense layer and the sigmoid is
applied by :func:`discriminate`.  Gradients are taken with respect to the
logit, which keeps them alive when the probability saturates to 0 or 1.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import Domain, Patch, SarImage, make_rng, patch_origins, stitch_patches
from .nn import (
    Conv2d,
    Dense,
    Flatten,
    LeakyRelu,
    LrSchedule,
    ModelBundle,
    Reshape,
    Sigmoid,
    TransposedConv2d,
    adam_step,
    backward,
    build_model,
    forward,
    load_model,
    lr_at,
    predict,
    save_model,
)
from .tensorio import read_tensor, write_tensor

__all__ = [
    "AaeConfig",
    "AaeBundle",
    "StepLosses",
    "EpochRecord",
    "PROB_CLAMP",
    "loss_rec",
    "loss_adversarial",
    "build_aae",
    "encode",
    "discriminate",
    "train_step",
    "train_aae",
    "reconstruct_image",
    "save_aae",
    "load_aae",
    "write_epoch_log",
]

PROB_CLAMP = 1e-7


@dataclass
class AaeConfig:
    patch: int = 64
    stride: int = 16
    channels: int = 3
    latent: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    batch: int = 32
    epochs: int = 20
    lr_low: float = 1e-4
    lr_high: float = 1e-3
    ramp_epochs: float = 2.0
    seed: int = 0


@dataclass
class AaeBundle:
    encoder: ModelBundle
    decoder: ModelBundle
    discriminator: ModelBundle
    latent: int
    patch_shape: tuple[int, int, int]
    stride: int = 16
    norm_lo: float | None = None
    norm_hi: float | None = None
    # Adam moments for the encoder's adversarial update, kept apart from
    # the reconstruction optimizer's
    gen_state: AdamState | None = None

    def __post_init__(self):
        if self.gen_state is None:
            self.gen_state = AdamState.zeros(self.encoder)


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, model: ModelBundle) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()})


def _adam_with_state(model: ModelBundle, state: AdamState, grads: dict, lr: float) -> None:
    saved = (model.step, model.adam_m, model.adam_v)
    model.step, model.adam_m, model.adam_v = state.step, state.m, state.v
    try:
        adam_step(model, grads, lr)
        state.step = model.step
    finally:
        model.step, model.adam_m, model.adam_v = saved


@dataclass(frozen=True)
class StepLosses:
    rec: float
    disc: float
    gen: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    rec_loss: float
    disc_loss: float
    gen_loss: float
    lr: float


def loss_rec(x: np.ndarray, x_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient with respect to ``x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = x_hat - x
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _clamp(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def loss_adversarial(disc_real, disc_fake) -> tuple[float, float]:
    """Return ``(discriminator loss, generator loss)``.

    The discriminator loss is the negated objective
    ``mean log D(z_real) + mean log(1 - D(z_fake))``; the generator loss is the
    non-saturating ``-mean log D(z_fake)``.
    """
    real, fake = _clamp(disc_real), _clamp(disc_fake)
    if real.size == 0 or fake.size == 0:
        raise ValueError("empty batch")
    objective = np.mean(np.log(real)) + np.mean(np.log1p(-fake))
    return float(-objective), float(-np.mean(np.log(fake)))


def _encoder_layers(cfg: AaeConfig):
    layers, cin = [], cfg.channels
    for w in cfg.widths:
        layers += [Conv2d(cin, w, 4, 2, 1), LeakyRelu(0.2)]
        cin = w
    side = cfg.patch // 2 ** len(cfg.widths)
    layers += [Flatten(), Dense(side * side * cin, cfg.latent)]
    return layers, side


def build_aae(config: AaeConfig | None = None) -> AaeBundle:
    cfg = config or AaeConfig()
    if cfg.patch % 2 ** len(cfg.widths):
        raise ValueError(f"patch {cfg.patch} not divisible by 2^{len(cfg.widths)}")
    enc_layers, side = _encoder_layers(cfg)
    widths = list(cfg.widths)
    dec_layers = [Dense(cfg.latent, side * side * widths[-1]), LeakyRelu(0.2), Reshape((side, side, widths[-1]))]
    outs = widths[-2::-1] + [cfg.channels]
    cin = widths[-1]
    for i, w in enumerate(outs):
        dec_layers.append(TransposedConv2d(cin, w, 4, 2, 1))
        dec_layers.append(Sigmoid() if i == len(outs) - 1 else LeakyRelu(0.2))
        cin = w
    disc_layers = [Dense(cfg.latent, 64), LeakyRelu(0.2), Dense(64, 32), LeakyRelu(0.2), Dense(32, 1)]
    shape = (cfg.patch, cfg.patch, cfg.channels)
    return AaeBundle(
        encoder=build_model(enc_layers, shape, seed=cfg.seed * 3 + 0),
        decoder=build_model(dec_layers, (cfg.latent,), seed=cfg.seed * 3 + 1),
        discriminator=build_model(disc_layers, (cfg.latent,), seed=cfg.seed * 3 + 2),
        latent=cfg.latent,
        patch_shape=shape,
        stride=cfg.stride,
    )


def encode(bundle: AaeBundle, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return predict(bundle.encoder, patches, batch_size)


def discriminate(bundle: AaeBundle, z: np.ndarray) -> np.ndarray:
    """Probability that each latent vector was drawn from the prior."""
    return expit(predict(bundle.discriminator, z)[:, 0])


def _check_finite(*values):
    for v in values:
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite loss {v}")


def train_step(bundle: AaeBundle, batch: np.ndarray, rng: np.random.Generator, lr: float) -> tuple[AaeBundle, StepLosses]:
    """Reconstruction update, then discriminator, then encoder as generator."""
    x = np.asarray(batch, dtype=np.float64)
    n = len(x)
    enc, dec, disc = bundle.encoder, bundle.decoder, bundle.discriminator

    # 1. reconstruction: encoder + decoder on the L1 loss
    z, enc_cache = forward(enc, x)
    x_hat, dec_cache = forward(dec, z)
    rec, g = loss_rec(x, x_hat)
    _check_finite(rec)
    dec_grads, gz = backward(dec, dec_cache, g)
    enc_grads, _ = backward(enc, enc_cache, gz)
    adam_step(dec, dec_grads, lr)
    adam_step(enc, enc_grads, lr)

    # 2. discriminator: real prior samples vs encoded patches
    z_fake, enc_cache = forward(enc, x)
    z_real = rng.standard_normal((n, bundle.latent))
    logits, d_cache = forward(disc, np.concatenate([z_real, z_fake]))
    d = expit(logits)
    disc_loss, _ = loss_adversarial(d[:n], d[n:])
    _check_finite(disc_loss)
    # d/dlogit of -log(p) is -(1 - p); of -log(1 - p) it is p
    grad_d = np.concatenate([-(1.0 - d[:n]), d[n:]]) / n
    disc_grads, _ = backward(disc, d_cache, grad_d)
    adam_step(disc, disc_grads, lr)

    # 3. generator: encoder fools the updated discriminator
    logits, d_cache = forward(disc, z_fake)
    d_fake = expit(logits)
    _, gen_loss = loss_adversarial(d_fake, d_fake)
    _check_finite(gen_loss)
    _, gz = backward(disc, d_cache, -(1.0 - d_fake) / n)
    enc_grads, _ = backward(enc, enc_cache, gz)
    _adam_with_state(enc, bundle.gen_state, enc_grads, lr)
    return bundle, StepLosses(rec, disc_loss, gen_loss)


def train_aae(patches: np.ndarray, config: AaeConfig | None = None, log: list | None = None,
              bundle: AaeBundle | None = None) -> AaeBundle:
    """Train on an ``(n, h, w, c)`` array of normalized log patches."""
    cfg = config or AaeConfig()
    data = np.asarray(patches, dtype=np.float64)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("need a non-empty (n, h, w, c) patch array")
    if bundle is None:
        cfg.patch, cfg.channels = data.shape[1], data.shape[3]
        bundle = build_aae(cfg)
    rng = make_rng(cfg.seed, 0xAAE)
    per_epoch = -(-len(data) // cfg.batch)
    sched = LrSchedule(cfg.lr_low, cfg.lr_high, max(1, round(cfg.ramp_epochs * per_epoch)))
    log = log if log is not None else []
    b = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        for i in range(0, len(data), cfg.batch):
            lr = lr_at(sched, b)
            _, losses = train_step(bundle, data[order[i : i + cfg.batch]], rng, lr)
            sums += (losses.rec, losses.disc, losses.gen)
            b += 1
        mean = sums / per_epoch
        log.append(EpochRecord(epoch, float(mean[0]), float(mean[1]), float(mean[2]), lr))
    return bundle


def reconstruct_image(bundle: AaeBundle, img: SarImage, stride: int | None = None, batch_size: int = 64) -> SarImage:
    """Patch-wise encode/decode; overlapping reconstructions are averaged."""
    if img.domain is not Domain.NORMLOG:
        raise ValueError("reconstruct_image expects a normalized log image")
    ph, pw, pc = bundle.patch_shape
    if img.height < ph or img.width < pw:
        raise ValueError(f"image {img.height}x{img.width} smaller than patch {ph}x{pw}")
    if img.channels != pc:
        raise ValueError(f"image has {img.channels} channels, model expects {pc}")
    stride = stride or bundle.stride
    origins = [(r, c) for r in patch_origins(img.height, ph, stride) for c in patch_origins(img.width, pw, stride)]
    batch = np.stack([img.data[r : r + ph, c : c + pw] for r, c in origins])
    out = predict(bundle.decoder, predict(bundle.encoder, batch, batch_size), batch_size)
    recon = stitch_patches([Patch(o, p, Domain.NORMLOG) for o, p in zip(origins, out)], img.height, img.width)
    return SarImage(np.clip(recon.data, 0.0, 1.0), Domain.NORMLOG)


def save_aae(bundle: AaeBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("encoder", "decoder", "discriminator"):
        save_model(getattr(bundle, name), directory / name)
    meta = {
        "format": "sarad-aae/1",
        "latent": bundle.latent,
        "patch_shape": list(bundle.patch_shape),
        "stride": bundle.stride,
        "norm_lo": bundle.norm_lo,
        "norm_hi": bundle.norm_hi,
    }
    gen = directory / "generator_adam"
    gen.mkdir(exist_ok=True)
    for name in sorted(bundle.gen_state.m):
        stem = name.replace(".", "_")
        write_tensor(gen / f"m_{stem}.sart", bundle.gen_state.m[name], version=2)
        write_tensor(gen / f"v_{stem}.sart", bundle.gen_state.v[name], version=2)
    meta["generator_step"] = bundle.gen_state.step
    (directory / "aae.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_aae(directory) -> AaeBundle:
    directory = Path(directory)
    meta_path = directory / "aae.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"AAE checkpoint not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    encoder = load_model(directory / "encoder")
    gen = directory / "generator_adam"
    state = AdamState.zeros(encoder)
    if gen.is_dir():
        state.step = int(meta.get("generator_step", 0))
        for name, p in encoder.params.items():
            stem = name.replace(".", "_")
            state.m[name] = read_tensor(gen / f"m_{stem}.sart")[0].reshape(p.shape)
            state.v[name] = read_tensor(gen / f"v_{stem}.sart")[0].reshape(p.shape)
    return AaeBundle(
        encoder=encoder,
        decoder=load_model(directory / "decoder"),
        discriminator=load_model(directory / "discriminator"),
        latent=int(meta["latent"]),
        patch_shape=tuple(meta["patch_shape"]),
        stride=int(meta["stride"]),
        norm_lo=meta["norm_lo"],
        norm_hi=meta["norm_hi"],
        gen_state=state,
    )


def write_epoch_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "rec_loss", "disc_loss", "gen_loss", "lr"])
        for r in log:
            wr.writerow([r.epoch, repr(r.rec_loss), repr(r.disc_loss), repr(r.gen_loss), repr(r.lr)])
