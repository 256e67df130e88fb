"""Sequential models, Adam, cyclical learning rate and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..core import make_rng
from ..tensorio import read_tensor, write_tensor
from .layers import Layer, layer_from_dict

__all__ = [
    "ModelBundle",
    "ForwardCache",
    "StaleCacheError",
    "NonFiniteGradientError",
    "LrSchedule",
    "build_model",
    "forward",
    "backward",
    "adam_step",
    "lr_at",
    "gradient_check",
    "save_model",
    "load_model",
]

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class StaleCacheError(RuntimeError):
    """A forward cache was used after the model changed, or with another model."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class ModelBundle:
    """Layers, parameters and Adam state of one sequential network.

    Parameters are keyed ``"<layer index>.<name>"``.  ``input_shape`` is the
    per-sample shape; ``None`` entries accept any size (fully convolutional).
    ``meta`` carries JSON-serializable extras such as normalization bounds.
    """

    layers: list[Layer]
    params: dict[str, np.ndarray]
    input_shape: tuple
    seed: int = 0
    step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = 0  # bumped on every parameter change; guards caches

    def __post_init__(self):
        for name, p in self.params.items():
            self.adam_m.setdefault(name, np.zeros_like(p))
            self.adam_v.setdefault(name, np.zeros_like(p))

    def layer_params(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def output_shape(self) -> tuple:
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def copy(self) -> "ModelBundle":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelBundle(
            list(self.layers), cp(self.params), tuple(self.input_shape), self.seed, self.step,
            cp(self.adam_m), cp(self.adam_v), json.loads(json.dumps(self.meta)),
        )


def build_model(layers: Sequence[Layer], input_shape: tuple, seed: int = 0, meta: dict | None = None) -> ModelBundle:
    """Initialise weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases at zero."""
    layers = list(layers)
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    rng = make_rng(seed, 0x1417)
    params = {}
    for i, layer in enumerate(layers):
        for name, pshape in layer.param_shapes().items():
            if name == "bias":
                params[f"{i}.{name}"] = np.zeros(pshape)
            else:
                bound = 1.0 / math.sqrt(layer.fan_in())
                params[f"{i}.{name}"] = rng.uniform(-bound, bound, size=pshape)
    return ModelBundle(layers, params, tuple(input_shape), seed=seed, meta=dict(meta or {}))


@dataclass
class ForwardCache:
    model_id: int
    version: int
    input_shape: tuple
    layer_caches: list


def _check_input(model: ModelBundle, batch: np.ndarray) -> None:
    expected = tuple(model.input_shape)
    got = batch.shape[1:]
    if len(got) != len(expected) or any(e is not None and e != g for e, g in zip(expected, got)):
        raise ValueError(f"batch sample shape {got} does not match model input {expected}")


def forward(model: ModelBundle, batch: np.ndarray):
    """Run the network; returns ``(output, cache)``."""
    x = np.asarray(batch, dtype=np.float64)
    _check_input(model, x)
    caches = []
    for i, layer in enumerate(model.layers):
        x, c = layer.forward(model.layer_params(i), x)
        caches.append(c)
    return x, ForwardCache(id(model), model.version, batch.shape, caches)


def predict(model: ModelBundle, batch: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [forward(model, batch[i : i + batch_size])[0] for i in range(0, len(batch), batch_size)]
    return np.concatenate(outs, axis=0)


def backward(model: ModelBundle, cache: ForwardCache, output_gradient: np.ndarray):
    """Exact gradients; returns ``(parameter gradients, input gradient)``."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache does not belong to the current model state")
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(output_gradient, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        pg, g = layer.backward(model.layer_params(i), cache.layer_caches[i], g)
        for name, val in pg.items():
            grads[f"{i}.{name}"] = val
    return grads, g


def adam_step(model: ModelBundle, gradients: dict[str, np.ndarray], lr: float) -> ModelBundle:
    """One bias-corrected Adam update, applied in place; returns the model."""
    for name, g in gradients.items():
        if not np.all(np.isfinite(g)):
            idx = int(name.split(".")[0])
            raise NonFiniteGradientError(f"non-finite gradient for {name} (layer {idx}, {model.layers[idx].kind})")
    model.step += 1
    t = model.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, g in gradients.items():
        m = model.adam_m[name]
        v = model.adam_v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if lr != 0:
            model.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    model.version += 1
    return model


@dataclass(frozen=True)
class LrSchedule:
    """Triangular cyclical learning rate: low -> high over ``ramp_batches``, then back."""

    low: float
    high: float
    ramp_batches: int

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError("low must not exceed high")
        if self.ramp_batches < 1:
            raise ValueError("ramp_batches must be >= 1")


def lr_at(schedule: LrSchedule, batch_index: int) -> float:
    if batch_index < 0:
        raise ValueError("batch index must be non-negative")
    r = schedule.ramp_batches
    phase = batch_index % (2 * r)
    frac = phase / r if phase <= r else (2 * r - phase) / r
    return schedule.low + (schedule.high - schedule.low) * frac


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def gradient_check(model: ModelBundle, batch: np.ndarray, loss_fn: LossFn, h: float = 1e-5,
                   check_input: bool = True, floor: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    Every parameter element (and, optionally, every input element) is
    perturbed.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    batch = np.array(batch, dtype=np.float64)

    def loss_of(x):
        out, _ = forward(model, x)
        val = float(loss_fn(out)[0])
        if not math.isfinite(val):
            raise FloatingPointError("loss is not finite")
        return val

    out, cache = forward(model, batch)
    val, gout = loss_fn(out)
    if not math.isfinite(float(val)):
        raise FloatingPointError("loss is not finite")
    grads, gin = backward(model, cache, gout)

    worst = 0.0

    def compare(analytic, numeric):
        nonlocal worst
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)

    for name, p in model.params.items():
        flat = p.reshape(-1)
        ga = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_of(batch)
            flat[j] = orig - h
            lm = loss_of(batch)
            flat[j] = orig
            compare(ga[j], (lp - lm) / (2 * h))
    if check_input:
        flat = batch.reshape(-1)
        ga = gin.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_of(batch)
            flat[j] = orig - h
            lm = loss_of(batch)
            flat[j] = orig
            compare(ga[j], (lp - lm) / (2 * h))
    return worst


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + one float64 tensor file per array


def _fname(prefix: str, name: str) -> str:
    return f"{prefix}_{name.replace('.', '_')}.sart"


def save_model(model: ModelBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(model.params)
    manifest = {
        "format": "sarad-model/1",
        "layers": [layer.to_dict() for layer in model.layers],
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "step": model.step,
        "parameters": {n: list(model.params[n].shape) for n in names},
        "meta": model.meta,
    }
    for n in names:
        write_tensor(directory / _fname("param", n), model.params[n], version=2)
        write_tensor(directory / _fname("adam_m", n), model.adam_m[n], version=2)
        write_tensor(directory / _fname("adam_v", n), model.adam_v[n], version=2)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(directory) -> ModelBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"model manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    layers = [layer_from_dict(d) for d in manifest["layers"]]
    params, m, v = {}, {}, {}
    for n, shape in manifest["parameters"].items():
        params[n] = read_tensor(directory / _fname("param", n))[0].reshape(shape)
        m[n] = read_tensor(directory / _fname("adam_m", n))[0].reshape(shape)
        v[n] = read_tensor(directory / _fname("adam_v", n))[0].reshape(shape)
    shape = tuple(None if s is None else int(s) for s in manifest["input_shape"])
    return ModelBundle(layers, params, shape, int(manifest["seed"]), int(manifest["step"]), m, v, manifest["meta"])
