"""Layer kinds with hand-written forward and backward passes.

Tensors are channel-last: images are ``(batch, height, width, channels)`` and
vectors ``(batch, features)``.  Convolution kernels are stored as
``(k, k, in_channels, out_channels)``; a transposed convolution stores
``(k, k, out_channels, in_channels)`` so that it is the exact adjoint of a
convolution holding the same array.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import ClassVar

import numpy as np
from scipy.special import expit

__all__ = [
    "Layer",
    "Dense",
    "Conv2d",
    "TransposedConv2d",
    "LeakyRelu",
    "Sigmoid",
    "Tanh",
    "Flatten",
    "Reshape",
    "layer_from_dict",
    "conv_output_size",
]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Gather ``(n, out_h, out_w, k, k, c)`` windows from a padded batch."""
    n, _, _, c = xp.shape
    cols = np.empty((n, out_h, out_w, k, k, c))
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + span_h : stride, j : j + span_w : stride, :]
    return cols


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add windows back onto a padded canvas."""
    out = np.zeros(padded_shape)
    _, out_h, out_w = cols.shape[:3]
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + span_h : stride, j : j + span_w : stride, :] += cols[:, :, :, i, j, :]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, p:-p, p:-p, :]


class Layer:
    """Base class.  Subclasses are frozen dataclasses describing the layer."""

    kind: ClassVar[str] = ""

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def fan_in(self) -> int:
        return 1

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, params: dict, x: np.ndarray):
        raise NotImplementedError

    def backward(self, params: dict, cache, grad: np.ndarray):
        """Return ``(parameter gradients, input gradient)``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    kind: ClassVar[str] = "Dense"

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features

    def output_shape(self, in_shape):
        if in_shape[-1] not in (None, self.in_features):
            raise ValueError(f"Dense expects {self.in_features} features, got {in_shape[-1]}")
        return (self.out_features,)

    def forward(self, params, x):
        return x @ params["weight"] + params["bias"], x

    def backward(self, params, x, grad):
        return {"weight": x.T @ grad, "bias": grad.sum(axis=0)}, grad @ params["weight"].T


@dataclass(frozen=True)
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "Conv2d"

    def param_shapes(self):
        k = self.kernel
        return {"weight": (k, k, self.in_channels, self.out_channels), "bias": (self.out_channels,)}

    def fan_in(self):
        return self.kernel * self.kernel * self.in_channels

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ValueError(f"Conv2d expects {self.in_channels} channels, got {c}")
        f = lambda s: None if s is None else conv_output_size(s, self.kernel, self.stride, self.padding)  # noqa: E731
        return (f(h), f(w), self.out_channels)

    def forward(self, params, x):
        n, h, w, _ = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        oh, ow = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
        if oh < 1 or ow < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {k}")
        xp = _pad(x, p)
        cols = _im2col(xp, k, s, oh, ow)
        wmat = params["weight"].reshape(-1, self.out_channels)
        y = cols.reshape(-1, wmat.shape[0]) @ wmat + params["bias"]
        return y.reshape(n, oh, ow, self.out_channels), (cols, xp.shape)

    def backward(self, params, cache, grad):
        cols, padded_shape = cache
        wmat = params["weight"].reshape(-1, self.out_channels)
        g = grad.reshape(-1, self.out_channels)
        dw = (cols.reshape(g.shape[0], -1).T @ g).reshape(params["weight"].shape)
        dcols = (g @ wmat.T).reshape(cols.shape)
        dx = _crop(_col2im(dcols, padded_shape, self.kernel, self.stride), self.padding)
        return {"weight": dw, "bias": g.sum(axis=0)}, dx


@dataclass(frozen=True)
class TransposedConv2d(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "TransposedConv2d"

    def param_shapes(self):
        k = self.kernel
        return {"weight": (k, k, self.out_channels, self.in_channels), "bias": (self.out_channels,)}

    def fan_in(self):
        # input taps contributing to one output pixel
        return max(1, (self.kernel * self.kernel * self.in_channels) // (self.stride * self.stride))

    def _out(self, size):
        return (size - 1) * self.stride + self.kernel - 2 * self.padding

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ValueError(f"TransposedConv2d expects {self.in_channels} channels, got {c}")
        return (None if h is None else self._out(h), None if w is None else self._out(w), self.out_channels)

    def forward(self, params, x):
        n, h, w, _ = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        wmat = params["weight"].reshape(-1, self.in_channels)
        cols = (x.reshape(-1, self.in_channels) @ wmat.T).reshape(n, h, w, k, k, self.out_channels)
        full = (n, (h - 1) * s + k, (w - 1) * s + k, self.out_channels)
        y = _crop(_col2im(cols, full, k, s), p) + params["bias"]
        return y, x

    def backward(self, params, x, grad):
        n, h, w, _ = x.shape
        k, s = self.kernel, self.stride
        gcols = _im2col(_pad(grad, self.padding), k, s, h, w).reshape(n * h * w, -1)
        wmat = params["weight"].reshape(-1, self.in_channels)
        x2 = x.reshape(-1, self.in_channels)
        dw = (gcols.T @ x2).reshape(params["weight"].shape)
        dx = (gcols @ wmat).reshape(x.shape)
        return {"weight": dw, "bias": grad.sum(axis=(0, 1, 2))}, dx


@dataclass(frozen=True)
class LeakyRelu(Layer):
    slope: float = 0.2
    kind: ClassVar[str] = "LeakyRelu"

    def forward(self, params, x):
        mask = x > 0
        return np.where(mask, x, self.slope * x), mask

    def backward(self, params, mask, grad):
        return {}, np.where(mask, grad, self.slope * grad)


@dataclass(frozen=True)
class Sigmoid(Layer):
    kind: ClassVar[str] = "Sigmoid"

    def forward(self, params, x):
        y = expit(x)
        return y, y

    def backward(self, params, y, grad):
        return {}, grad * y * (1.0 - y)


@dataclass(frozen=True)
class Tanh(Layer):
    kind: ClassVar[str] = "Tanh"

    def forward(self, params, x):
        y = np.tanh(x)
        return y, y

    def backward(self, params, y, grad):
        return {}, grad * (1.0 - y * y)


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "Flatten"

    def output_shape(self, in_shape):
        if any(d is None for d in in_shape):
            raise ValueError("Flatten needs fully known input shape")
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, grad):
        return {}, grad.reshape(shape)


@dataclass(frozen=True)
class Reshape(Layer):
    shape: tuple[int, ...]
    kind: ClassVar[str] = "Reshape"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, params, x):
        return x.reshape(x.shape[0], *self.shape), x.shape

    def backward(self, params, shape, grad):
        return {}, grad.reshape(shape)


_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, TransposedConv2d, LeakyRelu, Sigmoid, Tanh, Flatten, Reshape)}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**d)
