"""Binary tensor container and grayscale renderings.

Layout (little-endian)::

    magic    4 bytes  b"SART"
    version  u16      1 = float32 payload, 2 = float64 payload
    domain   u8       0 linear, 1 log, 2 normalized log, 3 complex
    rank     u8
    dims     rank x u32
    payload  row-major, channel-last; complex values as interleaved (re, im)

Version 1 is the interchange format for images and maps.  Version 2 carries
model parameters, which must survive a save/load cycle bit-exactly.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .core import ComplexSlcImage, Domain, SarImage

__all__ = [
    "TensorFormatError",
    "write_tensor",
    "read_tensor",
    "save_image",
    "load_image",
    "write_pgm",
]

MAGIC = b"SART"
_HEADER = struct.Struct("<4sHBB")
_DTYPES = {1: "<f4", 2: "<f8"}
_MAX_ELEMENTS = 2**40


class TensorFormatError(ValueError):
    """Malformed, truncated or unsupported tensor file."""


def write_tensor(path, grid, domain: Domain | int | None = None, version: int = 1) -> None:
    if isinstance(grid, SarImage):
        domain = grid.domain if domain is None else domain
        grid = grid.data
    elif isinstance(grid, ComplexSlcImage):
        domain, grid = Domain.COMPLEX, grid.data
    arr = np.asarray(grid)
    if domain is None:
        domain = Domain.COMPLEX if np.iscomplexobj(arr) else Domain.LINEAR
    domain = Domain(domain)
    if version not in _DTYPES:
        raise TensorFormatError(f"unsupported version {version}")
    if arr.ndim > 255 or any(d >= 2**32 for d in arr.shape):
        raise TensorFormatError(f"shape {arr.shape} does not fit the header")
    dtype = _DTYPES[version]
    if domain is Domain.COMPLEX:
        arr = np.asarray(arr, dtype=np.complex128)
        payload = np.stack([arr.real, arr.imag], axis=-1).astype(dtype)
    else:
        if np.iscomplexobj(arr):
            raise TensorFormatError("complex data must use the complex domain tag")
        payload = np.asarray(arr, dtype=dtype)
    header = _HEADER.pack(MAGIC, version, int(domain), arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes())
    os.replace(tmp, path)


def read_tensor(path) -> tuple[np.ndarray, Domain]:
    """Return ``(array, domain)``; arrays come back as float64 / complex128."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, version, tag, rank = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version not in _DTYPES:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    try:
        domain = Domain(tag)
    except ValueError:
        raise TensorFormatError(f"{path}: unknown domain tag {tag}") from None
    offset = _HEADER.size + 4 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated dimensions")
    shape = struct.unpack_from(f"<{rank}I", raw, _HEADER.size)
    count = 1
    for d in shape:
        count *= d
    if domain is Domain.COMPLEX:
        count *= 2
    if count > _MAX_ELEMENTS:
        raise TensorFormatError(f"{path}: dimensions {shape} overflow")
    itemsize = np.dtype(_DTYPES[version]).itemsize
    expected = count * itemsize
    if len(raw) - offset != expected:
        raise TensorFormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype=_DTYPES[version], count=count, offset=offset)
    if domain is Domain.COMPLEX:
        pairs = flat.astype(np.float64).reshape(*shape, 2)
        return pairs[..., 0] + 1j * pairs[..., 1], domain
    return flat.astype(np.float64).reshape(shape), domain


def save_image(path, img) -> None:
    write_tensor(path, img)


def load_image(path):
    data, domain = read_tensor(path)
    if domain is Domain.COMPLEX:
        return ComplexSlcImage(data)
    return SarImage(data, domain)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary portable graymap, min-max scaled."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros(arr.shape) if hi <= lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
