"""Raster types, normalisation, augmentation and file I/O.

Rasters are numpy arrays indexed ``[row, col]``.  The thin dataclasses below
validate their invariants once at construction and expose the array through
``__array__`` so every numeric routine can take either a wrapper or a bare
array.

On-disk formats
---------------
* images: 8-bit grayscale PNG
* masks: 8-bit PNG, 0 = background, 255 = shadow
* confidence maps: 16-bit grayscale PNG (value / 65535) or the raw ``SCM1``
  container: 16-byte little-endian header (magic, width, height, reserved)
  followed by ``width * height`` float32 values, row-major.
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConstantImage, DimensionMismatch, FormatError

MIN_SIDE = 8
SCM_MAGIC = b"SCM1"
_SCM_HEADER = struct.Struct("<4sIII")
WHITEN_DIVISORS = ("std", "var")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.pixels, dtype=np.float32)
        if a.ndim != 2:
            raise FormatError(f"image must be 2-D, got shape {a.shape}")
        if a.shape[0] < MIN_SIDE or a.shape[1] < MIN_SIDE:
            raise FormatError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise FormatError("image contains non-finite intensities")
        if a.min() < 0:
            raise FormatError("image intensities must be >= 0")
        object.__setattr__(self, "pixels", _frozen(a))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)


@dataclass(frozen=True)
class ShadowMask:
    bits: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.bits)
        if a.ndim != 2:
            raise FormatError(f"mask must be 2-D, got shape {a.shape}")
        if a.dtype != bool:
            if not np.all((a == 0) | (a == 1)):
                raise FormatError("mask values must be binary")
            a = a.astype(bool)
        object.__setattr__(self, "bits", _frozen(a))

    @property
    def shape(self):
        return self.bits.shape

    def __array__(self, dtype=None, copy=None):
        return self.bits if dtype is None else self.bits.astype(dtype)


@dataclass(frozen=True)
class ConfidenceMap:
    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2:
            raise FormatError(f"confidence map must be 2-D, got shape {a.shape}")
        if not np.all((a >= 0.0) & (a <= 1.0)):
            raise FormatError("confidence values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(a))

    @property
    def shape(self):
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class LabeledSample:
    """An image with its image-level label and optional pixel annotations."""

    image: GrayImage
    label: int
    mask: Optional[ShadowMask] = None
    coarse_mask: Optional[ShadowMask] = None
    confidence: Optional[ConfidenceMap] = None
    class_id: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.coarse_mask is not None and self.mask is None:
            raise ValueError("coarse_mask requires mask")
        for name in ("mask", "coarse_mask", "confidence"):
            r = getattr(self, name)
            if r is not None and r.shape != self.image.shape:
                raise DimensionMismatch(f"{name} shape {r.shape} != image shape {self.image.shape}")

    def replace(self, **changes) -> "LabeledSample":
        return dataclasses.replace(self, **changes)


def whiten(img, divisor: str = "std") -> np.ndarray:
    """Subtract the mean intensity and divide by the std (or the variance).

    Returns a float64 array; whitened values are signed so they are not a
    valid :class:`GrayImage`.
    """
    if divisor not in WHITEN_DIVISORS:
        raise ValueError(f"divisor must be one of {WHITEN_DIVISORS}")
    x = np.asarray(img, dtype=np.float64)
    if x.size == 0 or np.all(x == x.flat[0]):
        raise ConstantImage("cannot whiten a constant image")
    mu = x.mean()
    centered = x - mu
    var = np.mean(centered * centered)
    scale = np.sqrt(var) if divisor == "std" else var
    out = centered / scale
    # re-centre: removes the rounding residue of the first subtraction
    return out - out.mean()


def hflip(a: np.ndarray) -> np.ndarray:
    """Mirror a raster about its vertical axis."""
    return np.ascontiguousarray(np.asarray(a)[..., ::-1])


def flip_horizontal(sample: LabeledSample) -> LabeledSample:
    def _f(r, cls, attr):
        return None if r is None else cls(hflip(getattr(r, attr)))

    return sample.replace(
        image=GrayImage(hflip(sample.image.pixels)),
        mask=_f(sample.mask, ShadowMask, "bits"),
        coarse_mask=_f(sample.coarse_mask, ShadowMask, "bits"),
        confidence=_f(sample.confidence, ConfidenceMap, "values"),
    )


# --------------------------------------------------------------------- I/O


def _read_png(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable PNG ({exc})") from exc


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)


def save_image(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")


def load_image(path) -> GrayImage:
    a = _read_png(path)
    if a.ndim != 2:
        raise FormatError(f"{path}: expected single-channel image, got shape {a.shape}")
    return GrayImage(a.astype(np.float32))


def save_mask(path, mask) -> None:
    bits = np.asarray(mask).astype(bool)
    Image.fromarray(np.where(bits, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path, like=None) -> ShadowMask:
    a = _read_png(path)
    if a.ndim != 2:
        raise FormatError(f"{path}: expected single-channel mask")
    if not np.all((a == 0) | (a == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    if like is not None and a.shape != np.shape(like):
        raise DimensionMismatch(f"{path}: mask shape {a.shape} != image shape {np.shape(like)}")
    return ShadowMask(a == 255)


def quantize_confidence(values) -> np.ndarray:
    return np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)


def save_confidence(path, conf) -> None:
    """Write a confidence map; ``.scm`` suffix selects the raw container."""
    v = np.asarray(conf, dtype=np.float64)
    if str(path).endswith(".scm"):
        h, w = v.shape
        with open(path, "wb") as f:
            f.write(_SCM_HEADER.pack(SCM_MAGIC, w, h, 0))
            f.write(v.astype("<f4").tobytes())
        return
    Image.fromarray(quantize_confidence(v)).save(path, format="PNG")


def load_confidence(path, like=None) -> ConfidenceMap:
    if str(path).endswith(".scm"):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < _SCM_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, w, h, _ = _SCM_HEADER.unpack_from(raw)
        if magic != SCM_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        body = raw[_SCM_HEADER.size:]
        if len(body) != 4 * w * h:
            raise FormatError(f"{path}: expected {4 * w * h} payload bytes, got {len(body)}")
        a = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
    else:
        q = _read_png(path)
        if q.ndim != 2:
            raise FormatError(f"{path}: expected single-channel confidence map")
        a = q.astype(np.float64) / 65535.0
    if like is not None and a.shape != np.shape(like):
        raise DimensionMismatch(f"{path}: shape {a.shape} != {np.shape(like)}")
    return ConfidenceMap(a)
