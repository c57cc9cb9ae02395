"""Multi-view compounding with Gaussian beam weights and confidence modulation.

Views are assumed co-registered.  Each view has a beam centre line; its raw
weight at a pixel falls off as a Gaussian of the pixel's distance from that
line, optionally multiplied by the normalised view intensity.  Per-view
confidence maps multiply those weights before renormalising.  Shadow
confidence maps (high = shadowed) are converted with ``invert=True`` so that a
shadowed view loses weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NoViews

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeamLine:
    """Line through (x, y) with direction angle measured from the +y (depth) axis."""

    x: float
    y: float = 0.0
    angle: float = 0.0


@dataclass
class ViewStack:
    views: list
    beams: Optional[list] = None  # one BeamLine per view; default: vertical through the centre
    valid: Optional[list] = None  # per-view boolean field-of-view masks
    confmaps: Optional[list] = None
    sigma: Optional[float] = None  # default: width / 4

    def __post_init__(self):
        if not self.views:
            raise NoViews("empty view stack")
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]
        shape = self.views[0].shape
        for name in ("views", "valid", "confmaps"):
            rs = getattr(self, name)
            if rs is None:
                continue
            if len(rs) != len(self.views):
                raise DimensionMismatch(f"{name}: expected {len(self.views)} rasters, got {len(rs)}")
            for r in rs:
                if np.shape(r) != shape:
                    raise DimensionMismatch(f"{name}: raster shape {np.shape(r)} != {shape}")
        if self.beams is None:
            self.beams = [BeamLine(x=shape[1] / 2.0)] * len(self.views)
        if self.sigma is None:
            self.sigma = shape[1] / 4.0

    @property
    def shape(self):
        return self.views[0].shape


def _normalize(raw: np.ndarray) -> np.ndarray:
    tot = raw.sum(axis=0)
    out = np.zeros_like(raw)
    ok = tot > 0
    out[:, ok] = raw[:, ok] / tot[ok]
    return out


def beam_distance(shape, beam: BeamLine) -> np.ndarray:
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    # unit direction (sin a, cos a); distance = |cross(p - p0, dir)|
    dx, dy = math.sin(beam.angle), math.cos(beam.angle)
    return np.abs((x - beam.x) * dy - (y - beam.y) * dx)


def gaussian_weights(stack: ViewStack, use_intensity: bool = False) -> np.ndarray:
    """Per-pixel normalised weights, shape (n_views, H, W).

    Pixels where no view is valid get all-zero weights.
    """
    if len(stack.views) < 1:
        raise NoViews("no views")
    raw = []
    for k, (v, beam) in enumerate(zip(stack.views, stack.beams)):
        d = beam_distance(stack.shape, beam)
        wv = np.exp(-0.5 * (d / stack.sigma) ** 2)
        if use_intensity:
            vmax = v.max()
            wv = wv * (v / vmax if vmax > 0 else np.zeros_like(v))
        if stack.valid is not None:
            wv = np.where(np.asarray(stack.valid[k], dtype=bool), wv, 0.0)
        raw.append(wv)
    return _normalize(np.stack(raw))


def apply_confidence(weights, confmaps, invert: bool = False) -> np.ndarray:
    """Multiply weights by per-view confidence and renormalise per pixel.

    ``invert`` uses ``1 - c`` instead of ``c``.  Pixels where every modulated
    weight vanishes keep their original weights.
    """
    w = np.asarray(weights, dtype=np.float64)
    c = np.stack([np.asarray(m, dtype=np.float64) for m in confmaps])
    if c.shape != w.shape:
        raise DimensionMismatch(f"confidence stack {c.shape} != weights {w.shape}")
    mult = 1.0 - c if invert else c
    mod = w * mult
    tot = mod.sum(axis=0)
    dead = (tot <= 0) & (w.sum(axis=0) > 0)
    if dead.any():
        log.info("confidence fallback to unmodulated weights on %d pixels", int(dead.sum()))
    out = _normalize(mod)
    out[:, dead] = w[:, dead]
    # equal modulation across views cancels in the normalisation; keep w bit-exact
    same = np.all(mult == mult[:1], axis=0) & (mult[0] > 0)
    out[:, same] = w[:, same]
    return out


def fuse(views, weights) -> np.ndarray:
    v = np.stack([np.asarray(x, dtype=np.float64) for x in views])
    w = np.asarray(weights, dtype=np.float64)
    if v.shape != w.shape:
        raise DimensionMismatch(f"views {v.shape} != weights {w.shape}")
    return np.sum(w * v, axis=0)


def difference_map(before, after) -> np.ndarray:
    """|before - after| scaled to [0, 1] by its maximum."""
    a = np.asarray(before, dtype=np.float64)
    b = np.asarray(after, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    d = np.abs(a - b)
    m = d.max()
    return d / m if m > 0 else d


def compound(stack: ViewStack, use_intensity: bool = False, invert: bool = False):
    """Fuse with and without confidence modulation.

    Returns (fused_plain, fused_with_confidence, difference_map).  Without
    confidence maps the second image equals the first.
    """
    w = gaussian_weights(stack, use_intensity)
    plain = fuse(stack.views, w)
    if stack.confmaps is None:
        return plain, plain.copy(), np.zeros_like(plain)
    wc = apply_confidence(w, stack.confmaps, invert)
    withc = fuse(stack.views, wc)
    return plain, withc, difference_map(plain, withc)
