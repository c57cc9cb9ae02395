"""Binary-to-confidence transfer function.

Turns a (manual, predicted) pair of shadow masks into a reference confidence
map: manually annotated pixels get full confidence, false-positive pixels get
a triangular intensity-similarity score peaking at the mean intensity of the
true-positive region.  Only the training path uses this; inference predicts
confidence maps directly.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRange, DimensionMismatch, EmptyManualMask
from .imaging import ConfidenceMap


def compute_i_mean(manual, predicted, img) -> float:
    """Mean intensity over manual ∩ predicted, or over manual when they are disjoint."""
    g = np.asarray(manual).astype(bool)
    p = np.asarray(predicted).astype(bool)
    x = np.asarray(img, dtype=np.float64)
    if g.shape != p.shape or g.shape != x.shape:
        raise DimensionMismatch(f"shapes differ: {g.shape}, {p.shape}, {x.shape}")
    if not g.any():
        raise EmptyManualMask("manual mask is empty")
    tp = g & p
    return float(x[tp].mean() if tp.any() else x[g].mean())


def transfer_confidence(intensity, i_min: float, i_max: float, i_mean: float):
    """Confidence of a false-positive pixel with the given intensity.

    Rises linearly from 0 at ``i_min`` to 1 at ``i_mean`` and falls back to 0
    at ``i_max``.  When ``i_mean == i_min`` only the rising-from-the-mean
    branch ``(I - i_mean) / (i_max - i_mean)`` applies.
    """
    if i_max == i_min:
        raise DegenerateRange("constant image: i_max == i_min")
    if not i_min <= i_mean < i_max:
        raise DegenerateRange(f"i_mean={i_mean} outside [i_min={i_min}, i_max={i_max})")
    x = np.asarray(intensity, dtype=np.float64)
    if i_mean > i_min:
        rise = (x - i_min) / (i_mean - i_min)
        fall = (i_max - x) / (i_max - i_mean)
        out = np.where(x < i_mean, rise, np.where(x > i_mean, fall, 1.0))
    else:
        out = np.where(x > i_mean, (x - i_mean) / (i_max - i_mean), 1.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def build_reference_map(manual, predicted, img) -> ConfidenceMap:
    g = np.asarray(manual).astype(bool)
    p = np.asarray(predicted).astype(bool)
    x = np.asarray(img, dtype=np.float64)
    i_mean = compute_i_mean(g, p, x)
    i_min, i_max = float(x.min()), float(x.max())
    out = g.astype(np.float64)
    fp = p & ~g
    if fp.any():
        out[fp] = transfer_confidence(x[fp], i_min, i_max, i_mean)
    elif i_max == i_min:
        raise DegenerateRange("constant image: i_max == i_min")
    return ConfidenceMap(out)
