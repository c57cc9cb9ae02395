"""Segmentation and confidence-map evaluation scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import stats

from .errors import DegenerateDifferences, DegenerateVariance, DimensionMismatch

# Mean per-pixel squared error is reported multiplied by this factor.
MSE_SCALE = 1e4


@dataclass(frozen=True)
class ConfusionScores:
    dice: float
    recall: float
    precision: float
    mse: float

    def as_dict(self):
        return asdict(self)


def _pair(a, b, dtype=None):
    a = np.asarray(a) if dtype is None else np.asarray(a, dtype=dtype)
    b = np.asarray(b) if dtype is None else np.asarray(b, dtype=dtype)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def confusion_scores(pred, truth, mse_scale: float = MSE_SCALE) -> ConfusionScores:
    """DICE, recall, precision and scaled MSE of a predicted mask.

    Empty-set conventions: both empty gives 1 for all three ratios; an empty
    truth gives recall 0; an empty prediction gives precision 0.
    """
    p, g = _pair(pred, truth)
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    np_, ng = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    if np_ == 0 and ng == 0:
        dice = recall = precision = 1.0
    else:
        dice = 2.0 * tp / (np_ + ng)
        recall = tp / ng if ng else 0.0
        precision = tp / np_ if np_ else 0.0
    mse = float(np.count_nonzero(p ^ g)) / p.size * mse_scale
    return ConfusionScores(dice, recall, precision, mse)


def soft_dice(a, b) -> float:
    """Real-valued DICE: 2 sum(ab) / (sum a^2 + sum b^2); 1 when both are all zero."""
    x, y = _pair(a, b, np.float64)
    den = float(np.sum(x * x) + np.sum(y * y))
    if den == 0.0:
        return 1.0
    return 2.0 * float(np.sum(x * y)) / den


def icc_mean_squares(a, b):
    """Two-way ANOVA mean squares with pixels as targets and the rasters as judges.

    Returns (rows, columns, interaction, n_targets).  Uses the two-judge
    difference/sum decomposition so identical rasters give exact zeros.
    """
    x, y = _pair(a, b, np.float64)
    x = x.ravel()
    y = y.ravel()
    n = x.size
    if n < 2:
        raise DegenerateVariance("need at least two targets")
    s = x + y
    d = x - y
    grand = s.mean() / 2.0
    ss_rows = 2.0 * np.sum((s / 2.0 - grand) ** 2)
    dbar = d.mean()
    ss_cols = n * dbar * dbar / 2.0
    ss_err = np.sum((d - dbar) ** 2) / 2.0
    return ss_rows / (n - 1), ss_cols, ss_err / (n - 1), n


def icc(a, b) -> float:
    """ICC(2,1) agreement between two rasters, each pixel a target."""
    r, c, m, n = icc_mean_squares(a, b)
    den = r + m + 2.0 * (c - m) / n
    if den == 0.0:
        raise DegenerateVariance("ICC denominator is zero")
    return float((r - m) / den)


def human_variability(anno_a, anno_b):
    """Scores of a second annotation (as prediction) against the chosen ground truth."""
    scores = confusion_scores(anno_b, anno_a)
    return scores, icc(np.asarray(anno_a, dtype=np.float64), np.asarray(anno_b, dtype=np.float64))


def paired_t_test(scores_a, scores_b) -> float:
    """Two-sided p-value of the paired t statistic.

    Differences that are constant (up to rounding) and non-zero give p = 0.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch("score lists must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    if np.all(d == 0):
        raise DegenerateDifferences("all paired differences are zero")
    # constant differences (up to rounding) give an infinite statistic
    if np.allclose(d, d[0], rtol=1e-12, atol=0.0):
        return 0.0
    sd = d.std(ddof=1)
    t = d.mean() / (sd / math.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), df=d.size - 1))


SIGNIFICANCE = 0.01
