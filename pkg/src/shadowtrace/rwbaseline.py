"""Random-walker ultrasound confidence baseline.

The image is an 8-connected graph.  The top row (transducer) is held at 1 and
the bottom row at 0; every other pixel takes the probability that a random
walker starting there reaches the transducer first.  Edge weights are
``exp(-beta * |g_i - g_j|) + eps`` where ``g`` is the [0, 1]-normalised image
attenuated by ``exp(-alpha * depth_fraction)``.  Horizontal edges are further
multiplied by ``gamma``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from . import kernels
from .errors import FormatError, SolverFailure
from .imaging import ConfidenceMap, ShadowMask

log = logging.getLogger(__name__)

EDGE_EPS = 1e-6
CG_TOL = 1e-12  # CG stopping rule; looser stops leave ~1e-4 error at beta = 90
MAX_RESIDUAL = 1e-8  # relative residual above this is a solver failure


@dataclass(frozen=True)
class RWParams:
    alpha: float = 1.0
    beta: float = 90.0
    gamma: float = 0.3
    threshold: float = 0.3

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.gamma < 0:
            raise ValueError("need alpha > 0, beta > 0, gamma >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


# default setting, and a stronger-attenuation alternative
RW_CHOSEN = RWParams(alpha=1.0, beta=90.0, gamma=0.3, threshold=0.3)
RW_STAR = RWParams(alpha=2.0, beta=90.0, gamma=0.05, threshold=0.25)


def attenuated_intensity(img, alpha: float) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    lo, hi = x.min(), x.max()
    g = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    depth = np.arange(x.shape[0], dtype=np.float64) / (x.shape[0] - 1)
    return g * np.exp(-alpha * depth)[:, None]


def laplacian(img, p: RWParams) -> sp.csr_matrix:
    """Weighted graph Laplacian over all pixels (row-major numbering)."""
    g = np.ascontiguousarray(attenuated_intensity(img, p.alpha))
    h, w = g.shape
    right, down, dr, dl = kernels.rw_edge_weights(g, p.beta, p.gamma, EDGE_EPS)
    idx = np.arange(h * w).reshape(h, w)
    src = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel(), idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()])
    dst = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()])
    wts = np.concatenate([right.ravel(), down.ravel(), dr.ravel(), dl.ravel()])
    n = h * w
    adj = sp.coo_matrix((wts, (src, dst)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


def rw_system(img, p: RWParams):
    """Reduced system ``A x = b`` over the free (non-boundary) pixels."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 1:
        raise FormatError("random walker needs a 2-D image with at least 3 rows")
    if not np.all(np.isfinite(x)):
        raise FormatError("image contains non-finite values")
    h, w = x.shape
    lap = laplacian(x, p)
    free = np.arange(w, (h - 1) * w)
    seeds = np.concatenate([np.arange(w), np.arange((h - 1) * w, h * w)])
    seed_vals = np.concatenate([np.ones(w), np.zeros(w)])
    a = lap[free][:, free].tocsr()
    b = -(lap[free][:, seeds] @ seed_vals)
    return a, b, seed_vals


def rw_confidence(img, p: RWParams = RW_CHOSEN, tol: float = CG_TOL) -> ConfidenceMap:
    x = np.asarray(img, dtype=np.float64)
    a, b, _ = rw_system(x, p)
    h, w = x.shape
    n = a.shape[0]
    jacobi = sp.diags(1.0 / a.diagonal())
    sol, info = cg(a, b, rtol=tol, atol=0.0, maxiter=10 * n, M=jacobi)
    res = np.linalg.norm(b - a @ sol) / max(np.linalg.norm(b), 1e-300)
    if info != 0 or not np.isfinite(res) or res > max(MAX_RESIDUAL, 10 * tol):
        raise SolverFailure(f"CG did not converge (info={info}, relative residual={res:.3e})")
    out = np.empty(h * w)
    out[:w] = 1.0
    out[(h - 1) * w:] = 0.0
    out[w:(h - 1) * w] = np.clip(sol, 0.0, 1.0)
    return ConfidenceMap(out.reshape(h, w))


def invert_confidence(conf) -> ConfidenceMap:
    return ConfidenceMap(1.0 - np.asarray(conf, dtype=np.float64))


def threshold_confidence(conf, t: float) -> ShadowMask:
    """Shadow where confidence is strictly greater than ``t``."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return ShadowMask(np.asarray(conf, dtype=np.float64) > t)


def rw_shadow(img, p: RWParams = RW_CHOSEN):
    """Shadow-oriented confidence (1 - S) and its thresholded mask."""
    c = invert_confidence(rw_confidence(img, p))
    return c, threshold_confidence(c, p.threshold)
