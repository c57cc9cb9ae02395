"""Synthetic fan-beam ultrasound phantoms with exact shadow ground truth.

Each pixel is lit by a straight ray from a virtual transducer apex above the
top edge.  Its intensity is::

    gain * exp(-integral of mu along the ray) * backscatter * (1 + s * noise)

except inside occluders, which skip their own excess attenuation so they show
as bright reflectors.

Shadow ground truth is purely geometric: a pixel outside every occluder is
shadow when the occluders' excess attenuation on its ray leaves a
transmittance below ``tau``.  Speckle never changes the mask.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull
from skimage.draw import polygon as raster_polygon

from . import kernels
from .errors import EmptyMask, InvalidSpec
from .imaging import GrayImage, LabeledSample, ShadowMask, save_image, save_mask

log = logging.getLogger(__name__)

N_ANATOMY_CLASSES = 13
RAY_STEP = 0.5
OCCLUDER_BACKSCATTER = 1.0
COARSE_JITTER = 0.02  # outward corner jitter, fraction of component diameter


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float  # semi-axis along `angle`
    b: float
    angle: float = 0.0
    attenuation: float = 1.0  # absolute mu inside the ellipse, per pixel length

    def contains(self, x, y):
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.cx, y - self.cy
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 224
    height: int = 224
    apex_offset: Optional[float] = None  # None -> height / 2
    background_attenuation: float = 0.6 / 224
    occluders: tuple = ()
    speckle_strength: float = 0.3
    tau: float = 0.3
    theta: float = 0.01
    anatomy_class: int = 0
    seed: int = 0
    gain: float = 230.0

    @property
    def apex(self):
        off = self.height / 2 if self.apex_offset is None else self.apex_offset
        return self.width / 2.0, -float(off)

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise InvalidSpec("phantom must be at least 8x8")
        if not 0 < self.tau < 1 or not 0 < self.theta < 1:
            raise InvalidSpec("tau and theta must lie in (0, 1)")
        if not 0 <= self.speckle_strength < 1:
            raise InvalidSpec("speckle_strength must lie in [0, 1)")
        if self.background_attenuation < 0:
            raise InvalidSpec("background attenuation must be >= 0")
        if self.apex_offset is not None and self.apex_offset < 0:
            raise InvalidSpec("apex_offset must be >= 0")
        if not 0 <= self.anatomy_class < N_ANATOMY_CLASSES:
            raise InvalidSpec(f"anatomy_class must be in [0, {N_ANATOMY_CLASSES})")
        for e in self.occluders:
            if e.attenuation <= self.background_attenuation:
                raise InvalidSpec("occluder attenuation must exceed background attenuation")
            if e.a <= 0 or e.b <= 0:
                raise InvalidSpec("occluder axes must be positive")
            if not (0 <= e.cx < self.width and 0 <= e.cy < self.height):
                raise InvalidSpec(f"occluder centre ({e.cx}, {e.cy}) outside image")

    def digest(self) -> str:
        return hashlib.sha256(repr(dataclasses.astuple(self)).encode()).hexdigest()[:16]


@functools.lru_cache(maxsize=64)
def _class_texture(anatomy_class: int, height: int, width: int) -> np.ndarray:
    """Deterministic backscatter texture for an anatomy class, in [0.25, 0.55]."""
    rng = np.random.default_rng(1000 + anatomy_class)
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    fx = 1 + anatomy_class % 5
    fy = 1 + anatomy_class // 5
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tex = np.sin(2 * np.pi * fx * x / width + phase[0]) * np.cos(2 * np.pi * fy * y / height + phase[1])
    blobs = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 24)
    blobs /= np.abs(blobs).max() + 1e-12
    b = 0.4 + 0.09 * tex + 0.06 * blobs
    b = np.clip(b, 0.25, 0.55)
    b.setflags(write=False)
    return b


def _occluder_fields(spec: PhantomSpec):
    h, w = spec.height, spec.width
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    x += 0.5
    y += 0.5
    mu = np.full((h, w), float(spec.background_attenuation))
    inside = np.zeros((h, w), dtype=bool)
    for e in spec.occluders:
        m = e.contains(x, y)
        mu[m] = np.maximum(mu[m], e.attenuation)
        inside |= m
    return mu, mu - spec.background_attenuation, inside


def render(spec: PhantomSpec, noise: bool = True):
    """Return (intensity float64 before quantisation, shadow mask)."""
    spec.validate()
    mu, excess, inside = _occluder_fields(spec)
    ax, ay = spec.apex
    total, exc = kernels.ray_integrals(mu, excess, ax, ay, RAY_STEP)
    mask = ~inside & (np.exp(-exc) < spec.tau)
    back = np.where(inside, OCCLUDER_BACKSCATTER, _class_texture(spec.anatomy_class, spec.height, spec.width))
    # occluders are echogenic throughout: their own excess attenuation only
    # darkens what lies beyond them
    depth = np.where(inside, total - exc, total)
    img = spec.gain * np.exp(-depth) * back
    if noise and spec.speckle_strength > 0:
        rng = np.random.default_rng(spec.seed)
        img = img * (1.0 + spec.speckle_strength * rng.uniform(-1.0, 1.0, size=img.shape))
    return np.maximum(img, 0.0), mask


def generate_sample(spec: PhantomSpec, split: str = "train", coarse_jitter: float = COARSE_JITTER) -> LabeledSample:
    img, mask = render(spec)
    img = np.clip(np.rint(img), 0, 255).astype(np.float32)
    label = int(mask.mean() >= spec.theta)
    coarse = None
    if mask.any():
        coarse = emulate_coarse_annotation(mask, seed=spec.seed + 1, jitter=coarse_jitter)
    return LabeledSample(
        image=GrayImage(img),
        label=label,
        mask=ShadowMask(mask),
        coarse_mask=coarse,
        class_id=spec.anatomy_class,
        split=split,
    )


# ---------------------------------------------------------- coarse masks


def _tangent_line(hull_pts, y_mid, side):
    """Supporting line x = x0 + s * (y - y_mid) of a convex polygon at y_mid.

    ``side`` is -1 for the left chain, +1 for the right chain.
    """
    n = len(hull_pts)
    xs = []
    for k in range(n):
        (x1, y1), (x2, y2) = hull_pts[k], hull_pts[(k + 1) % n]
        if min(y1, y2) <= y_mid <= max(y1, y2):
            if y1 == y2:
                xs.extend([x1, x2])
            else:
                xs.append(x1 + (y_mid - y1) * (x2 - x1) / (y2 - y1))
    x0 = min(xs) if side < 0 else max(xs)
    lo, hi = -np.inf, np.inf
    for vx, vy in hull_pts:
        dy = vy - y_mid
        if dy == 0:
            continue
        r = (vx - x0) / dy
        # left: hull must satisfy vx >= x0 + s*dy ; right: vx <= x0 + s*dy
        if (side < 0) == (dy > 0):
            hi = min(hi, r)
        else:
            lo = max(lo, r)
    if not np.isfinite(lo):
        lo = hi if np.isfinite(hi) else 0.0
    if not np.isfinite(hi):
        hi = lo
    return x0, 0.5 * (lo + hi)


def _component_quad(comp: np.ndarray, rng, jitter: float):
    rows = np.nonzero(comp.any(axis=1))[0]
    pts = []
    for r in rows:
        cols = np.nonzero(comp[r])[0]
        for c in (cols[0] - 0.5, cols[-1] + 0.5):
            pts.append((c, r - 0.5))
            pts.append((c, r + 0.5))
    pts = np.unique(np.asarray(pts), axis=0)
    hull = pts[ConvexHull(pts).vertices]
    y_top, y_bot = rows[0] - 0.5, rows[-1] + 0.5
    y_mid = 0.5 * (y_top + y_bot)
    lx, ls = _tangent_line(hull, y_mid, -1)
    rx, rs = _tangent_line(hull, y_mid, +1)
    corners = np.array(
        [
            [lx + ls * (y_top - y_mid), y_top],
            [rx + rs * (y_top - y_mid), y_top],
            [rx + rs * (y_bot - y_mid), y_bot],
            [lx + ls * (y_bot - y_mid), y_bot],
        ]
    )
    cols_any = np.nonzero(comp.any(axis=0))[0]
    diam = math.hypot(rows[-1] - rows[0] + 1, cols_any[-1] - cols_any[0] + 1)
    # outward-only perturbation keeps the quadrilateral covering the hull
    outward = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    jittered = corners + outward * rng.uniform(0.0, jitter * diam, size=(4, 2))
    return corners, jittered


def _fill(corners, shape):
    out = np.zeros(shape, dtype=bool)
    rr, cc = raster_polygon(corners[:, 1], corners[:, 0], shape=shape)
    out[rr, cc] = True
    return out


def _dice(a, b):
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * np.logical_and(a, b).sum() / s


def emulate_coarse_annotation(mask, seed: int = 0, jitter: float = COARSE_JITTER) -> ShadowMask:
    """Replace each connected shadow component by a covering quadrilateral.

    The quadrilateral is a trapezoid with horizontal bases whose slanted sides
    are the supporting lines of the component's convex hull at mid-height.
    Its corners are pushed outward by at most ``jitter`` times the component
    diameter, mimicking a human tracing a coarse outline.
    """
    if not 0 <= jitter <= 0.1:
        raise ValueError("jitter must lie in [0, 0.1]")
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise EmptyMask("cannot annotate an empty mask")
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=int))
    rng = np.random.default_rng(seed)
    out = np.zeros_like(m)
    for k in range(1, n + 1):
        comp = labels == k
        plain, jittered = _component_quad(comp, rng, jitter)
        quad = _fill(jittered, m.shape) | comp
        if _dice(quad, comp) < 0.5:
            quad = _fill(plain, m.shape) | comp
        if _dice(quad, comp) < 0.5:
            quad = comp
        out |= quad
    return ShadowMask(out)


# ---------------------------------------------------------- datasets


@dataclass(frozen=True)
class DatasetRequest:
    n_shadow: int
    n_clear: int
    class_ids: Sequence[int] = tuple(range(N_ANATOMY_CLASSES))
    val_fraction: float = 0.11
    test_fraction: float = 0.01
    size: int = 224
    speckle_strength: float = 0.3
    tau: float = 0.3
    theta: float = 0.01
    seed: int = 0


def sample_spec(rng: np.random.Generator, class_id: int, want_shadow: bool, size: int,
                seed: int, speckle: float = 0.3, tau: float = 0.3, theta: float = 0.01) -> PhantomSpec:
    """Draw a phantom spec from the class-dependent occluder prior."""
    s = float(size)
    mu_bg = 0.6 / s
    n_occ = int(rng.integers(1, 2 + class_id % 3))
    scale = 1.0 + 0.25 * (class_id % 4)
    occ = []
    for _ in range(n_occ):
        a = rng.uniform(0.04, 0.09) * s * scale
        b = rng.uniform(0.5, 0.9) * a
        if want_shadow:
            depth = rng.uniform(2.5, 5.0)
            mu = mu_bg + depth / (2.0 * b)
        else:
            depth = rng.uniform(0.05, 0.25)
            mu = mu_bg + depth / (2.0 * a)
        occ.append(
            Ellipse(
                cx=rng.uniform(0.15, 0.85) * s,
                cy=rng.uniform(0.15, 0.55) * s,
                a=a,
                b=b,
                angle=rng.uniform(0, np.pi),
                attenuation=mu,
            )
        )
    return PhantomSpec(
        width=size,
        height=size,
        apex_offset=rng.uniform(0.4, 0.6) * s,
        background_attenuation=mu_bg,
        occluders=tuple(occ),
        speckle_strength=speckle,
        tau=tau,
        theta=theta,
        anatomy_class=class_id,
        seed=seed,
    )


def split_counts(n_shadow: int, n_clear: int, val_fraction: float, test_fraction: float):
    """Per-split (shadow, clear) counts; totals are rounded on the whole set."""
    n = n_shadow + n_clear
    out = {}
    for name, frac in (("val", val_fraction), ("test", test_fraction)):
        tot = int(round(frac * n))
        sh = min(int(round(frac * n_shadow)), tot)
        out[name] = (sh, tot - sh)
    out["train"] = (
        n_shadow - out["val"][0] - out["test"][0],
        n_clear - out["val"][1] - out["test"][1],
    )
    if min(min(v) for v in out.values()) < 0:
        raise ValueError("split fractions leave a negative training count")
    return out


def _write_sample(root, sample: LabeledSample, sample_id: str, seed: int, spec_hash: str):
    d = os.path.join(root, sample.split, str(sample.class_id))
    os.makedirs(d, exist_ok=True)
    base = os.path.join(d, sample_id)
    save_image(base + ".png", sample.image)
    save_mask(base + ".mask.png", sample.mask)
    if sample.coarse_mask is not None:
        save_mask(base + ".coarse.png", sample.coarse_mask)
    frac = float(np.asarray(sample.mask).mean())
    with open(base + ".meta", "w") as f:
        f.write(f"label={sample.label}\nseed={seed}\nspec_hash={spec_hash}\n")
        f.write(f"class_id={sample.class_id}\nsplit={sample.split}\nshadow_fraction={frac:.6f}\n")


def generate_dataset(root, request: DatasetRequest, max_attempts: int = 200) -> dict:
    """Generate and persist a labelled phantom dataset.

    Layout: ``<root>/<split>/<class_id>/<sample_id>.{png,mask.png,coarse.png,meta}``.
    Returns ``{split: (n_shadow, n_clear)}``.
    """
    if request.n_shadow < 0 or request.n_clear < 0 or request.n_shadow + request.n_clear == 0:
        raise ValueError("sample counts must be non-negative and not both zero")
    counts = split_counts(request.n_shadow, request.n_clear, request.val_fraction, request.test_fraction)
    classes = list(request.class_ids)
    try:
        os.makedirs(root, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc
    index = 0
    for split in ("train", "val", "test"):
        for want, n in ((1, counts[split][0]), (0, counts[split][1])):
            for k in range(n):
                cls = classes[k % len(classes)]
                sample_seed = request.seed ^ index
                rng = np.random.default_rng([sample_seed, 7])
                for _attempt in range(max_attempts):
                    spec = sample_spec(rng, cls, bool(want), request.size, sample_seed,
                                       request.speckle_strength, request.tau, request.theta)
                    sample = generate_sample(spec, split=split)
                    if sample.label == want:
                        break
                else:
                    raise RuntimeError(f"could not draw a label-{want} sample for class {cls}")
                _write_sample(root, sample, f"{index:06d}", sample_seed, spec.digest())
                index += 1
    log.info("generated %d samples under %s", index, root)
    return counts


def read_meta(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                out[k] = v
    return out
