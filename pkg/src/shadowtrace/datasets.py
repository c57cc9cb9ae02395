"""Split registries and batching.

A registry draws the classifier (multi-class) and segmentation
(single-class) subsets out of two generated phantom datasets.  Generation
``train`` samples feed the training subsets; everything else is held out and
feeds validation / test, mirroring how the held-out multi-class shadow
images are further carved into a test subset.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import FormatError, InsufficientData
from .imaging import load_image, load_mask
from .phantom import read_meta

SPLITS = ("mc_train", "mc_val", "mc_test", "sc_train", "sc_val", "sc_test")
ANNOTATION_VARIANTS = ("mask", "coarse")


@dataclass(frozen=True)
class SplitPlan:
    mc_train_shadow: int = 1000
    mc_train_clear: int = 1000
    mc_val_shadow: int = 100
    mc_val_clear: int = 100
    mc_test: int = 48
    sc_train: int = 500
    sc_val: int = 50
    sc_test: int = 93
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass(frozen=True)
class Entry:
    split: str
    class_id: int
    path: str  # sample base path, without suffix
    label: int
    weak: Optional[str] = None  # annotation variant used as ground truth
    anno: Optional[str] = None  # the other variant, kept for inter-observer scores


@dataclass
class SplitRegistry:
    entries: list = field(default_factory=list)
    seed: int = 0

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict:
        return {s: len(self.split(s)) for s in SPLITS}

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "splits.tsv"), "w") as f:
            for e in self.entries:
                f.write(f"{e.split}\t{e.class_id}\t{e.path}\n")
        with open(os.path.join(directory, "annotations.tsv"), "w") as f:
            f.write(f"# seed={self.seed}\n")
            for e in self.entries:
                f.write(f"{e.path}\t{e.label}\t{e.weak or '-'}\t{e.anno or '-'}\n")

    @classmethod
    def load(cls, directory) -> "SplitRegistry":
        ann = {}
        seed = 0
        with open(os.path.join(directory, "annotations.tsv")) as f:
            for line in f:
                if line.startswith("# seed="):
                    seed = int(line.strip().split("=", 1)[1])
                    continue
                path, label, weak, anno = line.rstrip("\n").split("\t")
                ann[path] = (int(label), None if weak == "-" else weak, None if anno == "-" else anno)
        entries = []
        with open(os.path.join(directory, "splits.tsv")) as f:
            for n, line in enumerate(f, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or parts[0] not in SPLITS:
                    raise FormatError(f"splits.tsv line {n}: malformed")
                label, weak, anno = ann[parts[2]]
                entries.append(Entry(parts[0], int(parts[1]), parts[2], label, weak, anno))
        return cls(entries, seed)


def scan_dataset(root) -> list:
    """All samples of a generated dataset as (gen_split, class_id, base, label, has_coarse)."""
    out = []
    for meta in sorted(glob.glob(os.path.join(root, "*", "*", "*.meta"))):
        base = meta[: -len(".meta")]
        m = read_meta(meta)
        gen_split = os.path.basename(os.path.dirname(os.path.dirname(meta)))
        cls = int(os.path.basename(os.path.dirname(meta)))
        out.append((gen_split, cls, base, int(m["label"]), os.path.exists(base + ".coarse.png")))
    return out


def _take(pool, n, rng, what):
    if n > len(pool):
        raise InsufficientData(f"{what}: need {n}, only {len(pool)} available")
    order = rng.permutation(len(pool))
    return [pool[i] for i in order[:n]], [pool[i] for i in order[n:]]


def make_splits(mc_root, sc_root, plan: SplitPlan) -> SplitRegistry:
    rng = np.random.default_rng(plan.seed)
    mc = scan_dataset(mc_root) if mc_root else []
    sc = scan_dataset(sc_root) if sc_root else []
    total = len(mc) + len(sc)
    need = (plan.mc_train_shadow + plan.mc_train_clear + plan.mc_val_shadow + plan.mc_val_clear
            + plan.mc_test + plan.sc_train + plan.sc_val + plan.sc_test)
    if need > total:
        raise InsufficientData(f"plan needs {need} samples, datasets hold {total}")

    picked = []
    tr = [s for s in mc if s[0] == "train"]
    ho = [s for s in mc if s[0] != "train"]
    sel, _ = _take([s for s in tr if s[3] == 1], plan.mc_train_shadow, rng, "mc train shadow")
    picked += [("mc_train", s) for s in sel]
    sel, _ = _take([s for s in tr if s[3] == 0], plan.mc_train_clear, rng, "mc train clear")
    picked += [("mc_train", s) for s in sel]
    # test images need pixel annotations of a visible shadow and exclude the single-class anatomy
    test_pool = [s for s in ho if s[3] == 1 and s[4] and s[1] != 0]
    test, _ = _take(test_pool, plan.mc_test, rng, "mc test")
    picked += [("mc_test", s) for s in test]
    used = {s[2] for s in test}
    rest = [s for s in ho if s[2] not in used]
    sel, _ = _take([s for s in rest if s[3] == 1], plan.mc_val_shadow, rng, "mc val shadow")
    picked += [("mc_val", s) for s in sel]
    sel, _ = _take([s for s in rest if s[3] == 0], plan.mc_val_clear, rng, "mc val clear")
    picked += [("mc_val", s) for s in sel]

    sc_ok = [s for s in sc if s[3] == 1 and s[4]]
    sel, _ = _take([s for s in sc_ok if s[0] == "train"], plan.sc_train, rng, "sc train")
    picked += [("sc_train", s) for s in sel]
    ho = [s for s in sc_ok if s[0] != "train"]
    val, rest = _take(ho, plan.sc_val, rng, "sc val")
    picked += [("sc_val", s) for s in val]
    sel, _ = _take(rest, plan.sc_test, rng, "sc test")
    picked += [("sc_test", s) for s in sel]

    entries = []
    for split, (_, cls, base, label, has_coarse) in picked:
        weak = anno = None
        if has_coarse:
            k = int(rng.integers(2))
            weak, anno = ANNOTATION_VARIANTS[k], ANNOTATION_VARIANTS[1 - k]
        entries.append(Entry(split, cls, base, label, weak, anno))
    return SplitRegistry(entries, plan.seed)


@dataclass
class SplitData:
    """A split loaded into memory."""

    images: np.ndarray  # (N, H, W) float32 raw intensities
    labels: np.ndarray
    class_ids: np.ndarray
    paths: list
    masks: Optional[np.ndarray] = None  # weak ground truth, (N, H, W) bool
    anno: Optional[np.ndarray] = None  # second annotation

    def __len__(self):
        return len(self.paths)

    def subset(self, idx) -> "SplitData":
        idx = np.asarray(idx)
        return SplitData(
            self.images[idx], self.labels[idx], self.class_ids[idx], [self.paths[i] for i in idx],
            None if self.masks is None else self.masks[idx],
            None if self.anno is None else self.anno[idx],
        )


def load_entries(entries) -> SplitData:
    if not entries:
        raise InsufficientData("empty split")
    imgs, masks, anno = [], [], []
    for e in entries:
        img = load_image(e.path + ".png")
        imgs.append(np.asarray(img))
        if e.weak is not None:
            masks.append(np.asarray(load_mask(f"{e.path}.{e.weak}.png", like=img)))
            anno.append(np.asarray(load_mask(f"{e.path}.{e.anno}.png", like=img)))
    has = len(masks) == len(entries)
    return SplitData(
        images=np.stack(imgs).astype(np.float32),
        labels=np.array([e.label for e in entries], dtype=np.int64),
        class_ids=np.array([e.class_id for e in entries], dtype=np.int64),
        paths=[e.path for e in entries],
        masks=np.stack(masks) if has else None,
        anno=np.stack(anno) if has else None,
    )


def batches(n: int, batch_size: int, shuffle_seed: int, epoch: int = 0, shuffle: bool = True) -> list:
    """Index batches covering ``range(n)`` exactly once; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
