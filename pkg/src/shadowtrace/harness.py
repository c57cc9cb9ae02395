"""Downstream-task harness: anatomy classification with an extra input channel.

A small classifier is trained on phantom anatomy classes three ways, with the
image alone, with the predicted shadow confidence map as a second channel,
and with a binary shadow mask as a second channel.  Every mode shares the
seed, the split and the sample order, so accuracy deltas isolate the channel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import models as M
from . import training as T
from .datasets import SplitData, batches
from .errors import InsufficientData, MissingCheckpoint

log = logging.getLogger(__name__)

CHANNEL_MODES = ("image_only", "image+confidence", "image+binary")
BINARY_THRESHOLD = 0.5


@dataclass(frozen=True)
class HarnessConfig:
    classes: tuple = (1, 2, 3)
    channel_modes: tuple = CHANNEL_MODES
    epochs: int = 10
    seed: int = 0
    widths: tuple = (8, 16, 16, 32, 32, 32)
    batch_size: int = 25
    learning_rate: float = 1e-2
    momentum: float = 0.9
    l2_scale: float = 1e-5

    def __post_init__(self):
        if len(set(self.classes)) < 2:
            raise ValueError("harness needs at least two classes")
        bad = [m for m in self.channel_modes if m not in CHANNEL_MODES]
        if bad:
            raise ValueError(f"unknown channel modes {bad}; choose from {CHANNEL_MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                             l2_scale=self.l2_scale, batch_size=self.batch_size, widths=self.widths,
                             seed=self.seed, flip_augment=False, desk_scale_factor=1.0)


def _targets(class_ids, classes) -> np.ndarray:
    lut = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lut[int(c)] for c in class_ids], dtype=np.int64)
    except KeyError as exc:
        raise InsufficientData(f"sample of class {exc} not in the harness class list") from exc


def train_eval(hcfg: HarnessConfig, train: SplitData, test: SplitData, train_extra=None,
               test_extra=None) -> np.ndarray:
    """Train one classifier and return per-class test accuracy in percent."""
    cfg = hcfg.train_config()
    y = _targets(train.class_ids, hcfg.classes)
    yt = _targets(test.class_ids, hcfg.classes)
    in_ch = 1 if train_extra is None else 2
    h, w = train.images.shape[-2:]
    T._seed_all(hcfg.seed, cfg.threads)
    arch = T.arch_for("classifier", cfg, h, w, in_channels=in_ch, n_classes=len(hcfg.classes))
    model = M.build_model(arch, hcfg.seed)
    opt = T.make_optimizer(model, cfg)
    labels = torch.from_numpy(y)
    ex = None if train_extra is None else [np.asarray(train_extra)]
    for epoch in range(1, hcfg.epochs + 1):
        model.train()
        for idx in batches(len(train), cfg.batch_size, hcfg.seed, epoch):
            x = T.prepare_images(train.images[idx], cfg, extra=None if ex is None else [ex[0][idx]])
            loss = T.loss_classifier(model(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    tex = None if test_extra is None else [np.asarray(test_extra)]
    logits = T._batched_forward(model, test.images, cfg, M.classifier_forward, extra=tex)
    pred = logits.argmax(1).numpy()
    acc = np.zeros(len(hcfg.classes))
    for k in range(len(hcfg.classes)):
        sel = yt == k
        acc[k] = 100.0 * float((pred[sel] == k).mean()) if sel.any() else float("nan")
    return acc


def extra_channels(mode: str, images, conf: Optional[T.Checkpoint], seg: Optional[T.Checkpoint] = None):
    """Second input channel for ``mode``; None for the image-only mode."""
    if mode == "image_only":
        return None
    if conf is None:
        raise MissingCheckpoint(f"channel mode {mode} needs a confidence checkpoint")
    cfg = T.config_from_snapshot(conf.config)
    if mode == "image+confidence":
        return T.predict_confidence(conf.model, images, cfg)
    if seg is not None:
        return T.predict_masks(seg.model, images, T.config_from_snapshot(seg.config)).astype(np.float64)
    return (T.predict_confidence(conf.model, images, cfg) > BINARY_THRESHOLD).astype(np.float64)


def run_harness(hcfg: HarnessConfig, train: SplitData, test: SplitData, conf: Optional[T.Checkpoint] = None,
                seg: Optional[T.Checkpoint] = None) -> dict:
    """Per-class accuracy (percent) for every channel mode: {mode: array}."""
    if conf is None and any(m != "image_only" for m in hcfg.channel_modes):
        raise MissingCheckpoint("confidence checkpoint required for the extra-channel modes")
    out = {}
    for mode in hcfg.channel_modes:
        tr = extra_channels(mode, train.images, conf, seg)
        te = extra_channels(mode, test.images, conf, seg)
        out[mode] = train_eval(hcfg, train, test, tr, te)
        log.info("harness %s: avg %.2f", mode, float(np.nanmean(out[mode])))
    return out


def format_table(hcfg: HarnessConfig, results: dict) -> str:
    """TSV with one row per class and a final average row."""
    modes = [m for m in hcfg.channel_modes if m in results]
    lines = ["class\t" + "\t".join(modes)]
    for k, c in enumerate(hcfg.classes):
        lines.append(f"{c}\t" + "\t".join(f"{results[m][k]:.2f}" for m in modes))
    lines.append("Avg\t" + "\t".join(f"{float(np.nanmean(results[m])):.2f}" for m in modes))
    return "\n".join(lines) + "\n"
