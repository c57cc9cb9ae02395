"""Three-stage training: classifier, segmentation (optionally encoder-initialised
from the classifier), then the confidence network on fixed reference maps.

Images are whitened per image and zero-padded to a multiple of the network
stride; outputs and losses are evaluated on the cropped original extent.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import models as M
from .datasets import SplitData, batches
from .errors import (ArchitectureMismatch, DegenerateRange, DivergedLoss, EmptyManualMask, FormatError,
                     InsufficientData, MissingCheckpoint, StageOrderError)
from .imaging import ConfidenceMap, ShadowMask, save_confidence, save_mask, whiten
from .metrics import confusion_scores
from .transfer import build_reference_map

log = logging.getLogger(__name__)

CONF_LOSSES = ("mse", "sigmoid_ce")
STAGE_DIRS = {"classifier": "stage1", "segmentation": "stage2", "confidence": "stage3"}
ARCH_FILE = "architecture.txt"
PARAMS_FILE = "params.bin"
SNAPSHOT_FILE = "config.snapshot"
HISTORY_FILE = "history.tsv"


@dataclass(frozen=True)
class TrainConfig:
    momentum: float = 0.9
    learning_rate: float = 1e-3
    l2_scale: float = 1e-5
    batch_size: int = 25
    epochs_classifier: int = 70
    epochs_segmentation: int = 700
    epochs_confidence: int = 700
    desk_scale_factor: float = 0.1
    confidence_loss: str = "mse"
    attention: bool = False
    widths: tuple = M.DEFAULT_WIDTHS
    whiten_divisor: str = "std"
    pad_multiple: int = 64
    flip_augment: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.l2_scale < 0:
            raise ValueError("need learning_rate > 0, batch_size >= 1, l2_scale >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if min(self.epochs_classifier, self.epochs_segmentation, self.epochs_confidence) < 1:
            raise ValueError("epoch counts must be positive")
        if not 0 < self.desk_scale_factor <= 1:
            raise ValueError("desk_scale_factor must lie in (0, 1]")
        if self.confidence_loss not in CONF_LOSSES:
            raise ValueError(f"confidence_loss must be one of {CONF_LOSSES}")
        if self.pad_multiple % 32:
            raise ValueError("pad_multiple must be a multiple of the network stride (32)")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def epochs(self, stage: str) -> int:
        full = getattr(self, f"epochs_{stage}")
        return max(1, int(round(full * self.desk_scale_factor)))

    def snapshot(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = " ".join(map(str, v))
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def arch_for(stage: str, cfg: TrainConfig, height: int, width: int, in_channels: int = 1,
             n_classes: int = 2) -> M.ArchSpec:
    ph = height + (-height) % cfg.pad_multiple
    pw = width + (-width) % cfg.pad_multiple
    return M.ArchSpec(kind=stage, widths=cfg.widths, in_channels=in_channels, n_classes=n_classes,
                      attention=cfg.attention,
                      conf_activation="sigmoid" if cfg.confidence_loss == "sigmoid_ce" else "clamp",
                      input_height=ph, input_width=pw)


# ------------------------------------------------------------------ inputs


def prepare_images(images, cfg: TrainConfig, flips=None, extra=None) -> torch.Tensor:
    """Whiten, optionally mirror, stack extra raw channels, pad.  Returns float32 (B, C, H', W')."""
    chans = []
    for i, img in enumerate(images):
        x = whiten(img, cfg.whiten_divisor)
        planes = [x] + ([] if extra is None else [np.asarray(e[i], dtype=np.float64) for e in extra])
        if flips is not None and flips[i]:
            planes = [p[:, ::-1] for p in planes]
        chans.append(np.stack(planes))
    t = torch.from_numpy(np.ascontiguousarray(np.stack(chans), dtype=np.float32))
    return M.pad_to_multiple(t, cfg.pad_multiple)


def _flip_targets(targets, flips):
    out = np.array(targets, copy=True)
    for i, f in enumerate(flips):
        if f:
            out[i] = out[i][..., ::-1]
    return out


def epoch_flips(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    """Per-sample mirror decisions for one epoch."""
    if not cfg.flip_augment:
        return np.zeros(n, dtype=bool)
    return np.random.default_rng([cfg.seed, epoch, 1]).random(n) < 0.5


# ------------------------------------------------------------------ losses


def loss_classifier(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def loss_segmentation(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    h, w = masks.shape[-2:]
    return F.cross_entropy(logits[..., :h, :w], masks.long())


def loss_confidence(raw: torch.Tensor, target: torch.Tensor, variant: str = "mse") -> torch.Tensor:
    """Per-pixel loss on the un-activated head output."""
    h, w = target.shape[-2:]
    raw = raw[..., :h, :w]
    if variant == "sigmoid_ce":
        return F.binary_cross_entropy_with_logits(raw, target)
    return F.mse_loss(raw, target)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum; the L2 penalty covers every weight tensor, not biases or BN shifts."""
    decay = [p for p in model.parameters() if p.ndim > 1]
    rest = [p for p in model.parameters() if p.ndim <= 1]
    return torch.optim.SGD([
        {"params": decay, "weight_decay": cfg.l2_scale},
        {"params": rest, "weight_decay": 0.0},
    ], lr=cfg.learning_rate, momentum=cfg.momentum)


# ------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    directory: str
    model: torch.nn.Module
    history: list  # rows (stage, epoch, loss, val_metric, wall_seconds)
    config: dict

    @property
    def arch(self) -> M.ArchSpec:
        return self.model.arch


def save_checkpoint(directory, model, cfg_text: str, history=()) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, ARCH_FILE), "w") as f:
        f.write(M.describe(model))
    with open(os.path.join(directory, PARAMS_FILE), "wb") as f:
        f.write(M.state_to_blob(model.state_dict()))
    with open(os.path.join(directory, SNAPSHOT_FILE), "w") as f:
        f.write(cfg_text)
    with open(os.path.join(directory, HISTORY_FILE), "w") as f:
        f.write("stage\tepoch\tloss\tval_metric\twall_seconds\n")
        for row in history:
            f.write(format_log_row(row))


def format_log_row(row) -> str:
    stage, epoch, loss, val, wall = row
    return f"{stage}\t{epoch}\t{loss:.9g}\t{val:.9g}\t{wall:.3f}\n"


def parse_snapshot(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def read_snapshot(path) -> dict:
    with open(path) as f:
        return parse_snapshot(f.read())


def is_checkpoint(directory) -> bool:
    return all(os.path.isfile(os.path.join(directory, n)) for n in (ARCH_FILE, PARAMS_FILE))


def load_checkpoint(directory, kind: Optional[str] = None) -> Checkpoint:
    if not directory or not is_checkpoint(directory):
        raise MissingCheckpoint(f"no checkpoint at {directory}")
    with open(os.path.join(directory, ARCH_FILE)) as f:
        arch = M.parse_descriptor(f.read())
    if kind is not None and arch.kind != kind:
        raise ArchitectureMismatch(f"checkpoint holds a {arch.kind} model, expected {kind}")
    model = M.build_model(arch, 0)
    with open(os.path.join(directory, PARAMS_FILE), "rb") as f:
        M.load_state(model, M.blob_to_state(f.read()))
    model.eval()
    snap = os.path.join(directory, SNAPSHOT_FILE)
    cfg = read_snapshot(snap) if os.path.exists(snap) else {}
    history = []
    hist = os.path.join(directory, HISTORY_FILE)
    if os.path.exists(hist):
        with open(hist) as f:
            next(f, None)
            for line in f:
                s, e, l, v, w = line.rstrip("\n").split("\t")
                history.append((s, int(e), float(l), float(v), float(w)))
    return Checkpoint(directory, model, history, cfg)


def config_from_snapshot(snap: dict) -> TrainConfig:
    """Rebuild the preprocessing-relevant part of a TrainConfig."""
    kw = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for k, v in snap.items():
        if k not in fields:
            continue
        default = fields[k].default
        if isinstance(default, bool):
            kw[k] = v in ("True", "true", "1")
        elif isinstance(default, int):
            kw[k] = int(v)
        elif isinstance(default, float):
            kw[k] = float(v)
        elif isinstance(default, tuple):
            kw[k] = tuple(int(x) for x in v.split())
        else:
            kw[k] = v
    return TrainConfig(**kw)


# ---------------------------------------------------------------- fitting


def _seed_all(seed: int, threads: int):
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, threads))


def _finite_state(model) -> bool:
    return all(torch.isfinite(v).all() for v in model.state_dict().values() if v.is_floating_point())


def _fit(model, stage, cfg: TrainConfig, n_train, step_loss, validate, out_dir, lower_is_better=False,
         log_path=None):
    """Generic epoch loop with best-validation checkpoint selection."""
    epochs = cfg.epochs(stage)
    opt = make_optimizer(model, cfg)
    history = []
    best_val, best_state = None, copy.deepcopy(model.state_dict())
    t0 = time.perf_counter()
    good_state = copy.deepcopy(model.state_dict())

    def diverged(epoch):
        model.load_state_dict(good_state)
        save_checkpoint(out_dir, model, cfg.snapshot(), history)
        return DivergedLoss(f"{stage}: non-finite loss at epoch {epoch}", checkpoint_dir=out_dir)

    for epoch in range(1, epochs + 1):
        if not _finite_state(model):
            raise diverged(epoch)
        good_state = copy.deepcopy(model.state_dict())
        model.train()
        total, count = 0.0, 0
        flips = epoch_flips(cfg, epoch, n_train)
        for idx in batches(n_train, cfg.batch_size, cfg.seed, epoch):
            loss = step_loss(idx, flips[idx])
            if not torch.isfinite(loss):
                raise diverged(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        model.eval()
        val = float(validate(model))
        row = (stage, epoch, total / count, val, time.perf_counter() - t0)
        history.append(row)
        log.info("%s epoch %d loss %.6g val %.6g", stage, epoch, row[2], val)
        if log_path:
            with open(log_path, "a") as f:
                f.write(format_log_row(row))
        better = best_val is None or (val < best_val if lower_is_better else val > best_val)
        if better:
            best_val, best_state = val, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    save_checkpoint(out_dir, model, cfg.snapshot(), history)
    return Checkpoint(out_dir, model, history, read_snapshot(os.path.join(out_dir, SNAPSHOT_FILE)))


@torch.no_grad()
def _batched_forward(model, images, cfg: TrainConfig, fn, extra=None, batch_size=None):
    outs = []
    bs = batch_size or cfg.batch_size
    h, w = images.shape[-2:]
    for i in range(0, len(images), bs):
        ex = None if extra is None else [e[i:i + bs] for e in extra]
        x = prepare_images(images[i:i + bs], cfg, extra=ex)
        out = fn(model, x)
        outs.append(out[..., :h, :w] if out.ndim > 2 else out)
    return torch.cat(outs)


def _need_both_labels(labels):
    if len(np.unique(labels)) < 2:
        raise InsufficientData("classifier split needs both labels present")


def train_classifier(cfg: TrainConfig, train: SplitData, val: Optional[SplitData], out_dir,
                     log_path=None) -> Checkpoint:
    _need_both_labels(train.labels)
    _seed_all(cfg.seed, cfg.threads)
    h, w = train.images.shape[-2:]
    model = M.build_model(arch_for("classifier", cfg, h, w), cfg.seed)
    labels = torch.from_numpy(train.labels.astype(np.int64))
    val = val if val is not None and len(val) else train

    def step(idx, flips):
        x = prepare_images(train.images[idx], cfg, flips)
        return loss_classifier(M.classifier_forward(model, x), labels[idx])

    def validate(m):
        logits = _batched_forward(m, val.images, cfg, M.classifier_forward)
        return float((logits.argmax(1).numpy() == val.labels).mean())

    return _fit(model, "classifier", cfg, len(train), step, validate, out_dir, log_path=log_path)


def mean_dice(pred_masks, truth_masks) -> float:
    return float(np.mean([confusion_scores(p, g).dice for p, g in zip(pred_masks, truth_masks)]))


def predict_masks(model, images, cfg: TrainConfig) -> np.ndarray:
    logits = _batched_forward(model, images, cfg, M.seg_forward)
    return M.logits_to_mask(logits).numpy()


def predict_confidence(model, images, cfg: TrainConfig, extra=None) -> np.ndarray:
    out = _batched_forward(model, images, cfg, M.conf_forward, extra=extra)
    return out.numpy().astype(np.float64)


def train_segmentation(cfg: TrainConfig, train: SplitData, val: Optional[SplitData], out_dir,
                       init: Optional[Checkpoint] = None, log_path=None) -> Checkpoint:
    if train.masks is None:
        raise InsufficientData("segmentation split needs pixel masks")
    _seed_all(cfg.seed, cfg.threads)
    h, w = train.images.shape[-2:]
    model = M.build_model(arch_for("segmentation", cfg, h, w), cfg.seed)
    if init is not None:
        if init.arch.kind != "classifier":
            raise ArchitectureMismatch("encoder initialisation needs a classifier checkpoint")
        M.transfer_encoder_weights(init.model, model)
    masks = train.masks
    val = val if val is not None and len(val) else train
    pred_dir = os.path.join(out_dir, "val_pred")
    best = {"dice": None, "pred": None}

    def step(idx, flips):
        x = prepare_images(train.images[idx], cfg, flips)
        y = torch.from_numpy(_flip_targets(masks[idx], flips))
        return loss_segmentation(M.seg_forward(model, x), y)

    def validate(m):
        pred = predict_masks(m, val.images, cfg)
        d = mean_dice(pred, val.masks)
        if best["dice"] is None or d > best["dice"]:
            best["dice"], best["pred"] = d, pred
        return d

    ck = _fit(model, "segmentation", cfg, len(train), step, validate, out_dir, log_path=log_path)
    os.makedirs(pred_dir, exist_ok=True)
    for i, p in enumerate(best["pred"]):
        save_mask(os.path.join(pred_dir, f"{i:06d}.mask.png"), p)
    return ck


def build_reference_dataset(seg: Checkpoint, data: SplitData, out_dir, cfg: Optional[TrainConfig] = None):
    """Reference confidence maps from the frozen segmentation predictions.

    Returns (indices of kept samples, maps (N_kept, H, W) float64).  Samples
    with an empty weak mask are logged and skipped.  Maps are written as
    16-bit PNGs plus an ``index.tsv`` manifest.
    """
    if seg.arch.kind != "segmentation":
        raise ArchitectureMismatch("reference maps need a segmentation checkpoint")
    if data.masks is None:
        raise InsufficientData("reference maps need weak pixel masks")
    cfg = cfg or config_from_snapshot(seg.config)
    pred = predict_masks(seg.model, data.images, cfg)
    os.makedirs(out_dir, exist_ok=True)
    kept, maps = [], []
    with open(os.path.join(out_dir, "index.tsv"), "w") as f:
        f.write("index\tsample\tmap\n")
        for i in range(len(data)):
            try:
                ref = build_reference_map(data.masks[i], pred[i], data.images[i])
            except (EmptyManualMask, DegenerateRange) as exc:
                log.warning("skipping %s: %s", data.paths[i], exc)
                continue
            name = f"{i:06d}.conf.png"
            save_confidence(os.path.join(out_dir, name), ref)
            f.write(f"{i}\t{data.paths[i]}\t{name}\n")
            kept.append(i)
            maps.append(np.asarray(ref))
    if not kept:
        raise InsufficientData("no reference maps could be built")
    return np.array(kept, dtype=np.int64), np.stack(maps)


def train_confidence(cfg: TrainConfig, train_images, train_maps, val_images, val_maps, out_dir,
                     seg: Optional[Checkpoint] = None, require_seg: bool = True, log_path=None) -> Checkpoint:
    """Fit the confidence network to fixed reference maps (values in [0, 1])."""
    if require_seg and seg is None:
        raise StageOrderError("confidence training needs a segmentation checkpoint")
    _seed_all(cfg.seed, cfg.threads)
    h, w = train_images.shape[-2:]
    model = M.build_model(arch_for("confidence", cfg, h, w), cfg.seed)
    targets = np.asarray(train_maps, dtype=np.float32)
    if val_images is None or not len(val_images):
        val_images, val_maps = train_images, train_maps

    def step(idx, flips):
        x = prepare_images(train_images[idx], cfg, flips)
        y = torch.from_numpy(np.ascontiguousarray(_flip_targets(targets[idx], flips)))
        return loss_confidence(M.conf_raw(model, x), y, cfg.confidence_loss)

    def validate(m):
        pred = predict_confidence(m, val_images, cfg)
        return float(np.mean((pred - val_maps) ** 2))

    return _fit(model, "confidence", cfg, len(train_images), step, validate, out_dir,
                lower_is_better=True, log_path=log_path)


# -------------------------------------------------------------- inference


@dataclass
class Prediction:
    mask: Optional[ShadowMask] = None
    confmap: Optional[ConfidenceMap] = None
    seconds: float = 0.0


def predict(ck: Checkpoint, img, kind: Optional[str] = None) -> Prediction:
    """One forward pass of a frozen checkpoint; wall-clock time is logged."""
    if kind is not None and ck.arch.kind != kind:
        raise ArchitectureMismatch(f"checkpoint holds a {ck.arch.kind} model, requested {kind}")
    if ck.arch.kind == "classifier":
        raise ArchitectureMismatch("predict needs a segmentation or confidence checkpoint")
    cfg = config_from_snapshot(ck.config)
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    ck.model.eval()
    t0 = time.perf_counter()
    with torch.no_grad():
        x = prepare_images(img[None], cfg)
        if ck.arch.kind == "segmentation":
            out = M.logits_to_mask(M.seg_forward(ck.model, x))[0, :h, :w].numpy()
        else:
            out = M.conf_forward(ck.model, x)[0, :h, :w].numpy().astype(np.float64)
    dt = time.perf_counter() - t0
    log.info("inference %.4f s for %dx%d", dt, w, h)
    if ck.arch.kind == "segmentation":
        return Prediction(mask=ShadowMask(out), seconds=dt)
    return Prediction(confmap=ConfidenceMap(out), seconds=dt)
