"""Run-directory orchestration shared by the command line and the phantom study.

Each step checks its inputs (stage ordering, existing outputs) before doing
any work.  Outputs are created exclusively unless ``overwrite`` is set.
"""

from __future__ import annotations

import logging
import os
import shutil
from dataclasses import dataclass

import numpy as np

from . import training as T
from .config import RunConfig
from .datasets import Entry, SplitData, SplitPlan, SplitRegistry, load_entries, make_splits, scan_dataset
from .errors import InsufficientData, MissingCheckpoint, OutputExists, StageOrderError
from .harness import HarnessConfig, format_table, run_harness
from .imaging import load_confidence
from .metrics import confusion_scores, human_variability, icc, soft_dice
from .phantom import DatasetRequest, generate_dataset
from .rwbaseline import RWParams, rw_shadow
from .transfer import build_reference_map

log = logging.getLogger(__name__)

LOG_HEADER = "stage\tepoch\tloss\tval_metric\twall_seconds\n"


@dataclass(frozen=True)
class RunLayout:
    root: str

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def stage1(self):
        return self.path("stage1")

    @property
    def stage2(self):
        return self.path("stage2")

    @property
    def stage3(self):
        return self.path("stage3")

    @property
    def refconf(self):
        return self.path("refconf")

    @property
    def refconf_val(self):
        return self.path("refconf", "val")

    @property
    def logs(self):
        return self.path("logs.tsv")

    def ensure(self, cfg: RunConfig):
        os.makedirs(self.root, exist_ok=True)
        with open(self.path("config.snapshot"), "w") as f:
            f.write(cfg.echo())
        if not os.path.exists(self.logs):
            with open(self.logs, "w") as f:
                f.write(LOG_HEADER)


def claim(path, overwrite: bool = False) -> str:
    """Create ``path`` exclusively; with ``overwrite`` an existing one is replaced."""
    if os.path.exists(path):
        if not overwrite:
            raise OutputExists(f"{path} already exists (pass --overwrite to replace it)")
        shutil.rmtree(path) if os.path.isdir(path) else os.remove(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    os.mkdir(path)
    return path


def write_report(path, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


# ------------------------------------------------------------ config views


def train_config(cfg: RunConfig) -> T.TrainConfig:
    t = dict(cfg["train"])
    t.pop("init_from_classifier")
    return T.TrainConfig(**t)


def split_plan(cfg: RunConfig) -> SplitPlan:
    return SplitPlan(**cfg["splits"])


def rw_params(cfg: RunConfig) -> RWParams:
    return RWParams(**cfg["rw"])


def harness_config(cfg: RunConfig) -> HarnessConfig:
    h = cfg["harness"]
    return HarnessConfig(classes=h["classes"], channel_modes=h["modes"], epochs=h["epochs"], seed=h["seed"],
                         learning_rate=h["learning_rate"])


def phantom_requests(cfg: RunConfig):
    p = cfg["phantom"]
    common = dict(size=p["size"], speckle_strength=p["speckle"], tau=p["tau"], theta=p["theta"])
    mc = DatasetRequest(n_shadow=p["mc_shadow"], n_clear=p["mc_clear"], class_ids=tuple(range(1, 13)),
                        val_fraction=p["mc_val_fraction"], test_fraction=p["mc_test_fraction"],
                        seed=p["seed"], **common)
    sc = DatasetRequest(n_shadow=p["sc_shadow"], n_clear=0, class_ids=(0,), val_fraction=p["sc_val_fraction"],
                        test_fraction=0.0, seed=p["seed"] + 1, **common)
    return mc, sc


# ---------------------------------------------------------------- steps


def step_phantom(cfg: RunConfig, overwrite=False):
    mc, sc = phantom_requests(cfg)
    paths = cfg["paths"]
    claim(paths["mc_root"], overwrite)
    claim(paths["sc_root"], overwrite)
    return generate_dataset(paths["mc_root"], mc), generate_dataset(paths["sc_root"], sc)


def step_splits(cfg: RunConfig, overwrite=False) -> SplitRegistry:
    paths = cfg["paths"]
    for r in (paths["mc_root"], paths["sc_root"]):
        if not os.path.isdir(r):
            raise StageOrderError(f"dataset {r} missing; run the phantom step first")
    reg = make_splits(paths["mc_root"], paths["sc_root"], split_plan(cfg))
    claim(paths["registry"], overwrite)
    reg.save(paths["registry"])
    return reg


def load_registry(cfg: RunConfig) -> SplitRegistry:
    d = cfg["paths"]["registry"]
    if not os.path.exists(os.path.join(d, "splits.tsv")):
        raise StageOrderError(f"no split registry at {d}; run the splits step first")
    return SplitRegistry.load(d)


def load_split(cfg: RunConfig, name: str) -> SplitData:
    return load_entries(load_registry(cfg).split(name))


def step_train_classifier(cfg: RunConfig, overwrite=False) -> T.Checkpoint:
    lay = RunLayout(cfg["paths"]["run_dir"])
    reg = load_registry(cfg)
    lay.ensure(cfg)
    out = claim(lay.stage1, overwrite)
    return T.train_classifier(train_config(cfg), load_entries(reg.split("mc_train")),
                              load_entries(reg.split("mc_val")), out, log_path=lay.logs)


def step_train_segmentation(cfg: RunConfig, overwrite=False) -> T.Checkpoint:
    lay = RunLayout(cfg["paths"]["run_dir"])
    init = None
    if cfg["train"]["init_from_classifier"]:
        if not T.is_checkpoint(lay.stage1):
            raise StageOrderError("segmentation with encoder init needs the stage-1 classifier checkpoint")
        init = T.load_checkpoint(lay.stage1, "classifier")
    reg = load_registry(cfg)
    lay.ensure(cfg)
    out = claim(lay.stage2, overwrite)
    return T.train_segmentation(train_config(cfg), load_entries(reg.split("sc_train")),
                                load_entries(reg.split("sc_val")), out, init=init, log_path=lay.logs)


def _require_seg(lay: RunLayout) -> T.Checkpoint:
    if not T.is_checkpoint(lay.stage2):
        raise StageOrderError("this step needs the stage-2 segmentation checkpoint")
    return T.load_checkpoint(lay.stage2, "segmentation")


def step_build_reference(cfg: RunConfig, overwrite=False):
    lay = RunLayout(cfg["paths"]["run_dir"])
    seg = _require_seg(lay)
    reg = load_registry(cfg)
    lay.ensure(cfg)
    claim(lay.refconf, overwrite)
    kept = T.build_reference_dataset(seg, load_entries(reg.split("sc_train")), lay.refconf)
    T.build_reference_dataset(seg, load_entries(reg.split("sc_val")), lay.refconf_val)
    return kept


def read_reference(directory, data: SplitData):
    """(images, maps) of the samples listed in a reference index."""
    idx, maps = [], []
    with open(os.path.join(directory, "index.tsv")) as f:
        next(f)
        for line in f:
            i, _, name = line.rstrip("\n").split("\t")
            idx.append(int(i))
            maps.append(np.asarray(load_confidence(os.path.join(directory, name))))
    return data.images[np.array(idx)], np.stack(maps)


def step_train_confidence(cfg: RunConfig, overwrite=False) -> T.Checkpoint:
    lay = RunLayout(cfg["paths"]["run_dir"])
    seg = _require_seg(lay)
    if not os.path.exists(os.path.join(lay.refconf, "index.tsv")):
        raise StageOrderError("confidence training needs reference maps; run build-ref first")
    reg = load_registry(cfg)
    ti, tm = read_reference(lay.refconf, load_entries(reg.split("sc_train")))
    vi, vm = read_reference(lay.refconf_val, load_entries(reg.split("sc_val")))
    lay.ensure(cfg)
    out = claim(lay.stage3, overwrite)
    return T.train_confidence(train_config(cfg), ti, tm, vi, vm, out, seg=seg, log_path=lay.logs)


# --------------------------------------------------------------- reports

SCORE_COLUMNS = ("dice", "recall", "precision", "mse")


def score_rows(label_set, method, preds, truths) -> str:
    s = np.array([[getattr(confusion_scores(p, g), c) for c in SCORE_COLUMNS] for p, g in zip(preds, truths)])
    cells = []
    for j in range(len(SCORE_COLUMNS)):
        cells += [f"{s[:, j].mean():.6f}", f"{s[:, j].std():.6f}"]
    return f"{label_set}\t{method}\t{len(s)}\t" + "\t".join(cells) + "\n"


def score_header() -> str:
    cols = []
    for c in SCORE_COLUMNS:
        cols += [c, f"{c}_sd"]
    return "set\tmethod\tn\t" + "\t".join(cols) + "\n"


def evaluate_run(cfg: RunConfig):
    """Binary scores on the test sets plus confidence agreement with reference maps.

    Returns (binary_tsv, confidence_tsv).
    """
    lay = RunLayout(cfg["paths"]["run_dir"])
    seg = _require_seg(lay)
    reg = load_registry(cfg)
    tcfg = T.config_from_snapshot(seg.config)
    binary = score_header()
    conf_rows = "set\tn\tsoft_dice\tsoft_dice_sd\ticc\ticc_sd\n"
    conf = T.load_checkpoint(lay.stage3, "confidence") if T.is_checkpoint(lay.stage3) else None
    for name in ("sc_test", "mc_test"):
        entries = reg.split(name)
        if not entries:
            continue
        data = load_entries(entries)
        if data.masks is None:
            continue
        pred = T.predict_masks(seg.model, data.images, tcfg)
        binary += score_rows(name, "segmentation", pred, data.masks)
        binary += score_rows(name, "inter-observer", data.anno, data.masks)
        if conf is None:
            continue
        cmaps = T.predict_confidence(conf.model, data.images, T.config_from_snapshot(conf.config))
        sd, ic = [], []
        for i in range(len(data)):
            if not data.masks[i].any():
                continue
            ref = np.asarray(build_reference_map(data.masks[i], pred[i], data.images[i]))
            sd.append(soft_dice(cmaps[i], ref))
            ic.append(icc(cmaps[i], ref))
        conf_rows += (f"{name}\t{len(sd)}\t{np.mean(sd):.6f}\t{np.std(sd):.6f}"
                      f"\t{np.mean(ic):.6f}\t{np.std(ic):.6f}\n")
    return binary, conf_rows


def rw_report(cfg: RunConfig, split: str = "sc_test") -> str:
    params = rw_params(cfg)
    data = load_split(cfg, split)
    if data.masks is None:
        raise InsufficientData(f"{split} has no pixel masks")
    preds = [np.asarray(rw_shadow(img, params)[1]) for img in data.images]
    return score_header() + score_rows(split, "random-walker", preds, data.masks)


def harness_data(cfg: RunConfig, overwrite=False):
    """Generate (once) and load the anatomy-class dataset used by the harness."""
    h, p = cfg["harness"], cfg["phantom"]
    root = cfg["paths"]["harness_root"]
    if not os.path.isdir(root) or overwrite:
        claim(root, overwrite)
        n = h["per_class"] * len(h["classes"])
        generate_dataset(root, DatasetRequest(
            n_shadow=n - n // 2, n_clear=n // 2, class_ids=tuple(h["classes"]), val_fraction=h["test_fraction"],
            test_fraction=0.0, size=p["size"], speckle_strength=p["speckle"], tau=p["tau"], theta=p["theta"],
            seed=h["seed"] + 101))
    rows = scan_dataset(root)
    train = [Entry("train", c, b, l) for s, c, b, l, _ in rows if s == "train"]
    test = [Entry("test", c, b, l) for s, c, b, l, _ in rows if s != "train"]
    return load_entries(train), load_entries(test)


def step_harness(cfg: RunConfig, overwrite=False) -> str:
    lay = RunLayout(cfg["paths"]["run_dir"])
    hcfg = harness_config(cfg)
    conf = seg = None
    if any(m != "image_only" for m in hcfg.channel_modes):
        if not T.is_checkpoint(lay.stage3):
            raise MissingCheckpoint("harness channel modes need the stage-3 confidence checkpoint")
        conf = T.load_checkpoint(lay.stage3, "confidence")
        if T.is_checkpoint(lay.stage2):
            seg = T.load_checkpoint(lay.stage2, "segmentation")
    train, test = harness_data(cfg)
    return format_table(hcfg, run_harness(hcfg, train, test, conf, seg))


def run_summary(cfg: RunConfig) -> str:
    """One row per trained stage: epochs run, first / last loss, best validation metric."""
    lay = RunLayout(cfg["paths"]["run_dir"])
    rows = ["stage\tepochs\tfirst_loss\tlast_loss\tbest_val"]
    for d, better in ((lay.stage1, max), (lay.stage2, max), (lay.stage3, min)):
        if not T.is_checkpoint(d):
            continue
        ck = T.load_checkpoint(d)
        hist = ck.history
        if not hist:
            continue
        rows.append(f"{hist[0][0]}\t{len(hist)}\t{hist[0][2]:.6g}\t{hist[-1][2]:.6g}"
                    f"\t{better(h[3] for h in hist):.6g}")
    if len(rows) == 1:
        raise StageOrderError(f"no trained stages under {lay.root}")
    return "\n".join(rows) + "\n"
