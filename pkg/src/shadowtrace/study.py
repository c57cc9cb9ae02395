"""Directional phantom study: classifier-initialised segmentation ("proposed")
against random initialisation ("baseline"), each followed by its own
confidence network, repeated over several training seeds.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import pipeline as P
from . import training as T
from .config import parse_config
from .metrics import soft_dice
from .transfer import build_reference_map

log = logging.getLogger(__name__)

ARMS = ("proposed", "baseline")


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple = (0, 1, 2)
    size: int = 64
    widths: tuple = (8, 16, 32, 64, 64, 64)
    desk_scale_factor: float = 0.1
    phantom_seed: int = 0

    def overrides(self, root: str, seed: int, arm: str) -> list:
        return [
            f"paths.run_dir={os.path.join(root, 'runs', f'{arm}-{seed}')}",
            f"paths.mc_root={os.path.join(root, 'data', 'mc')}",
            f"paths.sc_root={os.path.join(root, 'data', 'sc')}",
            f"paths.registry={os.path.join(root, 'data', 'splits')}",
            f"phantom.size={self.size}",
            f"phantom.seed={self.phantom_seed}",
            f"splits.seed={self.phantom_seed}",
            f"train.seed={seed}",
            f"train.widths={' '.join(map(str, self.widths))}",
            f"train.desk_scale_factor={self.desk_scale_factor}",
            f"train.init_from_classifier={'true' if arm == 'proposed' else 'false'}",
        ]


@dataclass
class ArmResult:
    arm: str
    seed: int
    test_dice: float
    conf_soft_dice: float
    seconds: float


def arm_scores(cfg) -> tuple:
    """Mean sc_test DICE of the segmenter and mean soft DICE of the confidence net
    against reference maps built from that segmenter."""
    lay = P.RunLayout(cfg["paths"]["run_dir"])
    seg = T.load_checkpoint(lay.stage2, "segmentation")
    conf = T.load_checkpoint(lay.stage3, "confidence")
    test = P.load_split(cfg, "sc_test")
    tcfg = T.config_from_snapshot(seg.config)
    pred = T.predict_masks(seg.model, test.images, tcfg)
    dice = T.mean_dice(pred, test.masks)
    cmaps = T.predict_confidence(conf.model, test.images, T.config_from_snapshot(conf.config))
    sd = [soft_dice(cmaps[i], build_reference_map(test.masks[i], pred[i], test.images[i]))
          for i in range(len(test)) if test.masks[i].any()]
    return dice, float(np.mean(sd))


def run_arm(root: str, scfg: StudyConfig, seed: int, arm: str) -> ArmResult:
    cfg = parse_config(None, scfg.overrides(root, seed, arm), environ={})
    lay = P.RunLayout(cfg["paths"]["run_dir"])
    t0 = time.perf_counter()
    if arm == "proposed" and not T.is_checkpoint(lay.stage1):
        P.step_train_classifier(cfg, overwrite=True)
    if not T.is_checkpoint(lay.stage2):
        P.step_train_segmentation(cfg, overwrite=True)
    if not os.path.exists(os.path.join(lay.refconf_val, "index.tsv")):
        P.step_build_reference(cfg, overwrite=True)
    if not T.is_checkpoint(lay.stage3):
        P.step_train_confidence(cfg, overwrite=True)
    dice, sd = arm_scores(cfg)
    res = ArmResult(arm, seed, dice, sd, time.perf_counter() - t0)
    log.info("study %s seed %d: dice %.4f soft dice %.4f (%.0f s)", arm, seed, dice, sd, res.seconds)
    return res


def prepare_data(root: str, scfg: StudyConfig):
    cfg = parse_config(None, scfg.overrides(root, scfg.seeds[0], "proposed"), environ={})
    if not os.path.isdir(cfg["paths"]["mc_root"]):
        P.step_phantom(cfg, overwrite=True)
    if not os.path.exists(os.path.join(cfg["paths"]["registry"], "splits.tsv")):
        P.step_splits(cfg, overwrite=True)


def run_study(root: str, scfg: StudyConfig = StudyConfig()) -> list:
    """Run (or resume) every arm and seed; completed stages are reused."""
    prepare_data(root, scfg)
    results = []
    for seed in scfg.seeds:
        for arm in ARMS:
            results.append(run_arm(root, scfg, seed, arm))
    return results


def training_hours(root: str) -> float:
    """Wall-clock training time over every arm, from the per-stage histories."""
    total = 0.0
    runs = os.path.join(root, "runs")
    for name in sorted(os.listdir(runs)) if os.path.isdir(runs) else ():
        for stage in ("stage1", "stage2", "stage3"):
            path = os.path.join(runs, name, stage, T.HISTORY_FILE)
            if os.path.exists(path):
                with open(path) as f:
                    rows = [r.split("\t") for r in f.read().splitlines()[1:] if r]
                if rows:
                    total += float(rows[-1][-1])
    return total / 3600.0


def summarize(results) -> str:
    lines = ["arm\tseed\ttest_dice\tconf_soft_dice"]
    for r in results:
        lines.append(f"{r.arm}\t{r.seed}\t{r.test_dice:.4f}\t{r.conf_soft_dice:.4f}")
    for arm in ARMS:
        rs = [r for r in results if r.arm == arm]
        if rs:
            lines.append(f"{arm}\tmean\t{np.mean([r.test_dice for r in rs]):.4f}"
                         f"\t{np.mean([r.conf_soft_dice for r in rs]):.4f}")
    return "\n".join(lines) + "\n"


def main(argv=None):
    import argparse
    p = argparse.ArgumentParser(description="directional phantom study")
    p.add_argument("root")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_study(a.root, StudyConfig(seeds=tuple(a.seeds)))
    text = summarize(res)
    with open(os.path.join(a.root, "study.tsv"), "w") as f:
        f.write(text)
    print(text, end="")


if __name__ == "__main__":
    main()
