"""``shadowtrace`` command line.

Exit codes: 0 success, 2 precondition or stage-ordering failure, 64 usage
error, 70 internal failure.  Errors are printed as one tab-separated line on
stderr: ``error<TAB><kind><TAB><message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import pipeline as P
from . import training as T
from .config import SCHEMA, defaults_table, parse_config
from .errors import PreconditionError, ShadowTraceError, StageOrderError
from .flopsest import descriptor_flops, gflops
from .fusion import BeamLine, ViewStack, compound, gaussian_weights, apply_confidence
from .imaging import (load_confidence, load_image, save_confidence, save_image, save_mask, to_uint8)
from .rwbaseline import rw_shadow

EXIT_OK, EXIT_PRECONDITION, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 64, 70

log = logging.getLogger("shadowtrace")

SUBCOMMANDS = ("phantom", "splits", "train-classifier", "train-seg", "build-ref", "train-conf", "predict",
               "eval", "rw", "fuse", "harness", "flops", "report")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--run-dir", help="shorthand for paths.run_dir")
    common.add_argument("--lr", type=float, help="shorthand for train.learning_rate")
    common.add_argument("--seed", type=int, help="shorthand for train.seed")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="shadowtrace", description="shadow segmentation and confidence estimation pipeline")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True
    sub.add_parser("phantom", parents=[common], help="generate the phantom datasets")
    sub.add_parser("splits", parents=[common], help="draw the split registry")
    sub.add_parser("train-classifier", parents=[common], help="stage 1: shadow / shadow-free classifier")
    s = sub.add_parser("train-seg", parents=[common], help="stage 2: segmentation network")
    s.add_argument("--no-init", action="store_true", help="random encoder (baseline arm)")
    sub.add_parser("build-ref", parents=[common], help="reference confidence maps from the stage-2 model")
    sub.add_parser("train-conf", parents=[common], help="stage 3: confidence network")
    s = sub.add_parser("predict", parents=[common], help="single-image inference")
    s.add_argument("--checkpoint", help="checkpoint directory (default: stage 3 of the run)")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help=".png (mask or 16-bit confidence) or .scm")
    sub.add_parser("eval", parents=[common], help="score the run on the test splits")
    s = sub.add_parser("rw", parents=[common], help="random-walker baseline")
    s.add_argument("--image", help="single image; omit to score the sc_test split")
    s.add_argument("--out", help="confidence output for --image")
    s.add_argument("--mask-out", help="thresholded mask output for --image")
    s = sub.add_parser("fuse", parents=[common], help="compound co-registered views")
    s.add_argument("--views", nargs="+", required=True)
    s.add_argument("--confidence", nargs="+", help="one confidence map per view")
    s.add_argument("--beam-x", nargs="+", type=float, help="beam centre column per view")
    s.add_argument("--beam-angle", nargs="+", type=float, help="beam angle (radians) per view")
    s.add_argument("--out", required=True)
    s.add_argument("--plain-out", help="fusion without confidence")
    s.add_argument("--diff-out", help="normalised difference map")
    sub.add_parser("harness", parents=[common], help="downstream classification with extra channels")
    s = sub.add_parser("flops", parents=[common], help="conv + ReLU cost of a checkpoint")
    s.add_argument("--checkpoint", help="checkpoint directory (default: stage 3 of the run)")
    s = sub.add_parser("report", parents=[common], help="per-stage training summary")
    s.add_argument("--defaults", action="store_true", help="print the documented defaults table")
    return p


def resolve_config(args):
    overrides = list(args.set)
    if args.run_dir:
        overrides.append(f"paths.run_dir={args.run_dir}")
    if args.lr is not None:
        overrides.append(f"train.learning_rate={args.lr!r}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "no_init", False):
        overrides.append("train.init_from_classifier=false")
    return parse_config(args.config, overrides)


def _report(cfg, name: str, text: str) -> str:
    path = os.path.join(cfg["paths"]["run_dir"], name)
    P.write_report(path, text)
    sys.stdout.write(text)
    return path


def _checkpoint_dir(cfg, args):
    return args.checkpoint or P.RunLayout(cfg["paths"]["run_dir"]).stage3


def cmd_predict(cfg, args):
    ck = T.load_checkpoint(_checkpoint_dir(cfg, args))
    img = load_image(args.image)
    pred = T.predict(ck, img)
    if pred.mask is not None:
        save_mask(args.out, pred.mask)
    else:
        save_confidence(args.out, pred.confmap)
    run_dir = cfg["paths"]["run_dir"]
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "predict.log"), "a") as f:
        f.write(f"{args.image}\t{ck.arch.kind}\t{pred.seconds:.6f}\n")
    print(f"{args.out}\t{pred.seconds:.6f}")


def cmd_rw(cfg, args):
    if args.image is None:
        _report(cfg, "rw.tsv", P.rw_report(cfg))
        return
    conf, mask = rw_shadow(load_image(args.image), P.rw_params(cfg))
    if args.out:
        save_confidence(args.out, conf)
    if args.mask_out:
        save_mask(args.mask_out, mask)


def cmd_fuse(cfg, args):
    views = [np.asarray(load_image(v)) for v in args.views]
    confs = [np.asarray(load_confidence(c)) for c in args.confidence] if args.confidence else None
    beams = None
    if args.beam_x or args.beam_angle:
        xs = args.beam_x or [views[0].shape[1] / 2.0] * len(views)
        angles = args.beam_angle or [0.0] * len(views)
        if len(xs) != len(views) or len(angles) != len(views):
            raise UsageError("need one --beam-x / --beam-angle value per view")
        beams = [BeamLine(x=x, angle=a) for x, a in zip(xs, angles)]
    f = cfg["fusion"]
    stack = ViewStack(views, beams=beams, confmaps=confs, sigma=f["sigma"] or None)
    plain, withc, diff = compound(stack, f["use_intensity"], f["invert"])
    save_image(args.out, np.clip(np.rint(withc), 0, 255))
    if args.plain_out:
        save_image(args.plain_out, np.clip(np.rint(plain), 0, 255))
    if args.diff_out:
        save_confidence(args.diff_out, diff)


def cmd_flops(cfg, args):
    d = _checkpoint_dir(cfg, args)
    path = os.path.join(d, T.ARCH_FILE)
    if not os.path.exists(path):
        raise StageOrderError(f"no architecture descriptor at {path}")
    with open(path) as fh:
        total, breakdown = descriptor_flops(fh.read())
    lines = ["layer\tflops"] + [f"{n}\t{v}" for n, v in breakdown]
    lines += [f"total\t{total}", f"gflops\t{gflops(total)}"]
    _report(cfg, "flops.tsv", "\n".join(lines) + "\n")


def dispatch(args) -> int:
    if args.command == "report" and args.defaults:
        sys.stdout.write(defaults_table())
        return EXIT_OK
    cfg = resolve_config(args)
    ow = args.overwrite
    c = args.command
    if c == "phantom":
        P.step_phantom(cfg, ow)
    elif c == "splits":
        reg = P.step_splits(cfg, ow)
        print("\t".join(f"{k}={v}" for k, v in sorted(reg.counts().items())))
    elif c == "train-classifier":
        P.step_train_classifier(cfg, ow)
    elif c == "train-seg":
        P.step_train_segmentation(cfg, ow)
    elif c == "build-ref":
        kept = P.step_build_reference(cfg, ow)
        print(f"reference maps\t{len(kept[0])}")
    elif c == "train-conf":
        P.step_train_confidence(cfg, ow)
    elif c == "predict":
        cmd_predict(cfg, args)
    elif c == "eval":
        binary, conf = P.evaluate_run(cfg)
        _report(cfg, "eval.tsv", binary)
        _report(cfg, "eval_conf.tsv", conf)
    elif c == "rw":
        cmd_rw(cfg, args)
    elif c == "fuse":
        cmd_fuse(cfg, args)
    elif c == "harness":
        _report(cfg, "harness.tsv", P.step_harness(cfg, ow))
    elif c == "flops":
        cmd_flops(cfg, args)
    elif c == "report":
        _report(cfg, "report.tsv", P.run_summary(cfg))
    return EXIT_OK


def _fail(kind: str, message: str, code: int) -> int:
    flat = " ".join(str(message).split())
    sys.stderr.write(f"error\t{kind}\t{flat}\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return _fail("usage", str(exc).splitlines()[0], EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except PreconditionError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code)
    except ShadowTraceError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_PRECONDITION)
    except Exception as exc:  # noqa: BLE001
        return _fail(type(exc).__name__, str(exc), EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
