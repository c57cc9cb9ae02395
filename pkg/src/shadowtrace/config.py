"""Run configuration: INI sections of ``key = value`` lines.

Resolution order, lowest first: built-in defaults, the config file, the
``SHADOWTRACE_SEED`` environment variable (applied to every seed key), then
command-line overrides.  Unknown sections or keys are rejected with the
nearest valid name as a suggestion.
"""

from __future__ import annotations

import configparser
import difflib
import os
from dataclasses import dataclass
from typing import Any, Callable

from .errors import ConfigTypeError, FormatError, UnknownKey

SEED_ENV = "SHADOWTRACE_SEED"


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _words(v: str) -> tuple:
    return tuple(v.replace(",", " ").split())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


SCHEMA = {
    "paths": {
        "run_dir": Key(str, "runs/default", "run directory (stage checkpoints, logs, reports)"),
        "mc_root": Key(str, "data/mc", "generated multi-class phantom dataset"),
        "sc_root": Key(str, "data/sc", "generated single-class phantom dataset"),
        "registry": Key(str, "data/splits", "split registry directory"),
        "harness_root": Key(str, "data/harness", "phantom dataset for the downstream harness"),
    },
    "phantom": {
        "size": Key(int, "224", "phantom width and height in pixels"),
        "mc_shadow": Key(int, "1250", "multi-class images with a visible shadow"),
        "mc_clear": Key(int, "1150", "multi-class shadow-free images"),
        "mc_val_fraction": Key(float, "0.11", "held-out validation fraction of the multi-class set"),
        "mc_test_fraction": Key(float, "0.01", "held-out test fraction of the multi-class set"),
        "sc_shadow": Key(int, "660", "single-class images (all shadowed)"),
        "sc_val_fraction": Key(float, "0.22", "held-out fraction of the single-class set"),
        "speckle": Key(float, "0.3", "multiplicative speckle strength"),
        "tau": Key(float, "0.3", "transmittance threshold for shadow pixels"),
        "theta": Key(float, "0.01", "shadow-area fraction for a positive image label"),
        "seed": Key(int, "0", "generator seed"),
    },
    "splits": {
        "mc_train_shadow": Key(int, "1000", ""),
        "mc_train_clear": Key(int, "1000", ""),
        "mc_val_shadow": Key(int, "100", ""),
        "mc_val_clear": Key(int, "100", ""),
        "mc_test": Key(int, "48", ""),
        "sc_train": Key(int, "500", ""),
        "sc_val": Key(int, "50", ""),
        "sc_test": Key(int, "93", ""),
        "seed": Key(int, "0", "split and weak-label draw seed"),
    },
    "train": {
        "momentum": Key(float, "0.9", "SGD momentum"),
        "learning_rate": Key(float, "0.001", "SGD learning rate"),
        "l2_scale": Key(float, "1e-05", "L2 penalty on all weight tensors"),
        "batch_size": Key(int, "25", ""),
        "epochs_classifier": Key(int, "70", "full-scale epochs, multiplied by desk_scale_factor"),
        "epochs_segmentation": Key(int, "700", ""),
        "epochs_confidence": Key(int, "700", ""),
        "desk_scale_factor": Key(float, "0.1", "epoch multiplier in (0, 1]"),
        "confidence_loss": Key(str, "mse", "mse (clamped head) or sigmoid_ce (sigmoid head)"),
        "attention": Key(_bool, "false", "attention-gated variants"),
        "widths": Key(_ints, "16 32 64 128 128 128", "channel widths of the six encoder blocks"),
        "whiten_divisor": Key(str, "std", "std or var"),
        "pad_multiple": Key(int, "64", "inputs are zero-padded to a multiple of this"),
        "flip_augment": Key(_bool, "true", "random horizontal mirroring"),
        "seed": Key(int, "0", "initialisation and shuffling seed"),
        "threads": Key(int, "1", "intra-op threads; 1 keeps runs bit-reproducible"),
        "init_from_classifier": Key(_bool, "true", "proposed arm; false trains the baseline arm"),
    },
    "rw": {
        "alpha": Key(float, "1.0", "depth attenuation coefficient"),
        "beta": Key(float, "90.0", "edge weight sharpness"),
        "gamma": Key(float, "0.3", "horizontal edge factor"),
        "threshold": Key(float, "0.3", "shadow threshold on 1 - confidence"),
    },
    "fusion": {
        "sigma": Key(float, "0", "beam Gaussian width in pixels; 0 means width / 4"),
        "use_intensity": Key(_bool, "false", "multiply beam weights by view intensity"),
        "invert": Key(_bool, "true", "weight by 1 - c (c is shadow confidence)"),
    },
    "harness": {
        "classes": Key(_ints, "1 2 3", "phantom anatomy classes"),
        "modes": Key(_words, "image_only image+confidence image+binary", "channel modes"),
        "epochs": Key(int, "10", ""),
        "per_class": Key(int, "60", "generated images per class"),
        "test_fraction": Key(float, "0.25", ""),
        "learning_rate": Key(float, "0.01", ""),
        "seed": Key(int, "0", ""),
    },
}

SEED_KEYS = (("phantom", "seed"), ("splits", "seed"), ("train", "seed"), ("harness", "seed"))


class RunConfig:
    """Resolved configuration: ``cfg[section][key]`` holds parsed values."""

    def __init__(self, values: dict, raw: dict):
        self.values = values
        self.raw = raw

    def __getitem__(self, section):
        return self.values[section]

    def get(self, dotted: str):
        s, k = dotted.split(".", 1)
        return self.values[s][k]

    def echo(self) -> str:
        lines = []
        for s in SCHEMA:
            lines.append(f"[{s}]")
            lines.extend(f"{k} = {self.raw[s][k]}" for k in SCHEMA[s])
            lines.append("")
        return "\n".join(lines)


def _all_names():
    return [f"{s}.{k}" for s in SCHEMA for k in SCHEMA[s]]


def _unknown(section, key=None):
    name = section if key is None else f"{section}.{key}"
    pool = list(SCHEMA) if key is None else _all_names()
    guess = difflib.get_close_matches(name, pool, n=1, cutoff=0.0)
    hint = f"; did you mean {guess[0]!r}?" if guess else ""
    return UnknownKey(f"unknown config {'section' if key is None else 'key'} {name!r}{hint}")


def _check(section, key):
    if section not in SCHEMA:
        raise _unknown(section)
    if key not in SCHEMA[section]:
        raise _unknown(section, key)


def parse_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Merge defaults, the config file, the seed env var and ``section.key=value`` overrides."""
    raw = {s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                cp.read_file(f)
        except configparser.Error as exc:
            raise FormatError(f"malformed config {path}: {exc}".replace("\n", " ")) from exc
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        for s in cp.sections():
            for k, v in cp[s].items():
                _check(s, k)
                raw[s][k] = v
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        for s, k in SEED_KEYS:
            raw[s][k] = env[SEED_ENV]
    for item in overrides or ():
        name, sep, v = item.partition("=")
        if not sep or "." not in name:
            raise FormatError(f"override {item!r} is not section.key=value")
        s, k = name.strip().split(".", 1)
        _check(s, k)
        raw[s][k] = v.strip()
    values = {}
    for s, keys in SCHEMA.items():
        values[s] = {}
        for k, spec in keys.items():
            try:
                values[s][k] = spec.parse(raw[s][k])
            except ValueError as exc:
                raise ConfigTypeError(f"{s}.{k}: cannot parse {raw[s][k]!r} ({exc})") from exc
    return RunConfig(values, raw)


def defaults_table() -> str:
    """TSV of every key with its default and description."""
    rows = ["key\tdefault\tdescription"]
    for s, keys in SCHEMA.items():
        for k, spec in keys.items():
            rows.append(f"{s}.{k}\t{spec.default}\t{spec.doc}")
    return "\n".join(rows) + "\n"
