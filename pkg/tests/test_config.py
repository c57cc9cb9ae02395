import pytest
from hypothesis import given, strategies as st

from shadowtrace.config import SCHEMA, SEED_ENV, defaults_table, parse_config
from shadowtrace.errors import ConfigTypeError, FormatError, UnknownKey


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    cfg = parse_config(str(p), environ={})
    table = {}
    for row in defaults_table().splitlines()[1:]:
        key, default, _ = row.split("\t")
        table[key] = default
    echoed = {}
    section = None
    for line in cfg.echo().splitlines():
        if line.startswith("["):
            section = line.strip("[]")
        elif "=" in line:
            k, _, v = line.partition("=")
            echoed[f"{section}.{k.strip()}"] = v.strip()
    assert echoed == table
    assert cfg["train"]["learning_rate"] == 1e-3 and cfg["train"]["batch_size"] == 25


def test_every_key_documented():
    keys = [r.split("\t")[0] for r in defaults_table().splitlines()[1:]]
    assert keys == [f"{s}.{k}" for s in SCHEMA for k in SCHEMA[s]]


def test_precedence(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nlearning_rate = 0.001\nseed = 4\n")
    assert parse_config(str(p), environ={})["train"]["learning_rate"] == 0.001
    cfg = parse_config(str(p), ["train.learning_rate=0.01"], environ={})
    assert cfg["train"]["learning_rate"] == 0.01
    cfg = parse_config(str(p), environ={SEED_ENV: "9"})
    assert cfg["train"]["seed"] == 9 and cfg["phantom"]["seed"] == 9 and cfg["harness"]["seed"] == 9
    cfg = parse_config(str(p), ["train.seed=2"], environ={SEED_ENV: "9"})
    assert cfg["train"]["seed"] == 2 and cfg["splits"]["seed"] == 9


@pytest.mark.parametrize("typo,nearest", [
    ("train.learning_rat", "train.learning_rate"),
    ("train.bacth_size", "train.batch_size"),
    ("rw.gama", "rw.gamma"),
    ("phantom.speckel", "phantom.speckle"),
])
def test_misspelled_key_suggests_nearest(typo, nearest):
    with pytest.raises(UnknownKey) as exc:
        parse_config(None, [f"{typo}=1"], environ={})
    names = [f"{s}.{k}" for s in SCHEMA for k in SCHEMA[s]]
    best = min(levenshtein(typo, n) for n in names)
    assert levenshtein(typo, nearest) == best
    assert repr(nearest) in str(exc.value)


def test_unknown_section(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[trian]\nseed = 1\n")
    with pytest.raises(UnknownKey, match="'train'"):
        parse_config(str(p), environ={})


def test_type_errors(tmp_path):
    with pytest.raises(ConfigTypeError):
        parse_config(None, ["train.batch_size=many"], environ={})
    with pytest.raises(ConfigTypeError):
        parse_config(None, ["train.attention=perhaps"], environ={})
    with pytest.raises(FormatError):
        parse_config(None, ["learning_rate"], environ={})
    p = tmp_path / "broken.ini"
    p.write_text("learning_rate = 1\n")
    with pytest.raises(FormatError):
        parse_config(str(p), environ={})


@given(st.integers(1, 10_000), st.floats(1e-6, 1.0, allow_nan=False), st.booleans(),
       st.lists(st.integers(1, 512), min_size=6, max_size=6))
def test_override_round_trip(batch, lr, att, widths):
    over = [f"train.batch_size={batch}", f"train.learning_rate={lr!r}", f"train.attention={str(att).lower()}",
            f"train.widths={' '.join(map(str, widths))}"]
    cfg = parse_config(None, over, environ={})
    again = parse_config(None, [f"{s}.{k}={cfg.raw[s][k]}" for s in SCHEMA for k in SCHEMA[s]], environ={})
    assert cfg["train"] == again["train"]
    assert cfg["train"]["batch_size"] == batch and cfg["train"]["learning_rate"] == lr
    assert cfg["train"]["attention"] is att and cfg["train"]["widths"] == tuple(widths)
