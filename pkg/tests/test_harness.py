import numpy as np
import pytest

from shadowtrace import harness as H
from shadowtrace.datasets import SplitData
from shadowtrace.errors import MissingCheckpoint
from shadowtrace.phantom import generate_sample, sample_spec

CLASSES = (1, 2, 3)


def _phantoms(per_class, seed, size=32):
    rng = np.random.default_rng(seed)
    imgs, cls = [], []
    for c in CLASSES:
        for i in range(per_class):
            spec = sample_spec(rng, c, bool(i % 2), size, seed=int(rng.integers(1 << 31)))
            imgs.append(np.asarray(generate_sample(spec).image))
            cls.append(c)
    n = len(imgs)
    return SplitData(np.array(imgs, np.float32), np.zeros(n, np.int64), np.array(cls), [str(i) for i in range(n)])


@pytest.fixture(scope="module")
def data():
    return _phantoms(12, 0), _phantoms(6, 1)


def hcfg(**kw):
    base = dict(classes=CLASSES, epochs=4, widths=(4, 4, 8, 8, 8, 8), batch_size=12)
    return H.HarnessConfig(**{**base, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        H.HarnessConfig(classes=(1,))
    with pytest.raises(ValueError):
        H.HarnessConfig(channel_modes=("image+depth",))


def test_image_only_deterministic(data):
    train, test = data
    a = H.train_eval(hcfg(), train, test)
    b = H.train_eval(hcfg(), train, test)
    assert np.array_equal(a, b)


def test_zero_channel_ablation(data):
    train, test = data
    diffs = []
    for seed in range(3):
        c = hcfg(seed=seed)
        plain = H.train_eval(c, train, test)
        zeros = H.train_eval(c, train, test, np.zeros_like(train.images), np.zeros_like(test.images))
        diffs.append(np.mean(zeros) - np.mean(plain))
    # an all-zero channel carries no signal: the image-channel weights start
    # identical and receive identical gradients
    assert abs(np.mean(diffs)) <= 2.0


def test_table_shape(data):
    train, test = data
    c = hcfg(channel_modes=("image_only",))
    res = H.run_harness(c, train, test)
    text = H.format_table(c, res)
    rows = [r.split("\t") for r in text.splitlines()]
    assert rows[0] == ["class", "image_only"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "Avg"]
    vals = [float(r[1]) for r in rows[1:]]
    assert all(0 <= v <= 100 for v in vals)
    assert vals[-1] == pytest.approx(np.mean(vals[:3]), abs=0.01)


def test_missing_checkpoint(data):
    train, test = data
    with pytest.raises(MissingCheckpoint):
        H.run_harness(hcfg(), train, test, conf=None)
    with pytest.raises(MissingCheckpoint):
        H.extra_channels("image+binary", train.images, None)
    assert H.extra_channels("image_only", train.images, None) is None


def test_modes_share_sample_order(data, monkeypatch):
    train, test = data
    seen = []
    orig = H.batches

    def spy(*a, **k):
        out = orig(*a, **k)
        seen.append([list(b) for b in out])
        return out

    monkeypatch.setattr(H, "batches", spy)
    c = hcfg(epochs=2)
    H.train_eval(c, train, test)
    first = list(seen)
    seen.clear()
    H.train_eval(c, train, test, np.ones_like(train.images), np.ones_like(test.images))
    assert seen == first
