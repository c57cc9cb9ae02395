import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from shadowtrace.cli import SUBCOMMANDS
from shadowtrace.imaging import load_confidence, save_confidence, save_image

import clirun


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    """Two complete runs of the same config in the same directory."""
    root = str(tmp_path_factory.mktemp("run"))
    first = (root,) + clirun.run_pipeline(root)
    snap = clirun.artifact_bytes(root), clirun.strip_timing(os.path.join(root, "run", "logs.tsv"))
    shutil.rmtree(root)
    os.makedirs(root)
    second = (root,) + clirun.run_pipeline(root)
    return [first, second], snap


def test_pipeline_exit_codes(pipelines):
    for root, _, codes in pipelines[0]:
        for cmd, (code, _, err) in codes.items():
            assert code == 0, (cmd, err)


def test_reports_written(pipelines):
    root, _, _ = pipelines[0][1]
    run = os.path.join(root, "run")
    for name in ("eval.tsv", "eval_conf.tsv", "rw.tsv", "harness.tsv", "flops.tsv", "report.tsv", "logs.tsv",
                 "config.snapshot", "predict.log"):
        assert os.path.exists(os.path.join(run, name)), name
    header = open(os.path.join(run, "logs.tsv")).readline().rstrip("\n").split("\t")
    assert header == ["stage", "epoch", "loss", "val_metric", "wall_seconds"]
    eval_rows = [r.split("\t") for r in open(os.path.join(run, "eval.tsv")).read().splitlines()]
    assert {r[0] for r in eval_rows[1:]} == {"sc_test", "mc_test"}
    flops = dict(r.split("\t") for r in open(os.path.join(run, "flops.tsv")).read().splitlines()[1:])
    layers = sum(int(v) for k, v in flops.items() if k not in ("total", "gflops"))
    assert layers == int(flops["total"])
    report = [r.split("\t") for r in open(os.path.join(run, "report.tsv")).read().splitlines()[1:]]
    assert [r[0] for r in report] == ["classifier", "segmentation", "confidence"]
    assert all(float(r[3]) < float(r[2]) for r in report)


def test_byte_identical_reruns(pipelines):
    runs, (a, logs) = pipelines
    root = runs[1][0]
    b = clirun.artifact_bytes(root)
    assert sorted(a) == sorted(b)
    assert any(k.endswith("params.bin") for k in a)
    diff = [k for k in a if a[k] != b[k]]
    assert diff == []
    assert clirun.strip_timing(os.path.join(root, "run", "logs.tsv")) == logs


def test_predict_output(pipelines):
    root, _, codes = pipelines[0][1]
    c = np.asarray(load_confidence(os.path.join(root, "pred.conf.png")))
    assert c.shape == (32, 32) and c.min() >= 0 and c.max() <= 1
    line = open(os.path.join(root, "run", "predict.log")).read().splitlines()[-1].split("\t")
    assert line[1] == "confidence" and float(line[2]) > 0


def test_existing_output_needs_overwrite(pipelines):
    root, cfg, _ = pipelines[0][1]
    code, _, err = clirun.run(["train-conf", "--config", cfg])
    assert code == 2 and err.startswith("error\tOutputExists\t")


def test_ordering_error(tmp_path):
    cfg = clirun.write_config(str(tmp_path))
    code, _, err = clirun.run(["train-conf", "--config", cfg])
    assert code == 2
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].split("\t")[:2] == ["error", "StageOrderError"]
    assert not os.path.exists(os.path.join(str(tmp_path), "run", "stage3"))


def test_usage_errors():
    code, _, err = clirun.run(["frobnicate"])
    assert code == 64 and "usage:" in err
    code, _, err = clirun.run([])
    assert code == 64
    code, _, err = clirun.run(["predict", "--image"])
    assert code == 64


def test_unknown_key_exit(tmp_path):
    code, _, err = clirun.run(["splits", "--set", "splits.sc_tets=3", "--run-dir", str(tmp_path)])
    assert code == 2 and "sc_test" in err


def test_lr_flag_precedence(tmp_path, monkeypatch):
    from shadowtrace import cli
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlearning_rate = 0.001\n")
    args = cli.build_parser().parse_args(["train-seg", "--config", str(p), "--lr", "0.01"])
    assert cli.resolve_config(args)["train"]["learning_rate"] == 0.01


def test_report_defaults():
    code, out, _ = clirun.run(["report", "--defaults"])
    assert code == 0 and out.startswith("key\tdefault\tdescription")


def test_all_subcommands_listed():
    r = subprocess.run([sys.executable, "-m", "shadowtrace.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in SUBCOMMANDS:
        assert cmd in r.stdout


def test_fuse_command(tmp_path):
    a = np.full((16, 16), 40.0)
    b = np.full((16, 16), 210.0)
    save_image(str(tmp_path / "a.png"), a)
    save_image(str(tmp_path / "b.png"), b)
    # shadow confidence: view a fully shadowed, view b clear
    save_confidence(str(tmp_path / "ca.png"), np.ones((16, 16)))
    save_confidence(str(tmp_path / "cb.png"), np.zeros((16, 16)))
    code, _, err = clirun.run(["fuse", "--run-dir", str(tmp_path), "--views", tmp_path / "a.png", tmp_path / "b.png",
                               "--confidence", tmp_path / "ca.png", tmp_path / "cb.png",
                               "--out", tmp_path / "f.png", "--plain-out", tmp_path / "p.png",
                               "--diff-out", tmp_path / "d.png"])
    assert code == 0, err
    from shadowtrace.imaging import load_image
    f = np.asarray(load_image(str(tmp_path / "f.png")))
    assert np.abs(f - 210).max() <= 1
    code, _, _ = clirun.run(["fuse", "--run-dir", str(tmp_path), "--views", tmp_path / "a.png",
                             "--beam-x", "1", "2", "--out", tmp_path / "g.png"])
    assert code == 64


def test_seed_env(tmp_path, monkeypatch):
    from shadowtrace import cli
    monkeypatch.setenv("SHADOWTRACE_SEED", "17")
    args = cli.build_parser().parse_args(["splits"])
    cfg = cli.resolve_config(args)
    assert cfg["train"]["seed"] == 17 and cfg["splits"]["seed"] == 17
