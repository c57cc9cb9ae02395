import os

from shadowtrace import study
from shadowtrace.config import parse_config


def test_arm_overrides_differ_only_in_init_and_run_dir(tmp_path):
    s = study.StudyConfig()
    a = parse_config(None, s.overrides(str(tmp_path), 1, "proposed"), environ={})
    b = parse_config(None, s.overrides(str(tmp_path), 1, "baseline"), environ={})
    assert a["train"]["init_from_classifier"] and not b["train"]["init_from_classifier"]
    assert a["paths"]["run_dir"] != b["paths"]["run_dir"]
    for sec in ("phantom", "splits"):
        assert a[sec] == b[sec]
    ta, tb = dict(a["train"]), dict(b["train"])
    ta.pop("init_from_classifier")
    tb.pop("init_from_classifier")
    assert ta == tb and ta["widths"] == s.widths and ta["seed"] == 1
    assert a["splits"]["mc_train_shadow"] + a["splits"]["mc_train_clear"] == 2000
    assert (a["splits"]["sc_train"], a["splits"]["sc_val"], a["splits"]["sc_test"]) == (500, 50, 93)


def test_summarize_and_hours(tmp_path):
    res = [study.ArmResult("proposed", 0, 0.8, 0.7, 1.0), study.ArmResult("baseline", 0, 0.6, 0.65, 1.0)]
    text = study.summarize(res).splitlines()
    assert text[0] == "arm\tseed\ttest_dice\tconf_soft_dice"
    assert "proposed\tmean\t0.8000\t0.7000" in text
    for stage, secs in (("stage1", 360.0), ("stage2", 3240.0)):
        d = tmp_path / "runs" / "proposed-0" / stage
        os.makedirs(d)
        (d / "history.tsv").write_text(f"stage\tepoch\tloss\tval_metric\twall_seconds\nx\t1\t1\t1\t{secs / 2}\n"
                                       f"x\t2\t1\t1\t{secs}\n")
    assert study.training_hours(str(tmp_path)) == 1.0
