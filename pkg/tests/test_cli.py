import csv
import os

import pytest

from tinyssl.cli import run_command

TINY = ["--set", "backbone.preset=micro", "--set", "data.synth_classes=2", "--set", "data.synth_per_class=4",
        "--set", "data.synth_test_per_class=2", "--set", "optimizer.batch=8", "--set", "optimizer.micro_batch=8",
        "--set", "curriculum.total_epochs=1", "--set", "optimizer.warmup_epochs=0", "--set", "collapse.subset=8",
        "--set", "probe.epochs=2"]


def test_usage_errors_exit_2(capsys):
    assert run_command([]) == 2
    assert run_command(["frobnicate"]) == 2
    assert run_command(["pretrain", "--set", "nope=1"]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert run_command(["probe"]) == 2
    assert run_command(["gradcheck", "--suite", "nope"]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert run_command(["inspect", str(tmp_path / "missing.tdck")]) == 1
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"garbage!")
    assert run_command(["inspect", str(junk)]) == 1
    assert "unrecognised" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", [["pretrain"], ["probe"], ["budget"], ["teacher", "synth"], ["gradcheck"]])
def test_help_lists_config_keys(cmd, capsys):
    assert run_command(cmd + ["--help"]) == 0
    out = capsys.readouterr().out
    assert "config keys" in out and "loss.lambda_reg" in out


def test_budget_report(tmp_path, capsys):
    assert run_command(["budget", "--head", "seed_mlp", "--output-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "ratio[seed_mlp]" in out and "8.1x" in out
    rows = list(csv.reader(open(tmp_path / "budget.csv")))
    assert rows[0] == ["quantity", "value", "note"]
    assert (tmp_path / "report.txt").read_text() == out
    assert run_command(["budget", "--platform", "bad", "--output-dir", str(tmp_path)]) == 2


def test_gradcheck_gate(capsys):
    assert run_command(["gradcheck", "--suite", "cls", "--shapes", "3"]) == 0
    assert run_command(["gradcheck", "--suite", "cls", "--shapes", "3", "--tol", "0"]) == 1
    assert "gradient check failed" in capsys.readouterr().out


def test_pretrain_probe_inspect_flow(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run_command(["pretrain", "--quiet", "--set", f"output_dir={out}"] + TINY) == 0
    ck = os.path.join(out, "checkpoint.tdck")
    assert os.path.exists(os.path.join(out, "metrics.csv")) and os.path.exists(ck)
    assert run_command(["probe", "--checkpoint", ck, "--knn", "3"]) == 0
    assert run_command(["probe", "--random-init", "--set", f"output_dir={out}"] + TINY) == 0
    rows = list(csv.reader(open(os.path.join(out, "results.csv"))))
    assert [r[0] for r in rows] == ["tag", "pretrained", "random_init"]
    assert run_command(["probe", "--checkpoint", ck, "--config", "x.cfg"]) == 2
    capsys.readouterr()
    assert run_command(["inspect", ck, "--tensors"]) == 0
    text = capsys.readouterr().out
    assert "method=ca_dssl epoch=1" in text and "net.backbone" in text
    assert run_command(["inspect", os.path.join(out, "teacher.tfst")]) == 0
    assert "teacher store" in capsys.readouterr().out
    # a resume that is already complete leaves the run untouched
    before = open(os.path.join(out, "metrics.csv"), "rb").read()
    assert run_command(["pretrain", "--quiet", "--resume", ck, "--set", f"output_dir={out}"] + TINY) == 0
    assert open(os.path.join(out, "metrics.csv"), "rb").read() == before


def test_synth_generators(tmp_path, capsys):
    data = tmp_path / "d.bin"
    assert run_command(["data", "synth", "--classes", "2", "--per-class", "3", "--output", str(data)]) == 0
    assert os.path.getsize(data) == 6 * 3074
    store = tmp_path / "t.tfst"
    assert run_command(["teacher", "synth", "--cls-only", "--output", str(store)] + TINY[:6]) == 0
    capsys.readouterr()
    assert run_command(["inspect", str(store)]) == 0
    assert "none (CLS only)" in capsys.readouterr().out
    assert run_command(["data", "synth", "--classes", "1", "--output", str(data)]) == 2
