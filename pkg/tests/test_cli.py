import filecmp
import os
import subprocess
import sys
from pathlib import Path

import pytest

from ptwin import cli, fileio

SYNTH_CFG = "layers_per_step = 4\nsteps = 3\nframes = 20\n"
RUN_CFG = ("strict_steps = false\nlayers_per_step = 4\nframes = 20\nepochs = 2\n"
           "dim = 16\nheads = 4\nspatial_layers = 1\ntemporal_layers = 1\n")


def same_tree(a: Path, b: Path) -> bool:
    names = sorted(p.name for p in a.iterdir())
    if names != sorted(p.name for p in b.iterdir()):
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "s.cfg").write_text(SYNTH_CFG)
    (root / "r.cfg").write_text(RUN_CFG)
    assert cli.run(["synth", "--kind", "spacing", "--seed", "4", "--config",
                    str(root / "s.cfg"), "--out", str(root / "sp")]) == 0
    return root


def test_synth_outputs(work):
    sp = work / "sp"
    assert len(list(sp.glob("*.ptsq"))) == 12
    for name in ("volume.ctvx", "pores.csv", "labels.ptlb", "sample.cfg", "manifest.txt"):
        assert (sp / name).is_file()
    manifest = fileio.read_kv(sp / "manifest.txt")
    assert manifest["command"] == "synth" and manifest["seed"] == "4"
    assert len(manifest["config_hash"]) == 64
    assert manifest["config.kind"] == "spacing"


def test_synth_rerun_is_byte_identical(work, tmp_path):
    assert cli.run(["synth", "--kind", "spacing", "--seed", "4", "--config",
                    str(work / "s.cfg"), "--out", str(tmp_path / "sp")]) == 0
    assert same_tree(work / "sp", tmp_path / "sp")


def test_print_config_lists_defaults(capsys):
    assert cli.run(["train-count", "--print-config", "--epochs", "3"]) == 0
    shown = fileio.parse_kv(capsys.readouterr().out)
    assert shown["epochs"] == "3" and shown["lr"] == "0.0001"
    assert shown["task"] == "count" and shown["augment"] == "none"
    assert cli.run(["synth", "--print-config"]) == 0
    assert "frames" in fileio.parse_kv(capsys.readouterr().out)


def test_flag_overrides_config_file(work, capsys):
    assert cli.run(["train-count", "--config", str(work / "r.cfg"), "--epochs", "9",
                    "--print-config"]) == 0
    shown = fileio.parse_kv(capsys.readouterr().out)
    assert shown["epochs"] == "9" and shown["frames"] == "20"


@pytest.mark.parametrize("argv", [
    ["synth", "--bogus"],
    ["frobnicate"],
    ["segment", "--out", "x"],
    ["train-count", "--depth", "4"],
    ["eval", "--checkpoint", "missing.ptwt", "--out", "x"],
    ["report", "--data", "nowhere", "--out", "x"],
])
def test_validation_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.run(argv) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = many\n")
    assert cli.run(["train-count", "--config", str(bad), "--print-config"]) == 2
    bad.write_text("no equals sign\n")
    assert cli.run(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_runtime_error_exits_1(work, tmp_path, capsys):
    # a checkpoint from the wrong architecture passes validation but fails to load
    ckpt_dir = tmp_path / "ck"
    ckpt_dir.mkdir()
    (ckpt_dir / "m.ptwt").write_bytes(b"not weights")
    code = cli.run(["eval", "--task", "count", "--config", str(work / "r.cfg"), "--data",
                    str(work / "sp"), "--checkpoint", str(ckpt_dir / "m.ptwt"),
                    "--out", str(tmp_path / "ev")])
    assert code == 1
    assert "failed" in capsys.readouterr().err


def test_strict_split_rejected_with_hint(work, tmp_path, capsys):
    code = cli.run(["train-count", "--data", str(work / "sp"), "--epochs", "1",
                    "--out", str(tmp_path / "t")])
    assert code == 2
    assert "strict_steps" in capsys.readouterr().err


def test_segment_align_label_chain(work, tmp_path):
    sp = str(work / "sp")
    assert cli.run(["segment", "--data", sp, "--out", str(tmp_path / "seg")]) == 0
    assert (tmp_path / "seg" / "threshold.cfg").is_file()
    found = fileio.read_pore_rows(tmp_path / "seg" / "pores.csv")
    truth = fileio.read_pore_rows(work / "sp" / "pores.csv")
    assert [r[:3] for r in found] == [r[:3] for r in truth]
    # the header stores the voxel pitch as float32
    assert [r[3] for r in found] == pytest.approx([r[3] for r in truth], rel=1e-6)
    assert cli.run(["align", "--data", sp, "--out", str(tmp_path / "al")]) == 0
    offsets = fileio.read_kv(tmp_path / "al" / "offsets.cfg")
    assert offsets["sample"] == "spacing" and abs(int(offsets["shift_layers"])) <= 3
    scores = (tmp_path / "al" / "z_scores.csv").read_text().splitlines()
    assert scores[0] == "shift_layers,score" and len(scores) == 8
    # the nominal registration reproduces the generator's labels
    assert cli.run(["label", "--data", sp, "--out", str(tmp_path / "lab0")]) == 0
    assert ((tmp_path / "lab0" / "labels.ptlb").read_bytes()
            == (work / "sp" / "labels.ptlb").read_bytes())
    assert cli.run(["label", "--data", sp, "--offsets", str(tmp_path / "al" / "offsets.cfg"),
                    "--out", str(tmp_path / "lab")]) == 0
    assert len(fileio.read_labels(tmp_path / "lab" / "labels.ptlb")) == 24
    for cmd, extra in (("segment", []), ("align", []),
                       ("label", ["--offsets", str(tmp_path / "al" / "offsets.cfg")])):
        rerun = tmp_path / f"{cmd}2"
        assert cli.run([cmd, "--data", sp, "--out", str(rerun)] + extra) == 0
        first = {"segment": "seg", "align": "al", "label": "lab"}[cmd]
        assert same_tree(tmp_path / first, rerun)


@pytest.mark.parametrize("task", ["count", "locate"])
def test_train_eval_report_are_reproducible(work, tmp_path, task):
    base = ["--config", str(work / "r.cfg"), "--data", str(work / "sp"), "--seed", "1"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run([f"train-{task}"] + base + ["--out", str(a)]) == 0
    assert cli.run([f"train-{task}"] + base + ["--out", str(b)]) == 0
    assert same_tree(a, b)
    for name in ("final.ptwt", "best.ptwt", "history.csv", "run.cfg", "predictions.csv",
                 "report.csv", "per_layer.csv"):
        assert (a / name).is_file()
    assert len((a / "history.csv").read_text().splitlines()) == 3
    header = (a / "report.csv").read_text().splitlines()[0]
    assert header.startswith("dataset,augmentation,") and ("avg_iou" in header) == (task == "locate")

    ev = tmp_path / "ev"
    assert cli.run(["eval", "--data", str(work / "sp"), "--checkpoint", str(a / "final.ptwt"),
                    "--out", str(ev)]) == 0
    for name in ("report.csv", "per_layer.csv", "predictions.csv"):
        assert (ev / name).read_bytes() == (a / name).read_bytes()

    rep = tmp_path / "rep"
    assert cli.run(["report", "--data", str(ev), "--out", str(rep)]) == 0
    for name in ("report.csv", "per_layer.csv"):
        assert (rep / name).read_bytes() == (ev / name).read_bytes()
    rep2 = tmp_path / "rep2"
    assert cli.run(["report", "--data", str(ev), "--out", str(rep2)]) == 0
    assert same_tree(rep, rep2)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("PTWIN_THREADS", "2")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    cli.apply_thread_cap()
    assert os.environ["OMP_NUM_THREADS"] == "2"
    monkeypatch.setenv("PTWIN_THREADS", "zero")
    with pytest.raises(cli.ValidationError):
        cli.apply_thread_cap()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ptwin", "--version"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.strip()
