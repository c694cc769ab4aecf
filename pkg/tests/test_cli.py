import logging

import numpy as np
import pytest

from fithand.cli import build_parser, main
from fithand.data import write_pgm

SUBCOMMANDS = ("synth", "augment", "train", "eval", "audit", "gradcheck", "dump-activations")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_audit_stem_row(capsys):
    code, out, _ = run(capsys, "audit", "--variant", "full", "--classes", "10", "--channels", "3")
    assert code == 0
    stem = next(line for line in out.splitlines() if line.startswith("stem1 "))
    assert stem.split()[-1] == "896"
    assert "total_params=2280234" in out
    assert "Stack4" in out and "pooling" in out


@pytest.mark.slow
def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "1")
    assert code == 0
    rows = [line for line in out.splitlines() if line.split()[-1] in ("ok", "FAIL")]
    assert rows and all(line.endswith("ok") for line in rows)
    assert any(line.startswith("network") for line in rows)


def test_augment_single_image(capsys, tmp_path, rng):
    write_pgm(tmp_path / "x.pgm", rng.integers(0, 256, (12, 12), dtype=np.uint8))
    code, _, _ = run(capsys, "augment", "--in", str(tmp_path / "x.pgm"), "--outdir", str(tmp_path / "d"))
    assert code == 0
    assert len(list((tmp_path / "d").iterdir())) == 10


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_lists_flags(capsys, sub):
    code, out, _ = run(capsys, sub, "--help")
    assert code == 0
    sub_parser = build_parser()._subparsers._group_actions[0].choices[sub]
    for action in sub_parser._actions:
        for flag in action.option_strings:
            if flag.startswith("--"):
                assert flag in out


def test_top_level_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "dump-activations" in out


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        [],
        ["train", "--data", "x"],
        ["audit", "--bogus"],
        ["audit", "--depth-scale", "3"],
        ["audit", "--classes", "ten"],
    ],
)
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


def test_missing_flag_is_named(capsys):
    _, _, err = run(capsys, "train", "--data", "somewhere")
    assert "--out" in err


def test_runtime_error_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.fith"), "--data", str(tmp_path))
    assert code == 2 and "error" in err


def test_bad_variant_exit_2(capsys):
    code, _, err = run(capsys, "audit", "--variant", "Huge")
    assert code == 2 and "Huge" in err


def test_config_precedence(capsys, tmp_path, caplog):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for the audit\nclasses = 7\nchannels = 1\n")
    with caplog.at_level(logging.INFO, logger="fithand"):
        code, out, _ = run(capsys, "audit", "--config", str(cfg), "--classes", "5", "--verbose")
    assert code == 0
    assert "classes=5 channels=1" in out
    log = caplog.text
    assert "precedence" in log
    assert any("classes" in line and "[flag]" in line for line in log.splitlines())
    assert any("channels" in line and "[config]" in line for line in log.splitlines())


def test_bad_config_key(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour=blue\n")
    code, _, err = run(capsys, "audit", "--config", str(cfg))
    assert code == 1 and "colour" in err


def test_synth_train_eval_dump(capsys, tmp_path):
    data = tmp_path / "data"
    assert run(capsys, "synth", "--out", str(data), "--classes", "3", "--per-class", "3", "--input-size", "32")[0] == 0
    ckpt = tmp_path / "m" / "model.fith"
    common = ["--input-size", "32", "--depth-scale", "8", "--epochs", "2", "--lr", "0.3", "--batch", "4"]
    code, out, _ = run(capsys, "train", "--data", str(data), "--out", str(ckpt), *common)
    assert code == 0
    assert ckpt.exists() and ckpt.with_suffix(".csv").read_text().startswith("epoch,loss,accuracy")
    assert "macro_f1=" in out

    code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data))
    assert code == 0 and "samples=18" in out
    code, out, _ = run(
        capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data), "--split", "si", "--train-subjects", "A"
    )
    assert code == 0 and "samples=9" in out

    img = next(data.rglob("*.pgm"))
    code, out, _ = run(capsys, "dump-activations", "--in", str(img), "--out", str(tmp_path / "maps"),
                       "--checkpoint", str(ckpt))
    assert code == 0 and len(list((tmp_path / "maps").glob("*.pgm"))) == 6


def test_identical_runs_identical_files(capsys, tmp_path):
    outs = []
    for run_id in ("a", "b"):
        root = tmp_path / run_id
        run(capsys, "synth", "--out", str(root / "data"), "--classes", "2", "--per-class", "2", "--input-size", "32")
        run(capsys, "train", "--data", str(root / "data"), "--out", str(root / "m.fith"), "--input-size", "32",
            "--depth-scale", "8", "--epochs", "2", "--lr", "0.2", "--seed", "3")
        outs.append(root)
    a, b = outs
    for rel in ("m.fith", "m.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    for p in sorted((a / "data").rglob("*.pgm")):
        assert p.read_bytes() == (b / "data" / p.relative_to(a / "data")).read_bytes()


def test_si_without_subjects_is_usage_error(capsys, synth_root, tmp_path):
    code, _, err = run(capsys, "train", "--data", str(synth_root), "--out", str(tmp_path / "m.fith"),
                       "--split", "si", "--input-size", "32", "--depth-scale", "8", "--epochs", "1")
    assert code == 1 and "--train-subjects" in err


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("FITHAND_THREADS", "1")
    assert run(capsys, "audit", "--classes", "3", "--input-size", "32")[0] == 0
