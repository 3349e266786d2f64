import json
import subprocess
import sys

import numpy as np
import pytest

from picnet import data as D
from picnet import train as TR
from picnet.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main

TINY = ["--patch-size", "4", "--pca-components", "4", "--fim-blocks", "1", "--channels", "4", "--d-model", "8"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def echoed(stdout):
    first = stdout.splitlines()[0]
    assert first.startswith("config ")
    return json.loads(first[len("config "):])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "bundle"
    assert main(["synth", "--out", str(path), "--classes", "3", "--size", "32", "--bands", "6"]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    argv = ["train", "--data", str(synth_dir), "--out", str(out), "--epochs", "2", "--batch", "16", *TINY]
    assert main(argv) == EXIT_OK
    return out


def test_synth_default_loads_and_is_deterministic(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "a"))
    assert code == EXIT_OK
    cfg = echoed(out)
    assert set(cfg) == {"command", "seed", "classes", "size", "bands", "aux_channels", "difficulty", "out"}
    D.load_bundle(tmp_path / "a")
    run(capsys, "synth", "--out", str(tmp_path / "b"))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_rejects_one_class(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x"), "--classes", "1")
    assert code == EXIT_INVALID
    assert "2 classes" in err


def test_synth_unwritable_path(capsys):
    code, _, _ = run(capsys, "synth", "--out", "/proc/no/such/dir")
    assert code == EXIT_INVALID


def test_unknown_flag_exits_one(capsys):
    code, _, err = run(capsys, "synth", "--out", "x", "--bogus", "1")
    assert code == EXIT_INVALID
    assert "unrecognized" in err


def test_train_writes_artifacts(trained):
    assert (trained / "model.ckpt").is_file()
    hist = TR.read_history(trained / "history.ndjson")
    assert [h["epoch"] for h in hist] == [1, 2]


def test_train_echo_and_parameter_count(synth_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", str(synth_dir), "--out", str(tmp_path), "--epochs", "1", *TINY)
    assert code == EXIT_OK
    cfg = echoed(out)
    for flag in ("data", "out", "patch_size", "pca_components", "fim_blocks", "lambda1", "lambda2", "lr", "epochs",
                 "batch", "seed"):
        assert flag in cfg
    assert out.splitlines()[0].count('"lr"') == 1
    assert any(line.startswith("parameters ") for line in out.splitlines())


def test_train_odd_patch(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(synth_dir), "--out", str(tmp_path), "--patch-size", "7")
    assert code == EXIT_INVALID
    assert "even" in err


def test_train_numeric_failure_exits_two(synth_dir, tmp_path, capsys):
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--data", str(synth_dir), "--out", str(tmp_path), "--epochs", "3",
                           "--lr", "1e300", *TINY)
    assert code == EXIT_NUMERIC
    assert "epoch" in err


def test_train_resume(synth_dir, trained, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", str(synth_dir), "--out", str(tmp_path), "--epochs", "3",
                       "--batch", "16", "--resume", str(trained / "model.ckpt"), *TINY)
    assert code == EXIT_OK
    assert [h["epoch"] for h in TR.read_history(tmp_path / "history.ndjson")] == [1, 2, 3]


def test_eval_prints_table(synth_dir, trained, capsys):
    code, out, _ = run(capsys, "eval", "--data", str(synth_dir), "--checkpoint", str(trained / "model.ckpt"),
                       "--split", "train")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert any(line.startswith("OA ") for line in lines)
    assert any(line.startswith("Kappa ") for line in lines)
    assert sum(1 for line in lines if line.strip().startswith(("1 ", "2 ", "3 "))) == 3


def test_eval_mismatch_prints_both_configs(trained, tmp_path, capsys):
    main(["synth", "--out", str(tmp_path / "k4"), "--classes", "4", "--size", "32", "--bands", "6"])
    capsys.readouterr()
    code, out, _ = run(capsys, "eval", "--data", str(tmp_path / "k4"), "--checkpoint", str(trained / "model.ckpt"))
    assert code == EXIT_INVALID
    assert "checkpoint expects" in out and "bundle provides" in out


def test_predict_writes_ppm(synth_dir, trained, tmp_path, capsys):
    target = tmp_path / "map.ppm"
    code, _, _ = run(capsys, "predict", "--data", str(synth_dir), "--checkpoint", str(trained / "model.ckpt"),
                     "--out-map", str(target))
    assert code == EXIT_OK
    raw = target.read_bytes()
    assert raw.startswith(b"P6\n32 32\n255\n")
    assert len(raw) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3


def test_inspect_histogram(synth_dir, capsys):
    code, out, _ = run(capsys, "inspect", "--data", str(synth_dir))
    assert code == EXIT_OK
    b = D.load_bundle(synth_dir)
    rows = [line.split() for line in out.splitlines() if line.startswith("class_")]
    assert sum(int(r[1]) for r in rows) == int((b.labels_train > 0).sum())
    assert sum(int(r[2]) for r in rows) == int((b.labels_test > 0).sum())


def test_inspect_missing_bundle(tmp_path, capsys):
    code, _, err = run(capsys, "inspect", "--data", str(tmp_path / "none"))
    assert code == EXIT_INVALID
    assert "meta.json" in err


def test_threads_env_validated(monkeypatch, capsys, synth_dir):
    monkeypatch.setenv("PICNET_THREADS", "zero")
    code, _, err = run(capsys, "inspect", "--data", str(synth_dir))
    assert code == EXIT_INVALID
    assert "PICNET_THREADS" in err


def test_gradcheck_subcommand_via_entry_point():
    proc = subprocess.run([sys.executable, "-m", "picnet.cli", "gradcheck", "--seeds", "1"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.splitlines()
    assert lines[0].startswith("config ")
    listed = [line for line in lines if line.startswith(("PASS", "FAIL"))]
    assert listed and all(line.startswith("PASS") for line in listed)
    assert any("end_to_end" in line for line in listed)
