import csv
import json

import numpy as np
import pytest

from brimpr_lab import checkpoint as ckpt
from brimpr_lab.adapt import CSV_COLUMNS
from brimpr_lab.cli import main

QUICK = ["--pretrain-epochs", "1", "--n-train", "128", "--n-test", "64", "--seed", "4"]
STREAM = ["--n-batches", "6", "--batch-size", "8", "--schedule-a", "0@clean,3@gaussian-noise:5"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "model.bmpr"
    assert main(["pretrain", "--out", str(path), *QUICK]) == 0
    return path


def test_pretrain_json_and_extras(checkpoint, tmp_path, capsys):
    code, out, _ = run(capsys, "pretrain", "--out", str(tmp_path / "m.bmpr"), *QUICK)
    assert code == 0
    info = json.loads(out)
    assert 0.0 <= info["clean_accuracy"] <= 1.0
    named = ckpt.load_tensors(tmp_path / "m.bmpr")
    assert named["data/source/a"].shape[0] == 32
    assert {"task/separation", "task/noise", "task/task_seed"} <= named.keys()
    # same seed, same bytes
    assert (tmp_path / "m.bmpr").read_bytes() == checkpoint.read_bytes()


def test_adapt_writes_csv_and_summary(checkpoint, tmp_path, capsys):
    m, s = tmp_path / "m.csv", tmp_path / "s.json"
    code, out, _ = run(capsys, "adapt", str(checkpoint), *STREAM, "--metrics", str(m), "--summary", str(s))
    assert code == 0
    summary = json.loads(s.read_text())
    assert json.loads(out) == summary
    for key in ("acc_source_frozen", "acc_adapted", "mean_disc_first_20pct", "mean_disc_last_20pct", "shifts_detected"):
        assert key in summary
    rows = list(csv.reader(m.open()))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 7


def test_no_adapt_equals_frozen(checkpoint, capsys):
    code, out, _ = run(capsys, "adapt", str(checkpoint), *STREAM, "--no-adapt")
    s = json.loads(out)
    assert code == 0 and s["acc_adapted"] == s["acc_source_frozen"] and s["updates"] == 0


def test_adapt_metrics_are_byte_identical(checkpoint, tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(capsys, "adapt", str(checkpoint), *STREAM, "--metrics", str(a), "--continual")
    run(capsys, "adapt", str(checkpoint), *STREAM, "--metrics", str(b), "--continual")
    assert a.read_bytes() == b.read_bytes()


def test_save_prompts_keeps_frozen_weights(checkpoint, tmp_path, capsys):
    out = tmp_path / "adapted.bmpr"
    assert run(capsys, "adapt", str(checkpoint), *STREAM, "--save-prompts", str(out), "--lr", "0.01")[0] == 0
    before, after = ckpt.load_tensors(checkpoint), ckpt.load_tensors(out)
    for k in before:
        if k.startswith("model/"):
            np.testing.assert_array_equal(before[k], after[k])
    assert not np.array_equal(before["prompt/a/layer0"], after["prompt/a/layer0"])


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "adapt", str(tmp_path / "missing.bmpr"))[0] == 3
    bad = tmp_path / "bad.bmpr"
    bad.write_bytes(b"NOTMAGIC")
    assert run(capsys, "adapt", str(bad))[0] == 3
    assert run(capsys, "verify-theorem", "--trials", "10")[0] == 2
    assert run(capsys, "pretrain")[0] == 2
    assert run(capsys, "pretrain", "--out", str(tmp_path / "x"), "--lr", "abc")[0] == 2
    assert run(capsys, "bogus")[0] == 2


def test_verify_theorem_json(capsys):
    code, out, _ = run(capsys, "verify-theorem", "--d", "4", "--n", "11", "--trials", "2000", "--sigma", "random-psd")
    r = json.loads(out)
    assert code == 0 and r["pass"] and r["closed_form"]["frobenius_mse"] > 0


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "data.bmpr"
    code, text, _ = run(capsys, "gen-data", "--out", str(out), "--n-train", "10", "--n-test", "5", *STREAM)
    assert code == 0 and json.loads(text)["stream_batches"] == 6
    named = ckpt.load_tensors(out)
    assert named["data/train/a"].shape == (10, 8, 16)
    assert named["data/stream/y/00005"].shape == (8,)


def test_plot(checkpoint, tmp_path, capsys):
    m = tmp_path / "m.csv"
    run(capsys, "adapt", str(checkpoint), *STREAM, "--metrics", str(m), "--continual")
    code, out, _ = run(capsys, "plot", str(m), "--out-dir", str(tmp_path / "fig"))
    figs = json.loads(out)["figures"]
    assert code == 0 and len(figs) == 3
    for f in figs:
        assert open(f, "rb").read(8) == b"\x89PNG\r\n\x1a\n"
    assert run(capsys, "plot", str(tmp_path / "none.csv"))[0] == 3


def test_help_mentions_reference_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["pretrain", "--help"])
    text = capsys.readouterr().out
    assert "--mask-ratio" in text and "reference: 0.5" in text
