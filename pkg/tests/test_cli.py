import csv
import json

import numpy as np
import pytest
from PIL import Image

from cs3d import cli

SMALL_DATA = ["--n-per-class", "3", "--size", "32", "--bins", "4"]


def run(tmp_path, *argv, out="run"):
    return cli.main(["--out", str(tmp_path / out), *argv])


def manifest(tmp_path, out="run"):
    return json.loads((tmp_path / out / "manifest.json").read_text())


def write_frames(d, frames):
    d.mkdir()
    for i, f in enumerate(frames):
        Image.fromarray(np.uint8(np.round(f * 255))).save(d / f"{i:03d}.png")


def test_convert_missing_input_is_usage_error(tmp_path, capsys):
    assert run(tmp_path, "convert", "--input", str(tmp_path / "nope")) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "does not exist" in err
    assert run(tmp_path, "convert") == 2


def test_unknown_command_and_bad_seed(tmp_path):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["--seed", "-1", "profile"]) == 2


def test_convert_identical_frames_gives_no_events(tmp_path):
    write_frames(tmp_path / "frames", [np.full((8, 8), 0.5)] * 4)
    assert run(tmp_path, "convert", "--input", str(tmp_path / "frames")) == 0
    assert (tmp_path / "run" / "events.csv").read_text() == "t_us,x,y,p\n"
    m = manifest(tmp_path)
    assert m["subcommand"] == "convert" and m["artifacts"] == ["events.csv"]


def test_convert_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    write_frames(tmp_path / "frames", rng.random((5, 12, 10)))
    for out in ("a", "b"):
        args = ["convert", "--input", str(tmp_path / "frames"), "--bins", "3", "--resize", "8,8"]
        assert run(tmp_path, *args, out=out) == 0
    for name in ("events.csv", "voxels.tnsr"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
    assert len(a) > 0
    assert (tmp_path / "a" / "events.csv").read_text().count("\n") > 1


def test_convert_bad_crop_fails_with_stage(tmp_path, capsys):
    write_frames(tmp_path / "frames", [np.zeros((4, 4)), np.ones((4, 4))])
    assert run(tmp_path, "convert", "--input", str(tmp_path / "frames"), "--crop", "2,2,8,8") == 1
    assert "read frames" in capsys.readouterr().err


def test_synth_then_train_from_manifest(tmp_path):
    assert run(tmp_path, "--seed", "3", "synth", *SMALL_DATA, out="data") == 0
    assert (tmp_path / "data" / "dataset.csv").is_file()
    assert len(list((tmp_path / "data" / "events").iterdir())) == 12
    code = run(tmp_path, "train", "--data", str(tmp_path / "data" / "dataset.csv"), "--size", "32", "--bins", "4",
               "--epochs", "1", "--batch-size", "4")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "run" / "history.csv")))
    assert len(rows) == 1


def test_train_zero_epochs(tmp_path):
    assert run(tmp_path, "train", *SMALL_DATA, "--epochs", "0") == 0
    assert (tmp_path / "run" / "history.csv").read_text() == "epoch,train_loss,eval_accuracy\n"
    m = manifest(tmp_path)
    assert {"history.csv", "model.ckpt", "config.yaml", "metrics.csv"} <= set(m["artifacts"])
    assert m["config"]["train"]["epochs"] == 0


def test_train_eval_roundtrip_and_determinism(tmp_path):
    args = ["--seed", "5", "train", *SMALL_DATA, "--epochs", "2", "--batch-size", "3", "--lr", "1e-3"]
    assert run(tmp_path, *args, out="a") == 0
    assert run(tmp_path, *args, out="b") == 0
    for name in ("history.csv", "model.ckpt", "metrics.csv", "config.yaml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    code = cli.main(["--config", str(tmp_path / "a" / "config.yaml"), "--seed", "5", "--out", str(tmp_path / "e"),
                     "eval", "--checkpoint", str(tmp_path / "a" / "model.ckpt")])
    assert code == 0
    assert (tmp_path / "e" / "metrics.csv").read_text() == (tmp_path / "a" / "metrics.csv").read_text()


def test_eval_untrained_is_near_chance(tmp_path):
    assert run(tmp_path, "eval", "--all", "--bins", "4") == 0
    acc = float((tmp_path / "run" / "metrics.csv").read_text().splitlines()[0].split(",")[1])
    # 200 balanced samples, 4 classes: three binomial standard deviations is about 0.09
    assert abs(acc - 0.25) <= 0.1


def test_train_geometry_too_small_names_stage(tmp_path, capsys):
    assert run(tmp_path, "train", "--n-per-class", "3", "--size", "16", "--bins", "4", "--epochs", "1") == 1
    assert "build model" in capsys.readouterr().err


def test_train_empty_split_names_stage(tmp_path, capsys):
    assert run(tmp_path, "train", "--n-per-class", "2", "--size", "32", "--bins", "4", "--epochs", "1") == 1
    assert "load data" in capsys.readouterr().err


def test_train_bad_lr_is_usage_error(tmp_path):
    assert run(tmp_path, "train", *SMALL_DATA, "--lr", "-1") == 2


def test_eval_missing_checkpoint(tmp_path):
    assert run(tmp_path, "eval", "--checkpoint", str(tmp_path / "missing.ckpt")) == 2


@pytest.mark.parametrize("flag", ["--no-ssn", "--no-factorized", "--no-temporal-attn", "--no-spatial-attn"])
def test_ablation_flags(tmp_path, flag):
    assert run(tmp_path, "profile", "--input-shape", "2,16,32,32", flag, "--format", "csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "run" / "profile.csv")))
    kinds = {r["kind"] for r in rows}
    if flag == "--no-ssn":
        assert "ssn" not in kinds
    if flag == "--no-factorized":
        assert "conv_depthwise" not in kinds


def test_profile_default_table(tmp_path, capsys):
    assert run(tmp_path, "profile") == 0
    text = capsys.readouterr().out
    assert "params:" in text and "FLOPs (G):" in text and "Energy" not in text


def test_profile_compare_two_rows(tmp_path, capsys):
    assert run(tmp_path, "profile", "--compare", "c3d,cs3d", "--format", "csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "run" / "compare.csv")))
    assert [r["model"] for r in rows] == ["c3d", "cs3d"]
    assert float(rows[1]["flops_g"]) < float(rows[0]["flops_g"])
    assert capsys.readouterr().out == (tmp_path / "run" / "compare.csv").read_text()


def test_profile_with_trace(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("t_s,watts\n0.0,10\n0.5,10\n1.0,10\n")
    assert run(tmp_path, "profile", "--input-shape", "2,16,32,32", "--trace", str(tmp_path / "p.csv"),
               "--device", "bench") == 0
    assert "Energy (mJ): 10.0 × 10³ [bench]" in capsys.readouterr().out


def test_profile_unknown_model(tmp_path):
    assert run(tmp_path, "profile", "--compare", "c3d,vgg") == 2


def test_gradcheck_passes(tmp_path, capsys):
    assert run(tmp_path, "gradcheck") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 14
    rows = list(csv.DictReader(open(tmp_path / "run" / "gradcheck.csv")))
    assert all(r["passed"] == "1" for r in rows)


def test_gradcheck_failure_exits_1(tmp_path):
    # a tolerance no finite difference can meet
    assert run(tmp_path, "gradcheck", "--cases", "linear", "--tol", "1e-30") == 1
    assert (tmp_path / "run" / "manifest.json").is_file()


def test_gradcheck_unknown_case(tmp_path):
    assert run(tmp_path, "gradcheck", "--cases", "fft") == 2


def test_bad_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text("optimizer: {lr: 1}\n")
    assert cli.main(["--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "r"), "profile"]) == 2
    assert cli.main(["--config", str(tmp_path / "none.yaml"), "profile"]) == 2
