#!/usr/bin/env python3
"""
Tests for the command-line interface.
"""

import csv
import filecmp
import os

import numpy as np
import pytest

import imgproc
from cin import REGIONS, CinConfig, build_model
from data import save_checkpoint
from main import main
from phantom import SynthParams, synth_generate

TINY_RUN = ["--epochs", "1", "--max-steps", "1", "--batch-size", "4", "--image-size", "32", "--workers", "1"]


@pytest.fixture(autouse=True)
def output_root(monkeypatch, tmp_path):
    root = tmp_path / "runs"
    monkeypatch.setenv("PECINET_OUTPUT_ROOT", str(root))
    monkeypatch.setenv("PECINET_WORKERS", "1")
    return root


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(str(root), 3, 2, seed=0, params=SynthParams(image_size=32))
    return root


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(build_model(CinConfig(image_size=32)), str(path))
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_synth_is_reproducible(tmp_path):
    args = ["synth", "--patients", "2", "--frames", "2", "--size", "32", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(os.listdir(tmp_path / "a" / "images"))
    assert len(names) == 4
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b",
                                               ["manifest.jsonl"] + [f"images/{n}" for n in names],
                                               shallow=False)
    assert not mismatch and not errors


def test_synth_manifest_size(tmp_path):
    assert main(["synth", "--patients", "10", "--frames", "5", "--size", "32", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "manifest.jsonl") as f:
        assert len(f.read().splitlines()) == 50


def test_synth_rejects_bad_ambiguity(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--ambiguity", "1.5", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_preprocess_pipelines(tmp_path, dataset):
    image = dataset / "images" / "p000_f000.png"
    out = tmp_path / "pre"
    assert main(["preprocess", str(image), "--pipeline", "clahe", "--pipeline", "clahe,sharpen",
                 "--tiles", "2", "--out", str(out)]) == 0
    img = imgproc.read_gray_png(str(image))
    params = imgproc.ClaheParams(tiles_x=2, tiles_y=2, clip_limit=2.0)
    np.testing.assert_array_equal(imgproc.read_gray_png(str(out / "p000_f000_clahe.png")),
                                  imgproc.clahe(img, params))
    np.testing.assert_array_equal(imgproc.read_gray_png(str(out / "p000_f000_clahe+sharpen.png")),
                                  imgproc.laplacian_sharpen(imgproc.clahe(img, params)))


def test_preprocess_with_checkpoint(tmp_path, dataset, checkpoint):
    out = tmp_path / "pen"
    assert main(["preprocess", str(dataset / "images" / "p001_f000.png"),
                 "--checkpoint", str(checkpoint), "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["p001_f000_pen0.png", "p001_f000_pen1.png", "p001_f000_pen2.png",
                                       "p001_f000_pen_mean.png"]


def test_eval_writes_table(tmp_path, dataset, checkpoint):
    out = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset), "--split", "all",
                 "--name", "random", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["model", *REGIONS, "average"]
    assert rows[1][0] == "random"


def test_infer_with_ground_truth(tmp_path, dataset, checkpoint):
    out = tmp_path / "infer"
    assert main(["infer", str(dataset / "images" / "p000_f001.png"), "--checkpoint", str(checkpoint),
                 "--gt-root", str(dataset), "--out", str(out)]) == 0
    frame_dir = out / "p000_f001"
    for region in REGIONS:
        assert (frame_dir / f"{region}_mask.png").exists()
        assert (frame_dir / f"{region}_overlay.png").exists()


def test_gradcam_rejects_block_five(tmp_path, dataset, checkpoint):
    assert main(["gradcam", "--checkpoint", str(checkpoint), "--image", str(dataset / "images" / "p000_f000.png"),
                 "--block", "5", "--out", str(tmp_path)]) == 1


def test_gradcam_ranking(tmp_path, dataset, checkpoint):
    assert main(["gradcam", "--checkpoint", str(checkpoint), "--data", str(dataset), "--limit", "2",
                 "--block", "4", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "importance_bolus.csv")
    assert rows[0] == ["rank", "region", "importance"]
    assert sorted(r[1] for r in rows[1:]) == sorted(REGIONS)


def test_missing_checkpoint_returns_one(tmp_path, dataset):
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt"), "--data", str(dataset)]) == 1


def test_train_writes_outputs(tmp_path, dataset):
    out = tmp_path / "train"
    assert main(["train", "--data", str(dataset), "--output", str(out), *TINY_RUN]) == 0
    for name in ("run_config.json", "train_log.jsonl", "best.ckpt", "last.ckpt", "eval_test.csv"):
        assert (out / name).exists(), name
    assert read_csv(out / "eval_test.csv")[1][0] == "PECI-Net"


def test_ablate_stage_list(tmp_path, dataset):
    out = tmp_path / "ablate"
    assert main(["ablate", "stages", "--list", "1,2", "--data", str(dataset), "--output", str(out), *TINY_RUN]) == 0
    rows = read_csv(out / "ablate_stages.csv")
    assert [r[0] for r in rows[1:]] == ["S=1", "S=2"]


@pytest.mark.parametrize("command", ["eval", "infer"])
def test_threshold_out_of_range_is_a_usage_error(tmp_path, dataset, checkpoint, command):
    target = ["--data", str(dataset)] if command == "eval" else [str(dataset / "images" / "p000_f000.png")]
    with pytest.raises(SystemExit) as exc:
        main([command, *target, "--checkpoint", str(checkpoint), "--threshold", "1.5"])
    assert exc.value.code == 2


def test_bad_worker_count_returns_one(monkeypatch, dataset, checkpoint):
    monkeypatch.setenv("PECINET_WORKERS", "four")
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset)]) == 1
