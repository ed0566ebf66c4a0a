import json

import numpy as np
import pytest
from PIL import Image as PilImage

from faceanim.cli import main
from faceanim.data import write_blob_corpus

TINY = """
image_size = 64
batch_size = 2
total_steps = 2
seed = 5
block_expansion = 8
max_features = 32
encoder_expansion = 4
ray_samples = 4
color_channels = 8
mlp_hidden = 16
disc_base = 8
disc_blocks = 3
num_keypoints = 5
"""


@pytest.fixture()
def corpus(tmp_path):
    return write_blob_corpus(tmp_path / "data", num_clips=3, frames_per_clip=3,
                             size=64, seed=1)


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_scan_success(corpus, tmp_path, capsys):
    out = tmp_path / "scan_out"
    assert main(["scan", str(corpus), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    assert (out / "config_echo.cfg").exists()
    assert "3 clips" in capsys.readouterr().out


def test_scan_missing_root(tmp_path, capsys):
    assert main(["scan", str(tmp_path / "absent")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    assert main(["scan", ".", "--frobnicate"]) == 1


def test_unknown_command_rejected(capsys):
    assert main(["transmogrify"]) == 1


def test_train_lambda_simplex_violation(corpus, tmp_path, capsys):
    rc = main(["train", str(corpus), "--out", str(tmp_path / "run"),
               "--steps", "1", "--lambda-rgb", "0.4", "--lambda-depth", "0.25",
               "--lambda-normal", "0.25"])
    assert rc == 1
    assert "simplex" in capsys.readouterr().err


def test_train_animate_evaluate_pipeline(corpus, tiny_cfg, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", str(corpus), "--out", str(run),
                 "--config", str(tiny_cfg)]) == 0
    assert (run / "checkpoint.bin").exists()
    assert (run / "config_echo.cfg").exists()
    log_lines = (run / "train_log.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 2
    assert "score_rgb_real" in json.loads(log_lines[0])

    source = corpus / "clip_000" / "frame_000000.png"
    driving_dir = corpus / "clip_001"
    anim_out = tmp_path / "anim"
    assert main(["animate", str(run / "checkpoint.bin"), str(source),
                 str(driving_dir), "--out", str(anim_out), "--mode", "absolute",
                 "--dump-keypoints"]) == 0
    frames = sorted(anim_out.glob("frame_*.png"))
    assert len(frames) == 3  # one output per driving frame
    dump = json.loads((anim_out / "keypoints.json").read_text())
    assert len(dump) == 3 and len(dump[0]["positions"]) == 5

    eval_out = tmp_path / "eval"
    assert main(["evaluate", str(anim_out), str(driving_dir),
                 "--out", str(eval_out)]) == 0
    report = json.loads((eval_out / "metrics.json").read_text())
    assert "l1" in report["metrics"] and "l1_255" in report["metrics"]
    assert report["backends"]["ssim"] == "builtin"


def test_animate_empty_driving(corpus, tiny_cfg, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", str(corpus), "--out", str(run),
                 "--config", str(tiny_cfg), "--steps", "1"]) == 0
    empty = tmp_path / "empty_driving"
    empty.mkdir()
    rc = main(["animate", str(run / "checkpoint.bin"),
               str(corpus / "clip_000" / "frame_000000.png"),
               str(empty), "--out", str(tmp_path / "anim")])
    assert rc == 1
    assert "empty driving" in capsys.readouterr().err


def test_evaluate_count_mismatch(corpus, tmp_path):
    rc = main(["evaluate", str(corpus / "clip_000"), str(tmp_path),
               "--out", str(tmp_path / "eval")])
    assert rc == 1


def test_geometry_command_writes_maps(corpus, tmp_path):
    out = tmp_path / "geo"
    image = corpus / "clip_000" / "frame_000001.png"
    assert main(["geometry", str(image), "--out", str(out), "--size", "64"]) == 0
    with PilImage.open(out / "depth.png") as depth:
        assert depth.mode.startswith("I")
        assert depth.size == (64, 64)
    with PilImage.open(out / "normal.png") as normal:
        arr = np.asarray(normal)
    assert arr.shape == (64, 64, 3)
    # mostly flat luminance surface: normals near (0,0,1) encode to ~(128,128,255)
    assert arr[..., 2].mean() > 200


def test_geometry_external_backend_missing_weights(corpus, tmp_path, capsys):
    rc = main(["geometry", str(corpus / "clip_000" / "frame_000000.png"),
               "--out", str(tmp_path / "geo"), "--geometry-backend", "external",
               "--geometry-weights", str(tmp_path / "none.pt")])
    assert rc == 1
    assert "TorchScript" in capsys.readouterr().err


def test_render_test_passes(capsys, tmp_path):
    assert main(["render-test"]) == 0
    out = capsys.readouterr().out
    assert "max-error" in out and "PASS" in out

    dump_dir = tmp_path / "dump"
    assert main(["render-test", "--dump-transmittance", "--out", str(dump_dir)]) == 0
    csv = (dump_dir / "transmittance.csv").read_text().splitlines()
    assert csv[0].startswith("pixel,tau_1")
    assert len(csv) == 17


def test_config_echo_roundtrip(corpus, tiny_cfg, tmp_path):
    run1 = tmp_path / "run1"
    assert main(["train", str(corpus), "--out", str(run1),
                 "--config", str(tiny_cfg)]) == 0
    # re-running with the echoed config reproduces the artifacts
    run2 = tmp_path / "run2"
    assert main(["train", str(corpus), "--out", str(run2),
                 "--config", str(run1 / "config_echo.cfg")]) == 0
    ck1 = (run1 / "checkpoint.bin").read_bytes()
    ck2 = (run2 / "checkpoint.bin").read_bytes()
    assert ck1 == ck2
