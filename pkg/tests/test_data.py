import numpy as np
import pytest
from PIL import Image as PilImage

from faceanim.data import (DatasetError, ImageDecodeError, load_image,
                           load_manifest, preprocess, sample_pair,
                           sample_pair_indices, save_manifest, scan_dataset,
                           write_blob_corpus)


def make_corpus(root, clips=3, frames=10, size=32):
    rng = np.random.default_rng(0)
    for c in range(clips):
        d = root / f"clip_{c:03d}"
        d.mkdir(parents=True)
        for t in range(frames):
            arr = (rng.random((size, size, 3)) * 255).astype(np.uint8)
            PilImage.fromarray(arr).save(d / f"frame_{t:06d}.png")
    return root


class TestScanDataset:
    def test_direct_enumeration(self, tmp_path):
        make_corpus(tmp_path, clips=3, frames=10)
        manifest = scan_dataset(tmp_path)
        assert len(manifest.clips) == 3
        assert all(c.frame_count == 10 for c in manifest.clips)
        assert [c.clip_id for c in manifest.clips] == sorted(
            c.clip_id for c in manifest.clips)

    def test_empty_root_fatal(self, tmp_path):
        with pytest.raises(DatasetError, match="no clips found"):
            scan_dataset(tmp_path)

    def test_missing_root_fatal(self, tmp_path):
        with pytest.raises(DatasetError):
            scan_dataset(tmp_path / "absent")

    def test_single_frame_clip_excluded(self, tmp_path):
        make_corpus(tmp_path, clips=2, frames=5)
        lone = tmp_path / "clip_lonely"
        lone.mkdir()
        PilImage.fromarray(np.zeros((8, 8, 3), np.uint8)).save(lone / "frame_000000.png")
        with pytest.warns(UserWarning, match="clip_lonely"):
            manifest = scan_dataset(tmp_path)
        assert len(manifest.clips) == 2

    def test_idempotent(self, tmp_path):
        make_corpus(tmp_path)
        a, b = scan_dataset(tmp_path), scan_dataset(tmp_path)
        assert [(c.clip_id, c.frame_count) for c in a.clips] == \
               [(c.clip_id, c.frame_count) for c in b.clips]

    def test_manifest_roundtrip(self, tmp_path):
        make_corpus(tmp_path)
        manifest = scan_dataset(tmp_path)
        save_manifest(manifest, tmp_path / "manifest.json")
        loaded = load_manifest(tmp_path / "manifest.json")
        assert [(c.clip_id, c.frame_count) for c in loaded.clips] == \
               [(c.clip_id, c.frame_count) for c in manifest.clips]


class TestSamplePair:
    def test_determinism_contract(self, tmp_path):
        make_corpus(tmp_path)
        manifest = scan_dataset(tmp_path)
        a = sample_pair(manifest, seed=7, step=13, target_size=64)
        b = sample_pair(manifest, seed=7, step=13, target_size=64)
        assert a.clip_id == b.clip_id
        assert (a.source_index, a.driving_index) == (b.source_index, b.driving_index)
        assert np.array_equal(a.source, b.source)

    def test_two_frame_clip_exhaustive_outcomes(self, tmp_path):
        make_corpus(tmp_path, clips=1, frames=2)
        manifest = scan_dataset(tmp_path)
        seen = set()
        for step in range(40):
            clip, i, j = sample_pair_indices(manifest, seed=0, step=step)
            assert i != j
            seen.add((i, j))
        assert seen == {(0, 1), (1, 0)}

    def test_clip_frequencies_uniform(self, tmp_path):
        make_corpus(tmp_path, clips=5, frames=3, size=8)
        manifest = scan_dataset(tmp_path)
        counts = {c.clip_id: 0 for c in manifest.clips}
        draws = 10000
        for step in range(draws):
            clip, _, _ = sample_pair_indices(manifest, seed=11, step=step)
            counts[clip.clip_id] += 1
        expected = draws / 5
        for clip_id, count in counts.items():
            assert abs(count - expected) <= 0.05 * expected, (clip_id, count)

    def test_empty_manifest_fatal(self, tmp_path):
        make_corpus(tmp_path, clips=1, frames=3)
        manifest = scan_dataset(tmp_path)
        manifest.clips = []
        with pytest.raises(DatasetError):
            sample_pair_indices(manifest, 0, 0)


class TestPreprocess:
    def test_noop_is_bit_identical(self):
        rng = np.random.default_rng(1)
        raw = rng.random((64, 64, 3)).astype(np.float32)
        out = preprocess(raw, 64)
        assert np.array_equal(out, raw)

    def test_center_crop_geometry(self):
        rng = np.random.default_rng(2)
        raw = rng.random((512, 384, 3)).astype(np.float32)
        out = preprocess(raw, 256)
        assert out.shape == (256, 256, 3)
        # the crop is rows 64:448 of the 512x384 input; corners must come
        # from inside that window, so compare against a manual crop+resize
        manual = preprocess(raw[64:448, :, :], 256)
        assert np.allclose(out, manual, atol=1e-7)

    def test_constant_input_preserved(self):
        raw = np.full((100, 80, 3), 0.37, dtype=np.float32)
        out = preprocess(raw, 64)
        assert np.abs(out - 0.37).max() < 1e-6

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(3)
        out = preprocess(rng.random((90, 120, 3)).astype(np.float32), 64)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_target_size(self):
        with pytest.raises(ValueError):
            preprocess(np.zeros((64, 64, 3), np.float32), 100)

    def test_decode_error_names_file(self, tmp_path):
        bad = tmp_path / "not_an_image.png"
        bad.write_text("definitely not a png")
        with pytest.raises(ImageDecodeError, match="not_an_image.png"):
            load_image(bad)


class TestBlobCorpus:
    def test_layout_is_scannable(self, tmp_path):
        write_blob_corpus(tmp_path / "data", num_clips=4, frames_per_clip=3, size=32)
        manifest = scan_dataset(tmp_path / "data")
        assert len(manifest.clips) == 4
        assert all(c.frame_count == 3 for c in manifest.clips)
        pair = sample_pair(manifest, seed=0, step=0, target_size=64)
        assert pair.source.shape == (64, 64, 3)

    def test_deterministic(self, tmp_path):
        write_blob_corpus(tmp_path / "a", num_clips=2, frames_per_clip=2, size=16, seed=5)
        write_blob_corpus(tmp_path / "b", num_clips=2, frames_per_clip=2, size=16, seed=5)
        a = load_image(tmp_path / "a" / "clip_000" / "frame_000000.png")
        b = load_image(tmp_path / "b" / "clip_000" / "frame_000000.png")
        assert np.array_equal(a, b)
