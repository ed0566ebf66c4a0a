"""Dataset discovery, deterministic pair sampling, and preprocessing.

Layout: <root>/<clip_id>/frame_*.png (or .jpg), frames pre-cropped to
faces, lexicographic filename order = temporal order. Pair sampling is a
pure function of (manifest, seed, step) via counter-derived RNG streams,
so any number of samplers can run concurrently without coordination.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PilImage, UnidentifiedImageError

FRAME_EXTENSIONS = (".png", ".jpg", ".jpeg")
VALID_SIZES = (64, 128, 256)


class DatasetError(RuntimeError):
    pass


class ImageDecodeError(RuntimeError):
    pass


@dataclass
class ClipRecord:
    clip_id: str
    frame_dir: Path
    frame_count: int


@dataclass
class DatasetManifest:
    root: Path
    clips: list

    def __len__(self):
        return len(self.clips)


@dataclass
class FramePair:
    source: np.ndarray
    driving: np.ndarray
    clip_id: str
    source_index: int
    driving_index: int


def _frame_files(clip_dir):
    files = [p for p in sorted(clip_dir.iterdir())
             if p.suffix.lower() in FRAME_EXTENSIONS]
    good = []
    for p in files:
        try:
            with PilImage.open(p) as im:
                im.verify()
            good.append(p)
        except (UnidentifiedImageError, OSError):
            warnings.warn(f"skipping undecodable frame {p}")
    return good


def scan_dataset(root):
    """Build a manifest with one record per clip directory holding >= 2
    decodable frames, ordered by clip_id."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    clips = []
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = _frame_files(clip_dir)
        if len(frames) < 2:
            warnings.warn(f"clip {clip_dir.name} has {len(frames)} frame(s), "
                          "need at least 2; skipped")
            continue
        clips.append(ClipRecord(clip_id=clip_dir.name, frame_dir=clip_dir,
                                frame_count=len(frames)))
    if not clips:
        raise DatasetError(f"no clips found under {root}")
    return DatasetManifest(root=root, clips=clips)


def save_manifest(manifest, path):
    payload = {"root": str(manifest.root),
               "clips": [{"clip_id": c.clip_id,
                          "path": str(c.frame_dir.relative_to(manifest.root)),
                          "frame_count": c.frame_count}
                         for c in manifest.clips]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_manifest(path):
    payload = json.loads(Path(path).read_text())
    root = Path(payload["root"])
    clips = [ClipRecord(clip_id=c["clip_id"], frame_dir=root / c["path"],
                        frame_count=c["frame_count"])
             for c in payload["clips"]]
    return DatasetManifest(root=root, clips=clips)


def load_image(path):
    """Decode a frame to float32 (H, W, 3) in [0, 1]."""
    try:
        with PilImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr


def preprocess(raw, target_size):
    """Center-crop to square, bilinear-resize to target, keep [0, 1].

    A raw frame already at target size passes through bit-identically.
    """
    if target_size not in VALID_SIZES:
        raise ValueError(f"target_size must be one of {VALID_SIZES}")
    h, w = raw.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    cropped = raw[top:top + side, left:left + side]
    if side == target_size:
        return np.clip(cropped, 0.0, 1.0)
    t = torch.from_numpy(np.ascontiguousarray(cropped)).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(target_size, target_size), mode="bilinear",
                      align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).numpy()


def _pair_rng(seed, step):
    digest = hashlib.sha256(f"pair:{seed}:{step}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_pair_indices(manifest, seed, step):
    """Deterministically pick (clip, source_index, driving_index)."""
    if not manifest.clips:
        raise DatasetError("cannot sample from an empty manifest")
    rng = _pair_rng(seed, step)
    clip = manifest.clips[int(rng.integers(len(manifest.clips)))]
    n = clip.frame_count
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return clip, i, j


def sample_pair(manifest, seed, step, target_size=64):
    """Load one (source, driving) pair; pure function of (manifest, seed, step)."""
    clip, i, j = sample_pair_indices(manifest, seed, step)
    frames = _frame_files(clip.frame_dir)
    source = preprocess(load_image(frames[i]), target_size)
    driving = preprocess(load_image(frames[j]), target_size)
    return FramePair(source=source, driving=driving, clip_id=clip.clip_id,
                     source_index=i, driving_index=j)


def pair_to_tensors(pair):
    src = torch.from_numpy(pair.source).permute(2, 0, 1)
    drv = torch.from_numpy(pair.driving).permute(2, 0, 1)
    return src, drv


def write_blob_corpus(root, num_clips=10, frames_per_clip=5, size=64, seed=0):
    """Synthetic moving-blob video corpus for desk-scale runs.

    Each clip is a soft colored blob translating across a fixed gradient
    background; 8-bit PNGs named frame_%06d.png.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    background = np.stack([0.2 + 0.3 * xs / size,
                           0.2 + 0.3 * ys / size,
                           0.35 * np.ones_like(xs, dtype=float)], axis=-1)
    for c in range(num_clips):
        clip_dir = root / f"clip_{c:03d}"
        clip_dir.mkdir(exist_ok=True)
        color = 0.5 + 0.5 * rng.random(3)
        start = size * (0.25 + 0.2 * rng.random(2))
        stop = size * (0.55 + 0.2 * rng.random(2))
        radius = size * (0.10 + 0.05 * rng.random())
        for t in range(frames_per_clip):
            alpha = t / max(frames_per_clip - 1, 1)
            cx, cy = start + alpha * (stop - start)
            blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * radius ** 2))
            frame = background + blob[..., None] * (color - background)
            frame8 = (np.clip(frame, 0, 1) * 255).round().astype(np.uint8)
            PilImage.fromarray(frame8).save(clip_dir / f"frame_{t:06d}.png")
    return root
