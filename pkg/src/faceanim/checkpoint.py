"""Single-file checkpoint archive.

Layout: 8-byte magic, little-endian u32 manifest length, UTF-8 JSON
manifest, then the concatenated raw little-endian float32 blobs. The
manifest records {format_version, step, config, entries}, one entry per
tensor with name, dtype, shape, byte_offset (relative to the blob
section), byte_length, and crc32. Save -> load -> save is byte-identical.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"FANIMCK1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, step, config_dict, entries):
    """Write `entries` (ordered mapping name -> numpy/torch array) to `path`."""
    blobs = []
    manifest_entries = []
    offset = 0
    for name, array in entries.items():
        arr = np.ascontiguousarray(_to_numpy(array), dtype="<f4")
        raw = arr.tobytes()
        manifest_entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_length": len(raw),
            "crc32": zlib.crc32(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": config_dict,
        "entries": manifest_entries,
    }
    manifest_raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest_raw)))
        fh.write(manifest_raw)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read an archive; returns (step, config_dict, entries, manifest).

    Raises CheckpointError on bad magic, version mismatch, truncation,
    or any per-entry CRC failure.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad magic)")
    (manifest_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_end = len(MAGIC) + 4 + manifest_len
    if len(data) < header_end:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[len(MAGIC) + 4:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} "
            f"unsupported (expected {FORMAT_VERSION})")

    blob = data[header_end:]
    entries = {}
    for entry in manifest["entries"]:
        start, length = entry["byte_offset"], entry["byte_length"]
        if start + length > len(blob):
            raise CheckpointError(f"{path}: truncated blob for entry {entry['name']}")
        raw = blob[start:start + length]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum failure for entry {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        entries[entry["name"]] = arr
    return manifest["step"], manifest["config"], entries, manifest


def _to_numpy(array):
    if hasattr(array, "detach"):
        return array.detach().cpu().numpy()
    return np.asarray(array)
