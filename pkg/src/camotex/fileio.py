"""Disk formats: PNG images, raw float64 depth maps, weight checkpoints.

All binary layouts are little-endian with fixed headers so files written on
one machine read back identically on another. Writes go through a temp file
and an atomic rename.
"""

import json
import os
import struct

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"DPTH"
CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_png(path, image):
    """Save a float image in [0,1] (HxW or HxWx3) as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def read_png(path):
    """Load a PNG back to float64 in [0,1]."""
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def write_depth(path, values, channels=0):
    """Raw float64 grid: magic 'DPTH', u32 height, width, reserved, then data.

    ``channels`` fills the reserved word; 0 marks a plain HxW depth map, a
    positive value marks an HxWxC float image stored in the same container.
    """
    arr = np.ascontiguousarray(values, dtype="<f8")
    if channels == 0:
        if arr.ndim != 2:
            raise ValueError(f"depth must be 2-d, got shape {arr.shape}")
        h, w = arr.shape
    else:
        if arr.ndim != 3 or arr.shape[2] != channels:
            raise ValueError(
                f"expected HxWx{channels} array, got shape {arr.shape}"
            )
        h, w = arr.shape[:2]
    header = DEPTH_MAGIC + struct.pack("<III", h, w, channels)
    _atomic_write(path, header + arr.tobytes())


def read_depth(path):
    """Inverse of write_depth; returns HxW or HxWxC float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file (bad magic)")
    h, w, channels = struct.unpack("<III", raw[4:16])
    count = h * w * max(channels, 1)
    if len(raw) - 16 < count * 8:
        raise ValueError(f"{path}: truncated depth payload")
    data = np.frombuffer(raw[16:], dtype="<f8", count=count)
    if channels == 0:
        return data.reshape(h, w).copy()
    return data.reshape(h, w, channels).copy()


def save_checkpoint(path, arrays):
    """Named float64 arrays: magic, version, count, then per-array records.

    Record layout: u32 name length, utf-8 name, u32 ndim, u32 dims, raw data.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # not ascontiguousarray: keeps 0-d shape
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        arrays[name] = arr.reshape(dims).copy()
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after last array")
    return arrays


def write_manifest(path, manifest):
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    _atomic_write(path, payload.encode("utf-8"))


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
