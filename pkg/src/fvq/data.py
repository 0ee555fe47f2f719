"""Image sources: a seeded procedural generator and the raw IMGB format.

IMGB layout: magic ``IMGB``, four little-endian uint32 fields (count, H,
W, C), then count*H*W*C pixel bytes. The procedural generator composes
linear gradients with rectangles and disks so no dataset download is
needed; pixels land in [0, 255] as uint8.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"IMGB"


class DataError(ValueError):
    """Malformed image files or out-of-range pixel inputs."""


def generate_images(count: int, height: int, width: int, channels: int = 1,
                    seed: int = 0) -> np.ndarray:
    """Procedural dataset: per image a random oriented gradient plus two
    to four random shapes (axis-aligned rectangles and disks) at random
    intensities. Returns uint8 (count, H, W, C)."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys /= max(1, height - 1)
    xs /= max(1, width - 1)
    images = np.empty((count, height, width, channels), dtype=np.uint8)
    for i in range(count):
        img = np.zeros((height, width, channels))
        for c in range(channels):
            angle = rng.uniform(0, 2 * np.pi)
            lo, hi = np.sort(rng.uniform(0.0, 1.0, size=2))
            ramp = np.cos(angle) * xs + np.sin(angle) * ys
            ramp = (ramp - ramp.min()) / max(ramp.ptp(), 1e-12)
            img[:, :, c] = lo + (hi - lo) * ramp
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            ry = rng.uniform(height * 0.1, height * 0.45)
            rx = rng.uniform(width * 0.1, width * 0.45)
            value = rng.uniform(0.0, 1.0, size=channels)
            if rng.random() < 0.5:
                mask = (np.abs(ys * (height - 1) - cy) < ry) & \
                       (np.abs(xs * (width - 1) - cx) < rx)
            else:
                mask = (((ys * (height - 1) - cy) / ry) ** 2 +
                        ((xs * (width - 1) - cx) / rx) ** 2) < 1.0
            blend = rng.uniform(0.5, 1.0)
            img[mask] = (1 - blend) * img[mask] + blend * value
        images[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return images


def save_imgb(path, images: np.ndarray) -> None:
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DataError("expected uint8 images shaped (count, H, W, C)")
    count, h, w, c = images.shape
    data = MAGIC + struct.pack("<IIII", count, h, w, c) + images.tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.fspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, os.fspath(path))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_imgb(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError("bad magic bytes; not an IMGB file")
    if len(blob) < 20:
        raise DataError("truncated IMGB header")
    count, h, w, c = struct.unpack_from("<IIII", blob, 4)
    need = count * h * w * c
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=20)
    if pixels.size != need:
        raise DataError(f"IMGB payload has {pixels.size} bytes, header promises {need}")
    return pixels.reshape(count, h, w, c).copy()


def to_float(images: np.ndarray) -> np.ndarray:
    """uint8 pixels to float64 in [0, 1], validating the range."""
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0
    arr = np.asarray(images, dtype=np.float64)
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise DataError("float images must be finite and within [0, 1]")
    return arr


def batch_indices(n_total: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic per-step batch sampling; stateless so a resumed run
    draws the identical sequence."""
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n_total, size=batch_size)
