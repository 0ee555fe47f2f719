"""Tensor stream format used by checkpoints and codebook exports.

Layout: magic bytes ``FVQ1``, then per tensor a little-endian uint32
header length, a UTF-8 JSON header ``{"name", "dtype", "shape"}`` with
dtype ``"f32"`` or ``"f64"``, and the raw little-endian values. The
round trip is byte-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"FVQ1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Raised when a tensor stream fails structural integrity checks."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64"
    if arr.dtype == np.float32:
        return "f32"
    raise CheckpointError(f"unsupported dtype {arr.dtype}; use f32 or f64")


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays in insertion order."""
    chunks = [MAGIC]
    for name, arr in tensors.items():
        tag = _dtype_tag(arr)
        header = json.dumps(
            {"name": name, "dtype": tag, "shape": list(arr.shape)},
            separators=(",", ":"),
        ).encode("utf-8")
        chunks.append(struct.pack("<I", len(header)))
        chunks.append(header)
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(chunks)


def parse_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes; not a tensor stream")
    out: dict[str, np.ndarray] = {}
    pos = 4
    n = len(blob)
    while pos < n:
        if pos + 4 > n:
            raise CheckpointError("truncated stream: header length cut off")
        (hlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + hlen > n:
            raise CheckpointError("truncated stream: header cut off")
        try:
            header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
            name, tag, shape = header["name"], header["dtype"], header["shape"]
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"corrupt tensor header: {exc}") from exc
        pos += hlen
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > n:
            raise CheckpointError(f"truncated stream: values for {name!r} cut off")
        out[name] = np.frombuffer(blob[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename) into the target directory."""
    path = os.fspath(path)
    data = dump_tensors(tensors)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(os.fspath(path), "rb") as fh:
        return parse_tensors(fh.read())


def encode_text(text: str) -> np.ndarray:
    """UTF-8 bytes as an f64 vector, for embedding text in a tensor stream."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
