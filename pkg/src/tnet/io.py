"""File formats: TNS1 tensors, binary PGM masks, JSON helpers."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNS1"


class FormatError(ValueError):
    pass


def encode_tns(array) -> bytes:
    arr = np.asarray(array)
    shape = arr.shape
    header = MAGIC + struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tns(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated TNS1 header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    off = 8 + 4 * rank
    if len(blob) < off:
        raise FormatError("truncated TNS1 extents")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != off + 4 * count:
        raise FormatError(f"TNS1 payload has {len(blob) - off} bytes, expected {4 * count} for shape {shape}")
    return np.frombuffer(blob, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def write_tns(path, array) -> None:
    Path(path).write_bytes(encode_tns(array))


def read_tns(path) -> np.ndarray:
    return decode_tns(Path(path).read_bytes())


def encode_pgm(image) -> bytes:
    """Binary P5 with maxval 255. ``image`` must already be uint8-ranged."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-d image, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def _pgm_tokens(blob: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(int(blob[start:pos]))
    return tokens, pos + 1


def decode_pgm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    (w, h, maxval), start = _pgm_tokens(blob, 3)
    if maxval != 255:
        raise FormatError(f"PGM maxval must be 255, got {maxval}")
    data = blob[start : start + w * h]
    if len(data) != w * h:
        raise FormatError("truncated PGM raster")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_mask_pgm(path, mask) -> None:
    Path(path).write_bytes(encode_pgm(np.asarray(mask, dtype=np.uint8) * 255))


def read_mask_pgm(path) -> np.ndarray:
    """Foreground is any value >= 128."""
    return (decode_pgm(Path(path).read_bytes()) >= 128).astype(np.uint8)


def map_preview(values) -> np.ndarray:
    return np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
