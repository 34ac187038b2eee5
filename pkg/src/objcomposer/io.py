"""NPY / PGM / JSON file helpers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np


def save_npy(path: str | Path, array: np.ndarray) -> None:
    """Little-endian, C-order NPY."""
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    np.save(path, np.ascontiguousarray(arr), allow_pickle=False)


def load_npy(path: str | Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """8-bit binary PGM (P5) from a 2-D uint8-compatible array."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    data = np.clip(img, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5, maxval <= 255) as a uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), offset = _pgm_tokens(buf, 3)
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset)
    return data.reshape(h, w).copy()


def read_mask(path: str | Path) -> np.ndarray:
    """Binary mask from a PGM (>= 128 is on) or an NPY (non-zero is on)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return (load_npy(path) != 0).astype(np.uint8)
    return (read_pgm(path) >= 128).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.uint8) * 255)


def load_image_latent(path: str | Path) -> np.ndarray:
    """NPY latent as stored, or a PGM mapped linearly to ``[-1, 1]`` as a 1-channel latent."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        z = np.asarray(load_npy(path), dtype=np.float64)
        return z[None] if z.ndim == 2 else z
    return (read_pgm(path).astype(np.float64) / 127.5 - 1.0)[None]


def latent_preview(z: np.ndarray) -> np.ndarray:
    """Channel 0 mapped from ``[-1, 1]`` to 8-bit grayscale."""
    return np.round((np.clip(z[0], -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_json_atomic(path: str | Path, doc) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
