"""Binary PGM (P5) and PPM (P6) read/write for previews."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linearly map ``[lo, hi]`` (default: data range) to 0..255."""
    if np.asarray(img).dtype == np.bool_:
        return np.asarray(img).astype(np.uint8) * 255
    a = np.asarray(img, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.clip(np.round((a - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> Path:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got dims {a.shape}")
    if a.dtype != np.uint8:
        a = to_u8(a)
    path = Path(path)
    path.write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())
    return path


def write_ppm(path, rgb: np.ndarray) -> Path:
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError(f"PPM needs an (H, W, 3) uint8 array, got {a.dtype} {a.shape}")
    path = Path(path)
    path.write_bytes(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + np.ascontiguousarray(a).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM with maxval 255."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode())
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"unsupported pixmap header {fields}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos + 1)
    return pixels.reshape((h, w) if magic == "P5" else (h, w, 3)).copy()
