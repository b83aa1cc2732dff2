"""AFT1 binary tensor container.

Layout: ``b"AFT1"``, u8 dtype code, u32 ndim, ndim x u64 extents, raw payload,
all little-endian. Codes: 0 = binary32, 1 = emulated binary16 (stored as
2-byte IEEE half), 2 = u8, 3 = binary64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFT1"

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f2"),
    2: np.dtype("u1"),
    3: np.dtype("<f8"),
}
CODE_NAMES = {0: "b32", 1: "b16emu", 2: "u8", 3: "b64"}
NAME_CODES = {v: k for k, v in CODE_NAMES.items()}


class AFT1Error(ValueError):
    pass


def default_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float64:
        return 3
    if arr.dtype in (np.uint8, np.bool_):
        return 2
    if arr.dtype == np.float16:
        return 1
    return 0


def encode(arr, code: int | None = None) -> bytes:
    arr = np.asarray(arr)
    code = default_code(arr) if code is None else code
    if code not in DTYPE_CODES:
        raise AFT1Error(f"unknown dtype code {code}")
    with np.errstate(over="ignore"):  # binary16 overflow saturates to inf by design
        payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code])
    header = MAGIC + struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + payload.tobytes()


def decode(buf: bytes) -> tuple[np.ndarray, int]:
    """Return ``(array, dtype_code)``. Half payloads come back as binary32."""
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise AFT1Error("not an AFT1 tensor (bad magic)")
    code, ndim = struct.unpack_from("<BI", buf, 4)
    if code not in DTYPE_CODES:
        raise AFT1Error(f"unknown dtype code {code}")
    off = 9
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - off != count * dt.itemsize:
        raise AFT1Error(f"payload holds {len(buf) - off} bytes, dims {dims} need {count * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    if code == 1:
        arr = arr.astype(np.float32)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), code


def save(path, arr, code: int | None = None) -> None:
    Path(path).write_bytes(encode(arr, code))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())[0]
