"""Element precision modes and emulated binary16 rounding."""
from __future__ import annotations

import enum

import numpy as np


class Precision(str, enum.Enum):
    B32 = "b32"
    B64 = "b64"
    B16EMU = "b16emu"

    @property
    def dtype(self) -> np.dtype:
        # b16emu values live in binary32 storage
        return np.dtype(np.float64) if self is Precision.B64 else np.dtype(np.float32)


def round_b16(x) -> np.ndarray:
    """Round every element to the nearest-even IEEE binary16 value.

    The result keeps the input's floating dtype (binary32 for non-float
    input). Magnitudes above 65504 (after rounding) become +/-inf, tiny values
    land on binary16 subnormals or zero, and NaN/inf pass through.
    """
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.dtype == np.float16:
        arr = arr.astype(np.float32)
    with np.errstate(over="ignore"):
        # numpy converts float64 -> float16 with a single correctly rounded step
        return arr.astype(np.float16).astype(arr.dtype)


def as_precision(x, precision: Precision | str) -> np.ndarray:
    precision = Precision(precision)
    out = np.asarray(x, dtype=precision.dtype)
    if precision is Precision.B16EMU:
        out = round_b16(out)
    return out


def precision_of(x: np.ndarray) -> Precision:
    return Precision.B64 if np.asarray(x).dtype == np.float64 else Precision.B32
