"""Checkpoint directory: one AFT1 file per parameter, ``manifest.txt`` and
``config.ini``.

Manifest lines are ``name<TAB>dims<TAB>dtype<TAB>file`` where dims is ``x``
separated (empty for scalars).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..numerics import aft1
from .config import PipelineConfig
from .model import Model

MANIFEST = "manifest.txt"
CONFIG = "config.ini"


class CheckpointError(ValueError):
    pass


def _file_name(name: str) -> str:
    return name.replace("/", "_") + ".aft1"


def save_checkpoint(model: Model, path, extra: dict[str, np.ndarray] | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {n: p.value for n, p in model.named_parameters().items()}
    tensors.update(extra or {})
    lines = []
    for name, value in tensors.items():
        fname = _file_name(name)
        code = aft1.default_code(value)
        aft1.save(out / fname, value, code)
        dims = "x".join(str(d) for d in np.shape(value))
        lines.append(f"{name}\t{dims}\t{aft1.CODE_NAMES[code]}\t{fname}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    (out / CONFIG).write_text(model.cfg.to_ini())
    return out


def read_manifest(path) -> list[tuple[str, tuple[int, ...], str, str]]:
    p = Path(path) / MANIFEST
    if not p.is_file():
        raise CheckpointError(f"no checkpoint manifest at {p}")
    rows = []
    for line in p.read_text().splitlines():
        if not line.strip():
            continue
        name, dims, dtype, fname = line.split("\t")
        shape = tuple(int(d) for d in dims.split("x")) if dims else ()
        rows.append((name, shape, dtype, fname))
    return rows


def load_tensors(path) -> dict[str, np.ndarray]:
    root = Path(path)
    out = {}
    for name, shape, _, fname in read_manifest(root):
        arr = aft1.load(root / fname)
        if arr.shape != shape:
            raise CheckpointError(f"{name}: manifest dims {shape} but file holds {arr.shape}")
        out[name] = arr
    return out


def load_checkpoint(path, dtype=None) -> Model:
    root = Path(path)
    if not (root / CONFIG).is_file():
        raise CheckpointError(f"no {CONFIG} in {root}")
    cfg = PipelineConfig.from_ini((root / CONFIG).read_text())
    tensors = load_tensors(root)
    params = tensors
    first = next(iter(params.values()))
    model = Model(cfg, dtype=dtype or first.dtype)
    named = model.named_parameters()
    missing = set(named) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in named.items():
        if params[name].shape != p.value.shape:
            raise CheckpointError(f"{name}: expected {p.value.shape}, found {params[name].shape}")
        p.value = params[name].astype(p.value.dtype)
    return model
