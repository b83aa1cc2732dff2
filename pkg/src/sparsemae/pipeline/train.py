"""AdamW training loop with linear warmup and cosine decay."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..diagnostics import effective_rank
from ..masking import make_mask
from ..numerics.tape import Parameter, Tape
from .checkpoint import save_checkpoint
from .config import PipelineConfig
from .data import SyntheticData
from .model import Model, encode, forward


class NonFiniteError(FloatingPointError):
    def __init__(self, step: int, message: str, dump_path: Path | None = None):
        super().__init__(f"step {step}: {message}" + (f" (diagnostics in {dump_path})" if dump_path else ""))
        self.step = step
        self.dump_path = dump_path


def lr_at(step: int, cfg: PipelineConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``warmup_steps`` (step 0 gets
    ``lr / warmup_steps``), then cosine decay to zero at ``cfg.steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay. Decay applies to matrices only;
    biases, norms, scalars and the mask token are left alone."""

    def __init__(self, params: list[Parameter], beta1=0.883, beta2=0.935, eps=1e-8, weight_decay=0.05):
        self.params = params
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.value.ndim >= 2:
                update = update + self.wd * p.value
            p.value -= (lr * update).astype(p.value.dtype)


def step_masks(cfg: PipelineConfig, step: int, batch: int, seed: int) -> list:
    """Masks for one training step; mask ``i`` depends only on ``(seed, step, i)``."""
    perlin = {}
    if cfg.mask_strategy == "perlin":
        perlin = dict(octaves=cfg.perlin_octaves, base_freq=cfg.perlin_base_freq, persistence=cfg.perlin_persistence)
    seeds = np.random.SeedSequence([seed, step]).generate_state(batch)
    return [make_mask(cfg.mask_strategy, (cfg.grid, cfg.grid), cfg.mask_ratio, int(s), cfg.patch, **perlin) for s in seeds]


def stage_ranks(model: Model, images) -> list[float]:
    """Normalised effective rank of every encoder stage on unmasked images."""
    cfg = model.cfg
    empty = [np.zeros((cfg.grid, cfg.grid), dtype=bool)] * len(images)
    stages = encode(model, Tape(), images, empty)
    return [effective_rank(s.feats.value) for s in stages]


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    def final(self, key: str):
        for row in reversed(self.metrics):
            if row.get(key) not in (None, ""):
                return row[key]
        return None


def _dump(out_dir: Path | None, step: int, model: Model, loss: float) -> Path | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nonfinite_step{step}.txt"
    lines = [f"step {step}", f"loss {loss!r}", "name\tvalue_finite\tvalue_finite_absmax\tgrad_finite\tgrad_finite_absmax"]
    def absmax(a):
        finite = np.abs(a[np.isfinite(a)])
        return float(finite.max()) if finite.size else float("nan")

    for name, p in model.named_parameters().items():
        g = p.grad if p.grad is not None else np.zeros(1)
        lines.append(f"{name}\t{np.isfinite(p.value).all()}\t{absmax(p.value):.4g}\t{np.isfinite(g).all()}\t{absmax(g):.4g}")
    path.write_text("\n".join(lines) + "\n")
    return path


def train(cfg: PipelineConfig, data=None, out_dir=None, steps: int | None = None, eval_images=None,
          dtype=np.float32, log: Callable[[dict], None] | None = None, model: Model | None = None,
          masks=None) -> TrainResult:
    """Train from scratch (or continue ``model``) and return the model and
    per-step metrics. With ``out_dir`` the metrics CSV and a checkpoint are
    written there. Raises :class:`NonFiniteError` on a non-finite loss or
    gradient after writing a diagnostic dump.

    ``masks`` overrides the per-step mask draw: either a list reused every
    step or a callable ``(step, batch) -> list``.
    """
    steps = cfg.steps if steps is None else steps
    data = SyntheticData(cfg.image_size, cfg.seed, cfg.channels) if data is None else data
    model = Model(cfg, dtype=dtype) if model is None else model
    params = model.parameters()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if eval_images is None and cfg.rank_every > 0:
        eval_images = SyntheticData(cfg.image_size, cfg.seed + 10_000, cfg.channels).batch(0, 4)
    n_stages = len(cfg.stages)
    result = TrainResult(model)
    for step in range(steps):
        images = data.batch(step, cfg.batch_size)
        if masks is None:
            step_mask = step_masks(cfg, step, len(images), cfg.seed)
        else:
            step_mask = masks(step, len(images)) if callable(masks) else masks
        tape = Tape()
        for p in params:
            p.zero_grad()
        res = forward(model, tape, images, step_mask)
        loss = float(res.loss.value)
        if not np.isfinite(loss):
            raise NonFiniteError(step, f"loss is {loss}", _dump(out, step, model, loss))
        tape.backward(res.loss)
        if not all(np.isfinite(p.grad).all() for p in params if p.grad is not None):
            raise NonFiniteError(step, "non-finite gradient", _dump(out, step, model, loss))
        lr = lr_at(step, cfg)
        opt.step(lr)
        row = {"step": step, "loss": loss, "main_loss": float(res.main_loss.value),
               "aux_loss": "" if res.aux_loss is None else float(res.aux_loss.value), "lr": lr}
        last = step == steps - 1
        for i in range(n_stages):
            row[f"r_hat_stage{i}"] = ""
        if cfg.rank_every > 0 and (step % cfg.rank_every == 0 or last):
            for i, r in enumerate(stage_ranks(model, eval_images)):
                row[f"r_hat_stage{i}"] = r
        result.metrics.append(row)
        if log is not None:
            log(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(result.metrics, out / "metrics.csv")
        result.checkpoint = save_checkpoint(model, out / "checkpoint")
    return result


def write_metrics(rows: list[dict], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def masked_mse(model: Model, images, masks) -> float:
    """Main-head masked-patch MSE without recording gradients."""
    return float(forward(model, Tape(), images, masks).main_loss.value)
