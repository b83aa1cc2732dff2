"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tape import Node, Parameter, Tape


@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float
    passed: bool
    message: str = ""
    names: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{n}={e:.2e}" for n, e in zip(self.names, self.errors))
        return f"[{status}] max rel err {self.max_error:.3e} (tol {self.tol:.0e}) {parts} {self.message}".rstrip()


ZERO_GRAD = 1e-10  # gradients below this magnitude count as exact zeros carrying round-off


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes
    (floored at ``ZERO_GRAD``)."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if diff == 0.0:
        return 0.0
    return float(diff / max(denom, ZERO_GRAD))


def _scalar(out) -> float:
    v = out.value if isinstance(out, Node) else np.asarray(out)
    if v.size != 1:
        raise ValueError(f"program must be scalar-valued, got dims {v.shape}")
    return float(v.reshape(()))


def _numeric(evaluate: Callable[[], float], x: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi_x = flat[i]
        f_hi = evaluate()
        flat[i] = orig - step
        lo_x = flat[i]
        f_lo = evaluate()
        flat[i] = orig
        # realised step, so exactly representable perturbations give exact slopes
        gflat[i] = (f_hi - f_lo) / (hi_x - lo_x)
    return grad


def grad_check(
    fn: Callable[..., Node],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(tape, *nodes)`` against central differences.

    ``inputs`` should be float64; each is perturbed element by element.
    """
    xs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    tape = Tape()
    nodes = [tape.leaf(x.copy(), name=f"input{i}") for i, x in enumerate(xs)]
    out = fn(tape, *nodes)
    _scalar(out)
    tape.backward(out)
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]

    names = [f"input{i}" for i in range(len(xs))]
    for name, g in zip(names, analytic):
        if not np.all(np.isfinite(g)):
            return GradCheckReport([float("inf")] * len(xs), tol, False, f"non-finite analytic gradient for {name}", names)

    def evaluate() -> float:
        t = Tape()
        return _scalar(fn(t, *[t.leaf(x) for x in xs]))

    errors = [relative_error(a, _numeric(evaluate, x, step)) for a, x in zip(analytic, xs)]
    passed = all(e <= tol for e in errors)
    return GradCheckReport(errors, tol, passed, "", names)


def grad_check_params(
    loss_fn: Callable[[Tape], Node],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Gradient check of a tape program over :class:`Parameter` values in place.

    With ``max_entries`` only a seeded random subset of each parameter's
    entries is perturbed (all are compared when the parameter is small).
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = loss_fn(tape)
    _scalar(out)
    tape.backward(out)
    names = [p.name for p in params]
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, analytic):
        if not np.all(np.isfinite(g)):
            return GradCheckReport([float("inf")] * len(params), tol, False, f"non-finite analytic gradient for {p.name}", names)

    rng = np.random.default_rng(seed)
    errors = []
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.zeros(entries.size)
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            hi_x = flat[i]
            f_hi = _scalar(loss_fn(Tape()))
            flat[i] = orig - step
            lo_x = flat[i]
            f_lo = _scalar(loss_fn(Tape()))
            flat[i] = orig
            num[j] = (f_hi - f_lo) / (hi_x - lo_x)
        a = g.reshape(-1)[entries]
        # scale by the whole gradient so sparse subsets are not judged against ~0
        diff = np.max(np.abs(a - num), initial=0.0)
        denom = max(np.max(np.abs(g), initial=0.0), np.max(np.abs(num), initial=0.0))
        errors.append(0.0 if diff == 0.0 else float(diff / max(denom, ZERO_GRAD)))
    passed = all(e <= tol for e in errors)
    return GradCheckReport(errors, tol, passed, "", names)
