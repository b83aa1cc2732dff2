"""Feature interpolation at continuous query locations.

Two kernels weight the K gathered neighbours of each query by their distance
``d_i = |q - x_i| + eps``:

* temperature softmax, ``w = softmax(-p d)``, evaluated max-subtracted;
* inverse power, ``w_i = d_i^-p / sum_j d_j^-p``, evaluated literally. It is
  kept as the comparison baseline for the mixed-precision probe.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import NeighborIndex
from .numerics.ops import _record, _value, segment_sum
from .numerics.precision import Precision, round_b16
from .numerics.tape import ConformanceError, Node

EPS = 1e-6


@dataclass
class InterpQuery:
    """A batch of interpolation queries, one row per query."""

    q: np.ndarray  # (Nq, 2)
    x: np.ndarray  # (Nq, K, 2)
    f: np.ndarray  # (Nq, K, D)
    valid: np.ndarray = None  # (Nq, K) bool
    p: float = 1.0
    eps: float = EPS

    def __post_init__(self):
        self.q = np.asarray(self.q).reshape(-1, 2)
        self.x = np.asarray(self.x)
        self.f = np.asarray(self.f)
        if self.x.ndim == 2:
            self.x, self.f = self.x[None], self.f[None]
        if self.valid is None:
            self.valid = np.ones(self.x.shape[:2], dtype=bool)
        if self.x.shape[:2] != self.f.shape[:2] or self.x.shape[0] != self.q.shape[0]:
            raise ConformanceError(f"query {self.q.shape}, coords {self.x.shape}, feats {self.f.shape} disagree")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def gather(cls, q, key_coords, key_feats, nbr: NeighborIndex, p: float = 1.0, eps: float = EPS) -> "InterpQuery":
        return cls(q, np.asarray(key_coords)[nbr.idx], np.asarray(key_feats)[nbr.idx], nbr.valid, p, eps)


@dataclass
class InterpResult:
    out: np.ndarray  # (Nq, D)
    weights: np.ndarray  # (Nq, K)
    failed: np.ndarray  # (Nq,) bool: non-finite weights or zero normaliser


def _compute_dtype(precision: Precision | None, like: np.ndarray):
    if precision is None:
        return np.float64 if like.dtype == np.float64 else np.float32
    return np.dtype(Precision(precision).dtype).type


def _rounder(precision):
    if precision is not None and Precision(precision) is Precision.B16EMU:
        return round_b16
    return lambda t: t


def distances(iq: InterpQuery, dtype=np.float64) -> np.ndarray:
    diff = (iq.q[:, None, :] - iq.x).astype(dtype)
    return np.sqrt((diff * diff).sum(-1)) + dtype(iq.eps)


def interp_softmax(iq: InterpQuery, precision: Precision | str | None = None) -> InterpResult:
    """Temperature-softmax interpolation.

    Under ``b16emu`` every intermediate (distance, logit, exponential,
    weight, output) is rounded to binary16 while the normaliser accumulates
    in binary32.
    """
    dt = _compute_dtype(precision, iq.f)
    r = _rounder(precision)
    d = r(distances(iq, dt))
    z = r(-dt(iq.p) * d)
    z = np.where(iq.valid, z, -np.inf)
    m = z.max(axis=1, keepdims=True)
    e = r(np.exp(z - m))
    s = e.sum(axis=1, keepdims=True)
    w = r(e / s)
    out = r(np.einsum("qk,qkd->qd", w, r(iq.f.astype(dt))))
    failed = ~np.all(np.isfinite(w), axis=1) | (s[:, 0] <= 0) | ~np.isfinite(s[:, 0])
    return InterpResult(out, w, failed)


def interp_invpow(iq: InterpQuery, precision: Precision | str | None = None) -> InterpResult:
    """Normalised inverse-distance weighting ``d^-p``.

    No max-subtraction is possible here, so large ``p`` overflows or
    underflows; such rows are flagged in ``failed`` rather than raising.
    """
    dt = _compute_dtype(precision, iq.f)
    r = _rounder(precision)
    d = r(distances(iq, dt))
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        wt = r(np.where(iq.valid, d ** (-dt(iq.p)), 0.0).astype(dt))
        s = r(wt.sum(axis=1, keepdims=True))
        w = r(wt / s)
        out = r(np.einsum("qk,qkd->qd", w, r(iq.f.astype(dt))))
    failed = ~np.all(np.isfinite(w), axis=1) | (s[:, 0] == 0) | ~np.isfinite(s[:, 0])
    return InterpResult(out, w, failed)


def interp_backward(iq: InterpQuery, weights: np.ndarray, d_out: np.ndarray, kernel: str = "softmax"):
    """Cotangents for features, exponent/temperature and query.

    Both kernels are a softmax over logits ``z``: ``z = -p d`` for
    ``softmax`` and ``z = -p log d`` for ``invpow``. Returns
    ``(df (Nq, K, D), dp scalar, dq (Nq, 2))``. The distance gradient is taken
    as zero where a query coincides with a neighbour.
    """
    if d_out.shape != (iq.q.shape[0], iq.f.shape[-1]):
        raise ConformanceError(f"cotangent dims {d_out.shape} != output dims {(iq.q.shape[0], iq.f.shape[-1])}")
    if kernel not in KERNELS:
        raise ValueError(f"unknown interpolation kernel {kernel!r}")
    w = np.where(iq.valid, weights, 0.0)
    df = w[..., None] * d_out[:, None, :]
    dw = np.einsum("qkd,qd->qk", iq.f, d_out)
    dz = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    diff = iq.q[:, None, :] - iq.x
    norm = np.sqrt((diff * diff).sum(-1))
    d = norm + iq.eps
    if kernel == "softmax":
        dp = float(np.sum(dz * -d))
        dd = dz * -iq.p
    else:
        dp = float(np.sum(np.where(iq.valid, dz * -np.log(d), 0.0)))
        dd = dz * -iq.p / d
    unit = np.divide(diff, norm[..., None], out=np.zeros_like(diff), where=norm[..., None] > 0)
    dq = (dd[..., None] * unit).sum(axis=1)
    return df, dp, dq


KERNELS = {"softmax": interp_softmax, "invpow": interp_invpow}


def interpolate(q, key_coords: np.ndarray, feats, nbr: NeighborIndex, p, eps: float = EPS, kernel: str = "softmax") -> Node:
    """Tape op: interpolation of ``feats`` (Nk, D) at ``q`` (Nq, 2).

    ``q``, ``feats`` and ``p`` (scalar, shape () or (1,)) may be Nodes.
    """
    if kernel not in KERNELS:
        raise ValueError(f"unknown interpolation kernel {kernel!r}")
    qv, fv, pv = _value(q), _value(feats), _value(p)
    iq = InterpQuery.gather(qv, key_coords, fv, nbr, float(np.reshape(pv, -1)[0]), eps)
    res = KERNELS[kernel](iq)
    n_keys = fv.shape[0]

    def grads(g):
        df, dp, dq = interp_backward(iq, res.weights, g, kernel)
        dfeat = segment_sum(nbr.idx, df, n_keys).astype(fv.dtype)
        return dq.astype(qv.dtype), dfeat, np.full(pv.shape, dp, dtype=pv.dtype)

    return _record(res.out.astype(fv.dtype), (q, feats, p), grads, f"interpolate_{kernel}")


def stability_probe(
    p_values,
    d_ranges,
    precision: Precision | str = Precision.B16EMU,
    trials: int = 1000,
    k: int = 8,
    dim: int = 4,
    seed: int = 0,
) -> list[dict]:
    """Failure rates of both kernels over seeded random neighbourhoods.

    Each trial places ``k`` neighbours at log-uniform distances in
    ``[d_min, d_max]`` around a query at the origin.
    """
    precision = Precision(precision)
    rows = []
    for d_min, d_max in d_ranges:
        for p in p_values:
            rng = np.random.default_rng([seed, int(round(p * 1000)), int(round(d_min * 1e6)), int(round(d_max * 1e6))])
            dist = np.exp(rng.uniform(np.log(d_min), np.log(d_max), size=(trials, k)))
            theta = rng.uniform(0.0, 2 * np.pi, size=(trials, k))
            x = np.stack([dist * np.cos(theta), dist * np.sin(theta)], axis=-1)
            f = rng.standard_normal((trials, k, dim))
            iq = InterpQuery(np.zeros((trials, 2)), x, f, None, p)
            for kernel, fn in (("softmax", interp_softmax), ("invpow", interp_invpow)):
                res = fn(iq, precision)
                rows.append({
                    "kernel": kernel, "p": p, "d_min": d_min, "d_max": d_max,
                    "precision": precision.value, "failure_rate": float(res.failed.mean()),
                })
    return rows


def write_probe_csv(rows: list[dict], path, comment: str | None = None) -> None:
    fields = ["kernel", "p", "d_min", "d_max", "precision", "failure_rate"]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
