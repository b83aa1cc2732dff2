"""Neighbourhood attention with a learned blank slot and a continuous
relative-position bias.

Two forward paths compute the same quantity::

    out_i = sum_j P_ij [V_nbr(i) ; V_blank]_j,
    P_i   = softmax((q_i / sqrt(d)) . [K_nbr(i) ; K_blank] + [B(off_ij) ; b_blank])

``nbhd_attn_naive`` materialises every score row; ``nbhd_attn_streaming``
walks the neighbourhood in fixed-width tiles with an online softmax (running
max, running normaliser, rescaled accumulator) and never holds more than one
tile of scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NeighborIndex
from .numerics.ops import _record, _value, segment_sum
from .numerics.precision import round_b16
from .numerics.tape import ConformanceError, Node

TILE = 16


@dataclass
class BiasNet:
    """Per-head perceptron: normalised offset (dx, dy) -> tanh hidden -> scalar.

    ``blank`` is the per-head score bias of the blank slot.
    """

    w1: np.ndarray  # (h, 2, H)
    b1: np.ndarray  # (h, H)
    w2: np.ndarray  # (h, H)
    b2: np.ndarray  # (h,)
    blank: np.ndarray  # (h,)

    FIELDS = ("w1", "b1", "w2", "b2", "blank")

    @classmethod
    def init(cls, heads: int, hidden: int = 16, rng=None, dtype=np.float32, std: float = 0.5) -> "BiasNet":
        rng = np.random.default_rng(rng)
        return cls(
            w1=(rng.standard_normal((heads, 2, hidden)) * std).astype(dtype),
            b1=(rng.standard_normal((heads, hidden)) * std).astype(dtype),
            w2=(rng.standard_normal((heads, hidden)) * std / np.sqrt(hidden)).astype(dtype),
            b2=np.zeros(heads, dtype=dtype),
            blank=np.zeros(heads, dtype=dtype),
        )

    @property
    def heads(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)

    def __call__(self, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bias ``(Nq, h, T)`` for offsets ``(Nq, T, 2)``, plus the hidden
        activations ``(Nq, T, h, H)`` backward needs."""
        a = np.tanh(_bias_hidden_pre(offsets, self.w1) + self.b1)
        return np.moveaxis((a * self.w2).sum(axis=-1), 1, 2) + self.b2[None, :, None], a

    def backward(self, offsets: np.ndarray, a: np.ndarray, dbias: np.ndarray) -> tuple[dict, np.ndarray]:
        """Cotangents for the weights (``blank`` excluded) and the offsets."""
        nq, t, h, hid = a.shape
        db = np.moveaxis(dbias, 1, 2)  # (Nq, T, h)
        dz = db[..., None] * self.w2 * (1.0 - a * a)
        off2 = offsets.reshape(nq * t, 2)
        dz2 = dz.reshape(nq * t, h, hid)
        grads = {
            "w1": np.einsum("nc,nhj->hcj", off2, dz2, optimize=True),
            "b1": dz2.sum(axis=0),
            "w2": np.einsum("nh,nhj->hj", db.reshape(nq * t, h), a.reshape(nq * t, h, hid), optimize=True),
            "b2": dbias.sum(axis=(0, 2)),
        }
        doff = dz2.reshape(nq * t, h * hid) @ self.w1.transpose(0, 2, 1).reshape(h * hid, 2)
        return grads, doff.reshape(nq, t, 2)


@dataclass
class AttnInputs:
    q: np.ndarray  # (Nq, h, d)
    k: np.ndarray  # (Nk, h, d)
    v: np.ndarray  # (Nk, h, d)
    blank_k: np.ndarray  # (h, d)
    blank_v: np.ndarray  # (h, d)
    nbr: NeighborIndex  # (Nq, M) into the keys
    bias: BiasNet
    offsets: np.ndarray  # (Nq, M, 2) normalised query->key offsets

    def __post_init__(self):
        nq, h, d = self.q.shape
        if self.k.shape != self.v.shape or self.k.shape[1:] != (h, d):
            raise ConformanceError(f"Q {self.q.shape}, K {self.k.shape}, V {self.v.shape} do not share heads/dim")
        if self.blank_k.shape != (h, d) or self.blank_v.shape != (h, d):
            raise ConformanceError(f"blank tokens must be ({h}, {d})")
        if self.nbr.idx.shape[0] != nq:
            raise ConformanceError(f"neighbour rows {self.nbr.idx.shape[0]} != queries {nq}")
        if self.offsets.shape != self.nbr.idx.shape + (2,):
            raise ConformanceError(f"offsets {self.offsets.shape} != {self.nbr.idx.shape + (2,)}")
        if self.bias.heads != h:
            raise ConformanceError(f"bias net has {self.bias.heads} heads, inputs have {h}")

    def check_rows(self) -> None:
        if not np.all(self.nbr.valid.any(axis=1)):
            bad = np.flatnonzero(~self.nbr.valid.any(axis=1))
            raise ValueError(f"queries {bad[:8].tolist()} have no valid neighbour")


def relative_offsets(q_coords: np.ndarray, k_coords: np.ndarray, nbr: NeighborIndex, unit: float = 1.0) -> np.ndarray:
    """(key - query) / unit for every neighbour slot."""
    off = (np.asarray(k_coords)[nbr.idx] - np.asarray(q_coords)[:, None, :]) / unit
    return np.where(nbr.valid[..., None], off, 0.0)


def _bias_hidden_pre(offsets: np.ndarray, w1: np.ndarray) -> np.ndarray:
    # (Nq, T, 2) x (h, 2, H) -> (Nq, T, h, H)
    h, _, hid = w1.shape
    flat = offsets.reshape(-1, 2) @ w1.transpose(1, 0, 2).reshape(2, h * hid)
    return flat.reshape(offsets.shape[:-1] + (h, hid))


def _scores(x: np.ndarray, kt: np.ndarray) -> np.ndarray:
    """(Nq, h, d) . (Nq, T, h, d) -> (Nq, h, T)"""
    return (np.moveaxis(kt, 1, 2) @ x[..., None])[..., 0]


def _weighted(p: np.ndarray, vt: np.ndarray) -> np.ndarray:
    """(Nq, h, T) x (Nq, T, h, d) -> (Nq, h, d)"""
    return (p[:, :, None, :] @ np.moveaxis(vt, 1, 2))[:, :, 0, :]


def _acc_dtype(x: np.ndarray):
    return np.float64 if x.dtype == np.float64 else np.float32


def attention_scores(inp: AttnInputs) -> np.ndarray:
    """Materialised ``(Nq, h, M + 1)`` logits, blank slot last, invalid = -inf."""
    d = inp.q.shape[-1]
    qs = inp.q / np.sqrt(d)
    s = np.einsum("qhd,qmhd->qhm", qs, inp.k[inp.nbr.idx])
    s = s + inp.bias(inp.offsets)[0]
    s = np.where(inp.nbr.valid[:, None, :], s, -np.inf)
    sb = np.einsum("qhd,hd->qh", qs, inp.blank_k) + inp.bias.blank
    return np.concatenate([s, sb[..., None]], axis=-1)


def nbhd_attn_naive(inp: AttnInputs, return_weights: bool = False):
    inp.check_rows()
    s = attention_scores(inp)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    m = inp.nbr.width
    out = np.einsum("qhm,qmhd->qhd", p[..., :m], inp.v[inp.nbr.idx]) + p[..., m:] * inp.blank_v
    return (out, p) if return_weights else out


def nbhd_attn_streaming(inp: AttnInputs, half_io: bool = False, tile: int = TILE, return_lse: bool = False):
    """Online-softmax evaluation over neighbour tiles.

    Accumulators are binary64 for binary64 inputs and binary32 otherwise. With
    ``half_io`` Q/K/V and the blank tokens are rounded to binary16 on entry and
    the output is rounded on exit.
    """
    inp.check_rows()
    dt = _acc_dtype(inp.q)
    q, k, v, bk, bv = inp.q, inp.k, inp.v, inp.blank_k, inp.blank_v
    if half_io:
        q, k, v, bk, bv = (round_b16(t) for t in (q, k, v, bk, bv))
    q, k, v, bk, bv = (np.asarray(t, dtype=dt) for t in (q, k, v, bk, bv))
    qs = q / dt(np.sqrt(q.shape[-1]))

    # the blank slot is always valid, so it seeds a finite running max
    m = np.einsum("qhd,hd->qh", qs, bk) + inp.bias.blank.astype(dt)
    l = np.ones_like(m)
    acc = np.broadcast_to(bv, qs.shape).copy()
    idx_all, valid_all = inp.nbr.idx, inp.nbr.valid
    for t0 in range(0, inp.nbr.width, tile):
        idx = idx_all[:, t0:t0 + tile]
        valid = valid_all[:, t0:t0 + tile]
        s = _scores(qs, k[idx])
        s = s + inp.bias(inp.offsets[:, t0:t0 + tile])[0].astype(dt)
        s = np.where(valid[:, None, :], s, -np.inf)
        m_new = np.maximum(m, s.max(axis=-1))
        alpha = np.exp(m - m_new)
        p = np.exp(s - m_new[..., None])
        l = l * alpha + p.sum(axis=-1)
        acc = acc * alpha[..., None] + _weighted(p, v[idx])
        m = m_new
    out = acc / l[..., None]
    if half_io:
        out = round_b16(out)
    if return_lse:
        return out, m + np.log(l)
    return out


@dataclass
class AttnGrads:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    blank_k: np.ndarray
    blank_v: np.ndarray
    bias: dict
    offsets: np.ndarray


def nbhd_attn_backward(inp: AttnInputs, d_out: np.ndarray, out=None, lse=None, tile: int = TILE) -> AttnGrads:
    """Vector-Jacobian product of the attention output.

    Probabilities are recomputed tile by tile from the row log-sum-exp, as a
    streaming kernel would; shared keys receive a deterministic scatter-add.
    """
    if d_out.shape != inp.q.shape:
        raise ConformanceError(f"cotangent dims {d_out.shape} != output dims {inp.q.shape}")
    if out is None or lse is None:
        out, lse = nbhd_attn_streaming(inp, return_lse=True, tile=tile)
    dt = _acc_dtype(inp.q)
    d_out = d_out.astype(dt, copy=False)
    q, k, v, bk, bv = (np.asarray(t, dtype=dt) for t in (inp.q, inp.k, inp.v, inp.blank_k, inp.blank_v))
    scale = dt(1.0 / np.sqrt(q.shape[-1]))
    qs = q * scale
    delta = (d_out * out).sum(axis=-1)  # (Nq, h)

    sb = np.einsum("qhd,hd->qh", qs, bk) + inp.bias.blank
    pb = np.exp(sb - lse)
    dbv = np.einsum("qh,qhd->hd", pb, d_out)
    dsb = pb * (np.einsum("qhd,hd->qh", d_out, bv) - delta)
    dqs = dsb[..., None] * bk
    dbk = np.einsum("qh,qhd->hd", dsb, qs)
    bias_grads = {name: np.zeros_like(arr) for name, arr in zip(BiasNet.FIELDS, inp.bias.arrays())}
    bias_grads["blank"] = dsb.sum(axis=0)

    # per-slot score/probability cotangents, reduced into shared keys at the end
    slot_w = np.zeros((2,) + q.shape[:2] + (inp.nbr.width,), dtype=dt)  # (ds | p, Nq, h, M)
    doff = np.zeros_like(inp.offsets)
    for t0 in range(0, inp.nbr.width, tile):
        sl = slice(t0, t0 + tile)
        idx, valid = inp.nbr.idx[:, sl], inp.nbr.valid[:, sl]
        kt, vt = k[idx], v[idx]
        off = inp.offsets[:, sl]
        bias, hidden = inp.bias(off)
        s = _scores(qs, kt) + bias
        p = np.where(valid[:, None, :], np.exp(s - lse[..., None]), 0.0)
        slot_w[1, :, :, sl] = p
        ds = p * (_scores(d_out, vt) - delta[..., None])
        dqs += _weighted(ds, kt)
        slot_w[0, :, :, sl] = ds
        g, doff[:, sl] = inp.bias.backward(off, hidden, ds)
        for name, val in g.items():
            bias_grads[name] += val
    dk, dv = _reduce_to_keys(inp.nbr.idx, slot_w, qs, d_out, k.shape[0])
    return AttnGrads(dqs * scale, dk, dv, dbk, dbv, bias_grads, doff)


DENSE_LIMIT = 1 << 22


def _reduce_to_keys(idx: np.ndarray, slot_w: np.ndarray, qs: np.ndarray, d_out: np.ndarray, n_keys: int):
    """dK[j] = sum ds[i, t] qs[i] and dV[j] = sum p[i, t] dO[i] over slots
    (i, t) with idx[i, t] == j.

    Small problems scatter the scalar weights into a dense (h, Nq, Nk)
    matrix and contract with one matmul; larger ones scatter the per-slot
    outer products directly.
    """
    nq, h, m = slot_w.shape[1:]
    if nq * h * n_keys <= DENSE_LIMIT:
        # bins ordered (pair, head, query, key); weights laid out (pair, query, head, slot)
        pair, qi, hh = np.ix_(np.arange(2), np.arange(nq), np.arange(h))
        base = ((pair * h + hh) * nq + qi) * n_keys
        key = (base[..., None] + idx[None, :, None, :]).ravel()
        a = np.bincount(key, weights=slot_w.ravel(), minlength=2 * h * nq * n_keys)
        a = a.reshape(2, h, nq, n_keys).astype(slot_w.dtype, copy=False)
        dk = np.swapaxes(a[0], 1, 2) @ np.swapaxes(qs, 0, 1)  # (h, Nk, d)
        dv = np.swapaxes(a[1], 1, 2) @ np.swapaxes(d_out, 0, 1)
        return np.swapaxes(dk, 0, 1), np.swapaxes(dv, 0, 1)
    slot_kv = np.stack([np.moveaxis(slot_w[0], 1, 2)[..., None] * qs[:, None],
                        np.moveaxis(slot_w[1], 1, 2)[..., None] * d_out[:, None]], axis=2)
    dkv = segment_sum(idx, slot_kv, n_keys)
    return dkv[:, 0], dkv[:, 1]


def nbhd_attention(q, k, v, blank_k, blank_v, bias_params, offsets, nbr: NeighborIndex, half_io: bool = False) -> Node:
    """Tape op wrapping the streaming forward and its hand-derived backward.

    ``bias_params`` is the 5-tuple ``(w1, b1, w2, b2, blank)``; any operand may
    be a Node or a constant array.
    """
    operands = (q, k, v, blank_k, blank_v, *bias_params, offsets)
    vals = [_value(x) for x in operands]
    inp = AttnInputs(*vals[:5], nbr, BiasNet(*vals[5:10]), vals[10])
    out, lse = nbhd_attn_streaming(inp, half_io=half_io, return_lse=True)

    def grads(g):
        ag = nbhd_attn_backward(inp, g, out, lse)
        return (ag.q, ag.k, ag.v, ag.blank_k, ag.blank_v,
                *(ag.bias[f] for f in BiasNet.FIELDS), ag.offsets)

    return _record(out, operands, grads, "nbhd_attention")


def flop_count_attn(n: int, m: int, heads: int, dim: int) -> int:
    """Neighbourhood attention FLOPs with ``m + 1`` slots per query.

    ``4 n (m+1) h d`` for the two contractions (QK^T and PV, 2 FLOPs per
    multiply-add) plus ``5 n (m+1) h`` for the softmax (max, subtract, exp,
    sum, divide).
    """
    slots = m + 1
    return 4 * n * slots * heads * dim + 5 * n * slots * heads


def flop_count_dense(n: int, heads: int, dim: int) -> int:
    """Dense attention over all ``n`` tokens (no blank slot)."""
    return 4 * n * n * heads * dim + 5 * n * n * heads
