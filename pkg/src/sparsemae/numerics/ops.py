"""Differentiable op set for the tape.

Every op takes :class:`Node` operands (plain arrays are accepted as constants)
and records a node whose ``vjp`` returns one cotangent per parent.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tape import ConformanceError, Node, Tape


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def _record(value, operands, grads_fn, op):
    """Record ``value``; ``grads_fn(g)`` returns cotangents for all operands."""
    tape = _tape_of(*operands)
    idx = [i for i, x in enumerate(operands) if isinstance(x, Node)]
    parents = [operands[i] for i in idx]

    def vjp(g):
        grads = grads_fn(g)
        return [grads[i] for i in idx]

    return tape.record(value, parents, vjp, op)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConformanceError(f"{op}: dims {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Node:
    av, bv = _value(a), _value(b)
    _check_broadcast("add", av, bv)
    return _record(av + bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)), "add")


def sub(a, b) -> Node:
    av, bv = _value(a), _value(b)
    _check_broadcast("sub", av, bv)
    return _record(av - bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)), "sub")


def mul(a, b) -> Node:
    av, bv = _value(a), _value(b)
    _check_broadcast("mul", av, bv)
    return _record(
        av * bv, (a, b), lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)), "mul"
    )


def scale(a: Node, c: float) -> Node:
    return _record(a.value * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Node) -> Node:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """GELU, tanh approximation."""
    x = a.value
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def grads(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(y, (a,), grads, "gelu")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Node:
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ConformanceError(f"matmul: dims {av.shape} @ {bv.shape}")
    out = av @ bv

    def grads(g):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(out, (a, b), grads, "matmul")


# -- normalisation ------------------------------------------------------------

def softmax(a: Node, axis: int = -1, mask=None) -> Node:
    """Max-subtracted softmax. ``mask`` (bool, True = keep) zeroes excluded
    entries; a row with nothing kept yields all zeros."""
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def grads(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), grads, "softmax")


def layer_norm(x: Node, gamma=None, beta=None, eps: float = 1e-5) -> Node:
    """Normalise over the last axis, then apply optional gain and shift."""
    xv = x.value
    n = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = _value(gamma) if gamma is not None else None
    bv = _value(beta) if beta is not None else None
    for name, t in (("gamma", gv), ("beta", bv)):
        if t is not None and t.shape != (n,):
            raise ConformanceError(f"layer_norm: {name} dims {t.shape} != ({n},)")
    out = xhat if gv is None else xhat * gv
    if bv is not None:
        out = out + bv

    def grads(g):
        dxhat = g if gv is None else g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, n)
        dg = None if gv is None else (g * xhat).reshape(flat).sum(axis=0)
        db = None if bv is None else g.reshape(flat).sum(axis=0)
        return dx, dg, db

    operands = (x, gamma if gamma is not None else None, beta if beta is not None else None)
    return _record(out, operands, grads, "layer_norm")


# -- indexing -------------------------------------------------------------------

def segment_sum(idx, vals: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[i]] += vals[i]`` into ``n`` zero rows; ``idx`` may have any
    shape matching the leading dims of ``vals``.

    Accumulation runs in input order (one flat ``bincount`` over
    ``row * width + column``), so the summation order per entry is fixed.
    """
    idx = np.asarray(idx, dtype=np.intp)
    flat = idx.ravel()
    tail = vals.shape[idx.ndim:]
    width = int(np.prod(tail))
    if not flat.size:
        return np.zeros((n,) + tail, dtype=vals.dtype)
    key = (flat[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(key, weights=vals.reshape(-1), minlength=n * width).astype(vals.dtype, copy=False)
    return out.reshape((n,) + tail)


def gather(a: Node, idx) -> Node:
    """Rows of ``a`` selected by integer array ``idx`` (any shape)."""
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
        raise ConformanceError(f"gather: index out of range for {av.shape[0]} rows")
    out = av[idx]

    def grads(g):
        return (segment_sum(idx, g, av.shape[0]),)

    return _record(out, (a,), grads, "gather")


def scatter_add(a: Node, idx, n: int) -> Node:
    """``out[idx[i]] += a[i]`` into ``n`` zero rows."""
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value
    if idx.shape != av.shape[: idx.ndim]:
        raise ConformanceError(f"scatter_add: index dims {idx.shape} vs source {av.shape}")
    out = segment_sum(idx, av, n)
    return _record(out, (a,), lambda g: (g[idx],), "scatter_add")


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence, axis: int = -1) -> Node:
    vals = [_value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# -- reductions -------------------------------------------------------------------

def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    av = a.value
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims))

    def grads(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).astype(av.dtype),)

    return _record(out, (a,), grads, "sum")


def reduce_mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    av = a.value
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis, keepdims), 1.0 / float(count))


def mse(a: Node, b) -> Node:
    """Mean squared error over all elements."""
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ConformanceError(f"mse: dims {av.shape} vs {bv.shape}")
    diff = av - bv
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n, dtype=av.dtype)

    def grads(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _record(out, (a, b), grads, "mse")
