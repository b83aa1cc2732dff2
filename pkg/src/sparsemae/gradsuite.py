"""Seeded binary64 finite-difference checks for every differentiable op.

Each case maps a seed to a :class:`GradCheckReport`; ``run_suite`` runs a set
of cases over a range of seeds.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .attention import BiasNet, nbhd_attention
from .geometry import NeighborIndex, knn
from .interpolation import interpolate
from .masking import random_mask
from .merging import MergeParams, build_pools, importance_scores, merge_features, select_retained
from .numerics import ops
from .numerics.gradcheck import GradCheckReport, grad_check, grad_check_params
from .numerics.tape import Parameter, Tape
from .pipeline.config import tiny_config
from .pipeline.data import SyntheticData
from .pipeline.model import Model, forward, mae_loss

STEP = 1e-6
TOL = 1e-6


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, sum(map(ord, tag))])


def _weights(seed: int, n: int, *shape) -> np.ndarray:
    return _rng(seed, f"w{n}").standard_normal(shape)


# -- primitive ops, each reduced to a scalar through fixed random weights ---------

def _unary(op, shape=(3, 4)):
    def case(seed):
        x = _rng(seed, "x").standard_normal(shape)
        w = _weights(seed, 0, *shape)
        return grad_check(lambda t, a: ops.reduce_sum(ops.mul(op(a), w)), [x], STEP, TOL)
    return case


def _binary(op, sa=(3, 4), sb=(3, 4)):
    def case(seed):
        r = _rng(seed, "xy")
        a, b = r.standard_normal(sa), r.standard_normal(sb)
        w = _weights(seed, 0, *np.broadcast_shapes(sa, sb) if op is not ops.matmul else (sa[0], sb[1]))
        return grad_check(lambda t, x, y: ops.reduce_sum(ops.mul(op(x, y), w)), [a, b], STEP, TOL)
    return case


def _softmax_case(seed):
    r = _rng(seed, "softmax")
    x = r.standard_normal((4, 5))
    mask = r.random((4, 5)) < 0.7
    mask[:, 0] = True
    w = _weights(seed, 0, 4, 5)
    return grad_check(lambda t, a: ops.reduce_sum(ops.mul(ops.softmax(a, -1, mask), w)), [x], STEP, TOL)


def _layer_norm_case(seed):
    r = _rng(seed, "ln")
    x, g, b = r.standard_normal((4, 6)), r.standard_normal(6), r.standard_normal(6)
    w = _weights(seed, 0, 4, 6)
    return grad_check(lambda t, a, gg, bb: ops.reduce_sum(ops.mul(ops.layer_norm(a, gg, bb), w)), [x, g, b], STEP, TOL)


def _gather_case(seed):
    r = _rng(seed, "gather")
    x = r.standard_normal((5, 3))
    idx = r.integers(0, 5, (4, 2))
    w = _weights(seed, 0, 4, 2, 3)
    return grad_check(lambda t, a: ops.reduce_sum(ops.mul(ops.gather(a, idx), w)), [x], STEP, TOL)


def _scatter_case(seed):
    r = _rng(seed, "scatter")
    x = r.standard_normal((6, 3))
    idx = r.integers(0, 4, 6)
    w = _weights(seed, 0, 4, 3)
    return grad_check(lambda t, a: ops.reduce_sum(ops.mul(ops.scatter_add(a, idx, 4), w)), [x], STEP, TOL)


def _shape_case(seed):
    r = _rng(seed, "shape")
    a, b = r.standard_normal((2, 6)), r.standard_normal((2, 3))
    w = _weights(seed, 0, 2, 3, 3)

    def fn(t, x, y):
        c = ops.reshape(ops.concat([x, y], axis=-1), (2, 3, 3))
        return ops.add(ops.reduce_sum(ops.mul(c, w)), ops.reduce_mean(ops.reduce_sum(c, axis=1, keepdims=True)))
    return grad_check(fn, [a, b], STEP, TOL)


def _mse_case(seed):
    r = _rng(seed, "mse")
    a, b = r.standard_normal((5, 4)), r.standard_normal((5, 4))
    return grad_check(lambda t, x, y: ops.mse(x, y), [a, b], STEP, TOL)


# -- composite kernels ---------------------------------------------------------------

def attention_case(seed: int, n: int = 12, m: int = 6, heads: int = 2, dim: int = 3, hidden: int = 4) -> GradCheckReport:
    r = _rng(seed, "attention")
    idx = r.integers(0, n, (n, m))
    valid = r.random((n, m)) < 0.8
    nbr = NeighborIndex(idx, valid)
    bn = BiasNet.init(heads, hidden, r, np.float64)
    bn.b2 = r.standard_normal(heads)
    bn.blank = r.standard_normal(heads)
    inputs = [r.standard_normal((n, heads, dim)) for _ in range(3)]
    inputs += [r.standard_normal((heads, dim)) for _ in range(2)]
    inputs += list(bn.arrays())
    inputs.append(r.uniform(-2, 2, (n, m, 2)))
    w = _weights(seed, 0, n, heads, dim)

    def fn(t, q, k, v, bk, bv, w1, b1, w2, b2, blank, off):
        return ops.reduce_sum(ops.mul(nbhd_attention(q, k, v, bk, bv, (w1, b1, w2, b2, blank), off, nbr), w))
    return grad_check(fn, inputs, STEP, TOL)


def _interp_case(kernel: str, p_range):
    def case(seed, nq: int = 6, nk: int = 10, k: int = 4, dim: int = 3):
        r = _rng(seed, "interp" + kernel)
        keys = r.uniform(0, 4, (nk, 2))
        q = r.uniform(0, 4, (nq, 2))
        nbr = knn(q, keys, k)
        feats = r.standard_normal((nk, dim))
        p = np.array([r.uniform(*p_range)])
        w = _weights(seed, 0, nq, dim)
        return grad_check(lambda t, qq, f, pp: ops.reduce_sum(ops.mul(interpolate(qq, keys, f, nbr, pp, kernel=kernel), w)),
                          [q, feats, p], STEP, TOL)
    return case


def merge_case(seed: int, n: int = 14, dim: int = 4, out_dim: int = 5, rate: float = 0.4, k_m: int = 3) -> GradCheckReport:
    """Scoring, pooling and projection together, checked over the token
    features and every merge parameter."""
    r = _rng(seed, "merge")
    coords = r.uniform(0, 8, (n, 2))
    feats = Parameter(r.standard_normal((n, dim)), "feats")
    mp = MergeParams.init(dim, out_dim, 3, r, p_init=r.uniform(0.3, 1.5), k_m=k_m, dtype=np.float64)
    mp.ln_g.value = r.standard_normal(out_dim)
    mp.ln_b.value = r.standard_normal(out_dim)
    t0 = Tape()
    retained = select_retained(importance_scores(t0, t0.leaf(feats.value), mp).value, rate)
    _, pool, valid, dist = build_pools(coords, retained, k_m)
    w = _weights(seed, 0, retained.size, out_dim)

    def loss(t):
        x = t.param(feats)
        s = importance_scores(t, x, mp)
        return ops.reduce_sum(ops.mul(merge_features(t, x, s, retained, pool, valid, dist, mp), w))
    return grad_check_params(loss, [feats, *mp.parameters()], STEP, TOL)


def loss_case(seed: int, q: int = 5, pix: int = 4, n_aux: int = 2) -> GradCheckReport:
    r = _rng(seed, "loss")
    target = r.standard_normal((q, pix))
    inputs = [r.standard_normal((q, pix)) for _ in range(1 + n_aux)]
    lam = r.uniform(0.1, 1.0)
    return grad_check(lambda t, main, *aux: mae_loss(t, main, list(aux), target, lam)[0], inputs, STEP, TOL)


def decoder_case(seed: int, max_entries: int = 2) -> GradCheckReport:
    """Full tiny-model loss (encoder, deformable decoder and auxiliary heads)
    against the decoder and auxiliary parameters, with non-zero offset
    weights so the sampling location moves."""

    cfg = tiny_config(seed=seed)
    model = Model(cfg, dtype=np.float64)
    r = _rng(seed, "decoder")
    for layer in model.dec_layers:
        layer["offset"][0].value = r.standard_normal(layer["offset"][0].value.shape) * 0.3
    images = SyntheticData(cfg.image_size, seed).batch(0, 2)
    masks = [random_mask((cfg.grid, cfg.grid), 0.5, seed * 7 + i, cfg.patch) for i in range(2)]
    names = model.named_parameters()
    params = [p for n, p in names.items() if n.startswith(("dec.", "aux"))]
    return grad_check_params(lambda t: forward(model, t, images, masks).loss, params, STEP, TOL,
                             max_entries=max_entries, seed=seed)


def encoder_case(seed: int, max_entries: int = 2) -> GradCheckReport:
    """As ``decoder_case`` but against the encoder and merge parameters."""

    cfg = tiny_config(seed=seed)
    model = Model(cfg, dtype=np.float64)
    images = SyntheticData(cfg.image_size, seed).batch(0, 2)
    masks = [random_mask((cfg.grid, cfg.grid), 0.5, seed * 7 + i, cfg.patch) for i in range(2)]
    params = [p for n, p in model.named_parameters().items() if n.startswith(("embed", "pos", "enc", "merge"))]
    return grad_check_params(lambda t: forward(model, t, images, masks).loss, params, STEP, TOL,
                             max_entries=max_entries, seed=seed)


CASES: dict[str, Callable[[int], GradCheckReport]] = {
    "add": _binary(ops.add, (3, 4), (4,)),
    "sub": _binary(ops.sub, (3, 4), (3, 1)),
    "mul": _binary(ops.mul, (3, 4), (1, 4)),
    "matmul": _binary(ops.matmul, (3, 4), (4, 2)),
    "scale": _unary(lambda a: ops.scale(a, -1.7)),
    "tanh": _unary(ops.tanh),
    "sigmoid": _unary(ops.sigmoid),
    "gelu": _unary(ops.gelu),
    "softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "gather": _gather_case,
    "scatter_add": _scatter_case,
    "reshape_concat_reduce": _shape_case,
    "mse": _mse_case,
    "attention": attention_case,
    "interp_softmax": _interp_case("softmax", (0.3, 3.0)),
    "interp_invpow": _interp_case("invpow", (0.5, 3.0)),
    "merge": merge_case,
    "loss": loss_case,
    "decoder": decoder_case,
    "encoder": encoder_case,
}


def run_suite(seeds=range(20), cases: list[str] | None = None,
              on_result: Callable[[str, int, GradCheckReport], None] | None = None) -> dict[str, list[GradCheckReport]]:
    names = list(CASES) if cases is None else cases
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradient-check cases: {unknown}")
    out: dict[str, list[GradCheckReport]] = {}
    for name in names:
        for seed in seeds:
            rep = CASES[name](seed)
            out.setdefault(name, []).append(rep)
            if on_result is not None:
                on_result(name, seed, rep)
    return out
