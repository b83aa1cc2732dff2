"""Adaptive token downsampling: importance scoring, rate-controlled
retention and location-aware merging of dropped tokens."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import keep_count
from .geometry import PointSet, knn
from .numerics import ops
from .numerics.tape import Node, Parameter, Tape


@dataclass
class MergeParams:
    scorer_w1: Parameter  # (D, H)
    scorer_b1: Parameter  # (H,)
    scorer_w2: Parameter  # (H, 1)
    scorer_b2: Parameter  # (1,)
    p_merge: Parameter  # (1,) temperature over pixel distances
    proj_w: Parameter  # (2D, D_out)
    proj_b: Parameter  # (D_out,)
    ln_g: Parameter  # (D_out,)
    ln_b: Parameter  # (D_out,)
    k_m: int = 8

    @classmethod
    def init(cls, dim: int, out_dim: int | None = None, hidden: int = 16, rng=None, prefix: str = "merge",
             p_init: float = 1.0, k_m: int = 8, dtype=np.float32) -> "MergeParams":
        rng = np.random.default_rng(rng)
        out_dim = dim if out_dim is None else out_dim

        def p(name, value):
            return Parameter(np.asarray(value, dtype=dtype), f"{prefix}.{name}")

        return cls(
            scorer_w1=p("scorer_w1", rng.standard_normal((dim, hidden)) / np.sqrt(dim)),
            scorer_b1=p("scorer_b1", np.zeros(hidden)),
            scorer_w2=p("scorer_w2", rng.standard_normal((hidden, 1)) / np.sqrt(hidden)),
            scorer_b2=p("scorer_b2", np.zeros(1)),
            p_merge=p("p_merge", [p_init]),
            proj_w=p("proj_w", rng.standard_normal((2 * dim, out_dim)) / np.sqrt(2 * dim)),
            proj_b=p("proj_b", np.zeros(out_dim)),
            ln_g=p("ln_g", np.ones(out_dim)),
            ln_b=p("ln_b", np.zeros(out_dim)),
            k_m=k_m,
        )

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f) for f in self.__dataclass_fields__ if f != "k_m"]


@dataclass
class MergeResult:
    points: PointSet  # retained coordinates with merged features
    retained: np.ndarray  # (R,) ascending token indices
    target: np.ndarray  # (N,) retained slot each token belongs to
    pool: np.ndarray  # (R, K_m) contributor token indices
    pool_valid: np.ndarray  # (R, K_m)
    node: Node | None = field(default=None, repr=False)


def importance_scores(tape: Tape, feats: Node, mp: MergeParams) -> Node:
    """Per-token score in (0, 1): sigmoid of a two-layer GELU perceptron."""
    h = ops.gelu(ops.add(ops.matmul(feats, tape.param(mp.scorer_w1)), tape.param(mp.scorer_b1)))
    z = ops.add(ops.matmul(h, tape.param(mp.scorer_w2)), tape.param(mp.scorer_b2))
    return ops.reshape(ops.sigmoid(z), (feats.shape[0],))


def select_retained(scores, rate: float) -> np.ndarray:
    """Indices of the ``max(1, round(rate * N))`` top-scoring tokens, ties to
    the lower index, returned in ascending index order."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"downsampling rate must lie in (0, 1], got {rate}")
    s = np.asarray(scores.value if isinstance(scores, Node) else scores).ravel()
    n = keep_count(rate, s.size)
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:n])


def build_pools(coords: np.ndarray, retained: np.ndarray, k_m: int):
    """Assign each dropped token to its nearest retained token and keep the
    ``k_m`` closest contributors per retained token (distance, then index).

    Returns ``(target, pool, pool_valid, pool_dist)``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n, r = coords.shape[0], retained.size
    target = np.empty(n, dtype=np.intp)
    target[retained] = np.arange(r)
    is_kept = np.zeros(n, dtype=bool)
    is_kept[retained] = True
    dropped = np.flatnonzero(~is_kept)
    pool = np.zeros((r, k_m), dtype=np.intp)
    valid = np.zeros((r, k_m), dtype=bool)
    dist = np.zeros((r, k_m))
    if dropped.size:
        nearest = knn(coords[dropped], coords[retained], 1).idx[:, 0]
        target[dropped] = nearest
        d = np.linalg.norm(coords[dropped] - coords[retained][nearest], axis=1)
        order = np.lexsort((dropped, d, nearest))
        grp = nearest[order]
        start = np.searchsorted(grp, grp, side="left")
        rank = np.arange(order.size) - start
        keep = rank < k_m
        rows, cols, src = grp[keep], rank[keep], order[keep]
        pool[rows, cols] = dropped[src]
        valid[rows, cols] = True
        dist[rows, cols] = d[src]
    return target, pool, valid, dist


def merge_tokens(tape: Tape, coords: np.ndarray, feats: Node, scores: Node, retained: np.ndarray,
                 mp: MergeParams, stage: int = 0) -> MergeResult:
    """Merged feature of retained token r::

        LayerNorm(W [f_r ; sum_{j in pool(r)} w_j s_j f_j] + b)

    with ``w = softmax(-p_merge * dist(r, j))`` over the pool and ``s_j`` the
    importance score. Retained coordinates are unchanged; an empty pool gives a
    zero aggregate.
    """
    retained = np.asarray(retained, dtype=np.intp)
    if retained.size == 0:
        raise ValueError("at least one token must be retained")
    target, pool, valid, dist = build_pools(coords, retained, mp.k_m)
    out = merge_features(tape, feats, scores, retained, pool, valid, dist, mp)
    points = PointSet(np.asarray(coords)[retained], out.value, stage + 1)
    return MergeResult(points, retained, target, pool, valid, out)


def merge_features(tape: Tape, feats: Node, scores: Node, retained: np.ndarray, pool: np.ndarray,
                   valid: np.ndarray, dist: np.ndarray, mp: MergeParams) -> Node:
    """Merged features for precomputed pools; indices refer to rows of ``feats``."""
    dt = feats.value.dtype
    logits = ops.mul(tape.param(mp.p_merge), (-dist).astype(dt))
    w = ops.softmax(logits, axis=-1, mask=valid)
    gate = ops.mul(w, ops.gather(scores, pool))
    r, k_m = pool.shape
    contrib = ops.mul(ops.reshape(gate, (r, k_m, 1)), ops.gather(feats, pool))
    agg = ops.reduce_sum(contrib, axis=1)
    cat = ops.concat([ops.gather(feats, retained), agg], axis=-1)
    proj = ops.add(ops.matmul(cat, tape.param(mp.proj_w)), tape.param(mp.proj_b))
    return ops.layer_norm(proj, tape.param(mp.ln_g), tape.param(mp.ln_b))


def merge_schedule(n: int, rate: float, merges: int) -> list[int]:
    """Token counts after each of ``merges`` successive downsamplings."""
    counts = [n]
    for _ in range(merges):
        counts.append(keep_count(rate, counts[-1]))
    return counts
