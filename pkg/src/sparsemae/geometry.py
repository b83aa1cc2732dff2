"""Off-grid token geometry: point sets, Hilbert ordering, balanced clusters,
cluster-group neighbourhoods and exact k-nearest neighbours."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PointSet:
    coords: np.ndarray  # (N, 2) pixel positions, (x, y)
    feats: np.ndarray = field(default=None)  # (N, D)
    stage: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        n = self.coords.shape[0]
        if n < 1:
            raise ValueError("a point set needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")
        if self.feats is None:
            self.feats = np.zeros((n, 0), dtype=np.float32)
        if self.feats.shape[0] != n:
            raise ValueError(f"feature rows {self.feats.shape[0]} != point count {n}")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def save(self, path) -> None:
        """Coordinates as an N x 2 binary32 AFT1 tensor."""
        from .numerics import aft1
        aft1.save(path, self.coords.astype(np.float32), aft1.NAME_CODES["b32"])

    @classmethod
    def load(cls, path, stage: int = 0) -> "PointSet":
        from .numerics import aft1
        coords = aft1.load(path)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"expected N x 2 coordinates, got dims {coords.shape}")
        return cls(coords, stage=stage)


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # (N,) cluster id per token
    count: int
    size: int  # requested target size
    order: np.ndarray  # Hilbert permutation the chunks were cut from

    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.count)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.count)


@dataclass
class NeighborIndex:
    idx: np.ndarray  # (Nq, M) key indices; padded slots hold 0
    valid: np.ndarray  # (Nq, M) bool

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.intp)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.idx.shape != self.valid.shape:
            raise ValueError("index and validity arrays differ in shape")
        self.idx = np.where(self.valid, self.idx, 0)

    @property
    def width(self) -> int:
        return self.idx.shape[1]

    def __len__(self) -> int:
        return self.idx.shape[0]

    def offset(self, base: int) -> "NeighborIndex":
        return NeighborIndex(self.idx + base, self.valid)

    @staticmethod
    def stack(parts: list["NeighborIndex"]) -> "NeighborIndex":
        """Concatenate rows, padding every part to the widest one."""
        m = max(p.width for p in parts)
        idx = [np.pad(p.idx, ((0, 0), (0, m - p.width))) for p in parts]
        valid = [np.pad(p.valid, ((0, 0), (0, m - p.width))) for p in parts]
        return NeighborIndex(np.concatenate(idx), np.concatenate(valid))


def grid_points(height: int, width: int, patch: int) -> PointSet:
    """Patch centres of a ``height x width`` image, row-major."""
    for name, extent in (("height", height), ("width", width)):
        if extent % patch:
            raise ValueError(f"{name} {extent} is not divisible by patch size {patch}")
    ys, xs = np.mgrid[0:height // patch, 0:width // patch]
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1) * patch + patch / 2.0
    return PointSet(coords)


def hilbert_index(x: np.ndarray, y: np.ndarray, order: int) -> np.ndarray:
    """Distance along the order-``order`` Hilbert curve of integer cells."""
    x = np.array(x, dtype=np.int64, copy=True)
    y = np.array(y, dtype=np.int64, copy=True)
    n = 1 << order
    d = np.zeros_like(x)
    s = n >> 1
    while s > 0:
        rx = (x & s) > 0
        ry = (y & s) > 0
        d += s * s * ((3 * rx.astype(np.int64)) ^ ry.astype(np.int64))
        flip = ~ry & rx
        x = np.where(flip, n - 1 - x, x)
        y = np.where(flip, n - 1 - y, y)
        swap = ~ry
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        s >>= 1
    return d


def quantize(coords: np.ndarray, cell: float = 1.0) -> tuple[np.ndarray, int]:
    """Integer cells of ``coords`` and the curve order covering them."""
    coords = np.asarray(coords, dtype=np.float64)
    q = np.floor((coords - coords.min(axis=0)) / cell).astype(np.int64)
    extent = int(q.max()) + 1 if q.size else 1
    order = max(1, math.ceil(math.log2(extent))) if extent > 1 else 1
    return q, order


def sfc_order(points: PointSet | np.ndarray, cell: float = 1.0) -> np.ndarray:
    """Permutation sorting points by Hilbert index; ties keep input order."""
    coords = points.coords if isinstance(points, PointSet) else np.asarray(points).reshape(-1, 2)
    q, order = quantize(coords, cell)
    h = hilbert_index(q[:, 0], q[:, 1], order)
    return np.argsort(h, kind="stable")


def balanced_clusters(points: PointSet | np.ndarray, size: int, cell: float = 1.0) -> ClusterAssignment:
    """Cut the Hilbert ordering into ``ceil(N/size)`` chunks whose lengths
    differ by at most one."""
    if size < 1:
        raise ValueError(f"cluster size must be >= 1, got {size}")
    order = sfc_order(points, cell)
    n = order.size
    count = -(-n // size)
    labels = np.empty(n, dtype=np.intp)
    for c, chunk in enumerate(np.array_split(order, count)):
        labels[chunk] = c
    return ClusterAssignment(labels, count, size, order)


def cluster_neighborhood(assign: ClusterAssignment, points: PointSet | np.ndarray, groups: int = 3) -> NeighborIndex:
    """Each token's keys: all members of the ``groups`` clusters whose
    centroids are nearest its own cluster's centroid (own cluster first)."""
    coords = points.coords if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c = assign.count
    if not 1 <= groups <= c:
        groups = max(1, min(groups, c))
    sizes = assign.sizes()
    smax = int(sizes.max())
    members = np.full((c, smax), -1, dtype=np.intp)
    for k, ids in enumerate(assign.members()):
        members[k, : ids.size] = ids
    centroids = np.stack([coords[members[k, : sizes[k]]].mean(axis=0) for k in range(c)])
    d2 = ((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    not_self = ~np.eye(c, dtype=bool)
    # own cluster first, then by centroid distance, then cluster id
    rank = np.lexsort((np.broadcast_to(np.arange(c), (c, c)), d2, not_self), axis=1)
    chosen = rank[:, :groups]
    rows = members[chosen].reshape(c, groups * smax)
    per_token = rows[assign.labels]
    return NeighborIndex(per_token, per_token >= 0)


def _smallest(d2: np.ndarray, kk: int) -> np.ndarray:
    """Column indices of the ``kk`` smallest entries along the last axis,
    ordered by (value, index); equal to a stable argsort truncated to ``kk``."""
    if kk >= d2.shape[-1]:
        return np.argsort(d2, axis=-1, kind="stable")[..., :kk]
    thresh = np.partition(d2, kk - 1, axis=-1)[..., kk - 1:kk]
    less = d2 < thresh
    room = kk - less.sum(axis=-1, keepdims=True)
    eq = d2 == thresh
    pick = less | (eq & (np.cumsum(eq, axis=-1) <= room))
    cols = np.nonzero(pick)[-1].reshape(d2.shape[:-1] + (kk,))
    vals = np.take_along_axis(d2, cols, axis=-1)
    return np.take_along_axis(cols, np.argsort(vals, axis=-1, kind="stable"), axis=-1)


def knn(queries: np.ndarray, keys: PointSet | np.ndarray, k: int, chunk: int = 1024) -> NeighborIndex:
    """Exact brute-force k nearest keys per query, ascending distance with
    ties broken by lower key index. Slots beyond the key count are invalid."""
    kc = keys.coords if isinstance(keys, PointSet) else np.asarray(keys, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    n = kc.shape[0]
    if n == 0:
        raise ValueError("knn needs a nonempty key set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    kk = min(k, n)
    out = np.empty((q.shape[0], kk), dtype=np.intp)
    for s in range(0, q.shape[0], chunk):
        diff = q[s:s + chunk, None, :] - kc[None, :, :]
        d2 = (diff * diff).sum(-1)
        out[s:s + chunk] = _smallest(d2, kk)
    valid = np.ones((q.shape[0], k), dtype=bool)
    if k > n:
        valid[:, n:] = False
        out = np.pad(out, ((0, 0), (0, k - n)))
    return NeighborIndex(out, valid)


def _spans(seg: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ids, starts and stops of the runs of a sorted segment array."""
    seg = np.asarray(seg)
    cut = np.flatnonzero(np.diff(seg)) + 1
    starts = np.r_[0, cut] if seg.size else np.zeros(0, dtype=np.intp)
    stops = np.r_[cut, seg.size] if seg.size else np.zeros(0, dtype=np.intp)
    return seg[starts], starts, stops


def segmented_knn(queries: np.ndarray, q_seg: np.ndarray, keys: np.ndarray, k_seg: np.ndarray, k: int) -> NeighborIndex:
    """``knn`` run independently inside each segment, returned in global key
    indices. Both segment arrays must be sorted (each segment contiguous)
    and every query segment must own at least one key."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    kc = np.asarray(keys, dtype=np.float64).reshape(-1, 2)
    q_seg, k_seg = np.asarray(q_seg), np.asarray(k_seg)
    if np.any(np.diff(q_seg) < 0) or np.any(np.diff(k_seg) < 0):
        raise ValueError("segment arrays must be sorted")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    qid, qs, qe = _spans(q_seg)
    kid, ks, ke = _spans(k_seg)
    where = {int(s): i for i, s in enumerate(kid)}
    missing = [int(s) for s in qid if int(s) not in where]
    if missing:
        raise ValueError(f"segments {missing[:5]} have queries but no keys")
    if q.shape[0] == 0:
        return NeighborIndex(np.zeros((0, k), dtype=np.intp), np.zeros((0, k), dtype=bool))
    kpos = np.array([where[int(s)] for s in qid])
    b = len(qid)
    qn, kn = qe - qs, (ke - ks)[kpos]
    qmax, kmax = int(qn.max()), int(kn.max())
    qpad = np.zeros((b, qmax, 2))
    kpad = np.zeros((b, kmax, 2))
    kvalid = np.zeros((b, kmax), dtype=bool)
    rows = np.repeat(np.arange(b), qn)
    qcol = np.arange(q.shape[0]) - np.repeat(qs, qn)
    qpad[rows, qcol] = q
    kstart = ks[kpos]
    krows = np.repeat(np.arange(b), kn)
    kglobal = np.concatenate([np.arange(a, a + n) for a, n in zip(kstart, kn)])
    kcol = kglobal - np.repeat(kstart, kn)
    kpad[krows, kcol] = kc[kglobal]
    kvalid[krows, kcol] = True
    diff = qpad[:, :, None, :] - kpad[:, None, :, :]
    d2 = np.where(kvalid[:, None, :], (diff * diff).sum(-1), np.inf)
    kk = min(k, kmax)
    order = _smallest(d2, kk)
    idx = (order + kstart[:, None, None])[rows, qcol]
    valid = (order < kn[:, None, None])[rows, qcol]
    if k > kk:
        idx = np.pad(idx, ((0, 0), (0, k - kk)))
        valid = np.pad(valid, ((0, 0), (0, k - kk)))
    return NeighborIndex(idx, valid)


def knn_distances(queries: np.ndarray, keys: np.ndarray, nbr: NeighborIndex) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    diff = q[:, None, :] - np.asarray(keys, dtype=np.float64)[nbr.idx]
    return np.sqrt((diff * diff).sum(-1))
