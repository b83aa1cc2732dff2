"""Representation diagnostics: singular values, normalised effective rank,
PCA projections and closed-form FLOP accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._util import keep_count
from .attention import flop_count_attn


class ConvergenceError(RuntimeError):
    pass


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array(players[: m // 2])
        q = np.array(players[m // 2:][::-1])
        keep = (p < n) & (q < n)
        lo, hi = np.minimum(p, q)[keep], np.maximum(p, q)[keep]
        rounds.append((lo, hi))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(g: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all ``n(n-1)/2`` pivots in ``n - 1`` rounds of disjoint
    pairs; rotations inside a round commute, so a round is applied as one
    vectorised update. Stops once the off-diagonal Frobenius mass drops below
    ``tol * |G|_F``. Returns unsorted ``(eigenvalues, eigenvectors)``.
    """
    a = np.array(g, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n == 1 or norm == 0.0:
        return np.diag(a).copy(), v
    rounds = _round_robin(n)

    offdiag = ~np.eye(n, dtype=bool)

    def off():
        return np.linalg.norm(a[offdiag])

    for _ in range(max_sweeps):
        if off() < tol * norm:
            return np.diag(a).copy(), v
        for p, q in rounds:
            apq = a[p, q]
            live = apq != 0.0
            if not live.any():
                continue
            p, q, apq = p[live], q[live], apq[live]
            with np.errstate(over="ignore"):
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                # |tau| -> inf gives t = 0, i.e. no rotation
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    residual = off()
    if residual < tol * norm:
        return np.diag(a).copy(), v
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {residual:.3e}, |G| {norm:.3e})")


def singular_values(feats: np.ndarray) -> np.ndarray:
    """Descending singular values via Jacobi on the smaller Gram matrix."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 1:
        raise ValueError(f"expected a nonempty matrix, got dims {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("feature matrix has non-finite entries")
    g = f.T @ f if f.shape[0] >= f.shape[1] else f @ f.T
    eig, _ = jacobi_eigh(g)
    return np.sqrt(np.clip(np.sort(eig)[::-1], 0.0, None))


def effective_rank_from_singular_values(sv, n: int, d: int) -> float:
    sv = np.asarray(sv, dtype=np.float64)
    total = sv.sum()
    if not total > 0:
        raise ValueError("effective rank is undefined for an all-zero matrix")
    p = sv[sv > 0] / total
    entropy = -np.sum(p * np.log(p))
    return float(np.exp(entropy) / min(n, d))


def effective_rank(feats: np.ndarray) -> float:
    """exp(spectral entropy of sigma / sum sigma) / min(N, D)."""
    f = np.asarray(feats)
    return effective_rank_from_singular_values(singular_values(f), *f.shape)


@dataclass
class RankReport:
    stage: int
    n: int
    d: int
    r_hat: float
    singular_values: np.ndarray = field(repr=False)


def rank_report(stage_feats: list[np.ndarray]) -> list[RankReport]:
    out = []
    for i, f in enumerate(stage_feats):
        sv = singular_values(f)
        out.append(RankReport(i, f.shape[0], f.shape[1], effective_rank_from_singular_values(sv, *f.shape), sv))
    return out


def pca_project(feats: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Projections of the centred rows onto the top-``k`` principal axes and
    their explained-variance ratios. Each axis is signed so its
    largest-magnitude loading is positive."""
    x = np.asarray(feats, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} must lie in [1, min(N, D)={min(n, d)}]")
    xc = x - x.mean(axis=0)
    eig, vec = jacobi_eigh(xc.T @ xc)
    order = np.argsort(-eig, kind="stable")
    eig, vec = np.clip(eig[order], 0.0, None), vec[:, order]
    comps = vec[:, :k]
    lead = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[lead, np.arange(k)])
    total = eig.sum()
    ratios = eig[:k] / total if total > 0 else np.zeros(k)
    return xc @ comps, ratios


def pca_color_map(coords: np.ndarray, feats: np.ndarray, size: int, scale: int = 1) -> np.ndarray:
    """``(size*scale, size*scale, 3)`` uint8 map: the top three principal
    components as RGB, each pixel taking the colour of its nearest token."""
    from .geometry import knn

    x = np.asarray(feats, dtype=np.float64)
    k = min(3, *x.shape)
    proj, _ = pca_project(x, k)
    rgb = np.zeros((x.shape[0], 3))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    rgb[:, :k] = (proj - lo) / span
    side = size * scale
    centres = (np.arange(side) + 0.5) / scale
    px = np.stack(np.meshgrid(centres, centres, indexing="xy"), axis=-1).reshape(-1, 2)
    nearest = knn(px, np.asarray(coords, dtype=np.float64), 1).idx[:, 0]
    return np.round(rgb[nearest] * 255).astype(np.uint8).reshape(side, side, 3)


# -- FLOP accounting ---------------------------------------------------------------

def block_flops(n: int, dim: int, heads: int, m: int, mlp_ratio: int = 4) -> int:
    """One block: QKV + output projections (8 n D^2), MLP (4 mlp_ratio n D^2),
    and neighbourhood attention with width ``m``."""
    return 8 * n * dim * dim + 4 * mlp_ratio * n * dim * dim + flop_count_attn(n, m, heads, dim // heads)


def merge_flops(n: int, kept: int, dim: int, out_dim: int, hidden: int, k_m: int) -> int:
    scorer = 2 * n * dim * hidden + 2 * n * hidden
    pooled = 2 * kept * k_m * dim
    proj = 2 * kept * 2 * dim * out_dim
    return scorer + pooled + proj


def flop_report(cfg, resolutions: list[int]) -> list[dict]:
    """Per-resolution forward FLOPs of the encoder with neighbourhood attention
    and of a comparator whose attention spans every token of the stage."""
    rows = []
    for res in resolutions:
        n = (res // cfg.patch) ** 2
        embed = 2 * n * cfg.patch * cfg.patch * cfg.channels * cfg.stages[0].dim
        nbhd = dense = embed
        for i, st in enumerate(cfg.stages):
            m = min(st.groups * st.cluster_size, n)
            for _ in range(st.blocks):
                nbhd += block_flops(n, st.dim, st.heads, m)
                dense += block_flops(n, st.dim, st.heads, n)
            if i + 1 < len(cfg.stages):
                kept = keep_count(st.rate, n)
                mf = merge_flops(n, kept, st.dim, cfg.stages[i + 1].dim, cfg.scorer_hidden, cfg.merge_k)
                nbhd += mf
                dense += mf
                n = kept
        rows.append({"resolution": res, "pixels": res * res, "nbhd_flops": nbhd, "dense_flops": dense})
    return rows


def fit_exponent(x, y) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64))
    lxc = lx - lx.mean()
    return float((lxc * (ly - ly.mean())).sum() / (lxc * lxc).sum())


def write_rows_csv(rows: list[dict], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
