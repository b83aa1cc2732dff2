"""Sparse hierarchical masked autoencoder built on the tape.

A batch is processed as one stacked token set; ``seg`` records which image
each token belongs to and every neighbourhood is built within one image, so
images never interact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attention import BiasNet, nbhd_attention, relative_offsets
from ..geometry import NeighborIndex, balanced_clusters, cluster_neighborhood, grid_points, segmented_knn
from ..interpolation import interpolate
from ..masking import MaskSpec
from ..merging import MergeParams, build_pools, importance_scores, merge_features, select_retained
from ..numerics import ops
from ..numerics.tape import Node, Parameter, Tape
from .config import PipelineConfig


# -- patches -------------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major patch vectors ``(N, patch*patch*C)`` and patch centres ``(N, 2)``."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    vecs = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)
    return vecs, grid_points(h, w, patch).coords


def unpatchify(vecs: np.ndarray, patch: int, height: int, width: int, channels: int = 1) -> np.ndarray:
    gh, gw = height // patch, width // patch
    return vecs.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4).reshape(height, width, channels)


def fourier_features(coords: np.ndarray, size: float, freqs: int, dtype=np.float32) -> np.ndarray:
    """sin/cos of the normalised coordinates at octave frequencies."""
    x = np.asarray(coords, dtype=np.float64) / size
    scales = np.pi * 2.0 ** np.arange(freqs)
    ang = x[:, :, None] * scales  # (N, 2, F)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).reshape(len(x), -1).astype(dtype)


# -- parameters -----------------------------------------------------------------

class ParamStore:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        p = Parameter(np.asarray(value, dtype=self.dtype), name)
        self.params[name] = p
        return p

    def dense(self, name: str, fan_in: int, fan_out: int, zero: bool = False) -> tuple[Parameter, Parameter]:
        w = np.zeros((fan_in, fan_out)) if zero else self.rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
        return self.add(f"{name}.w", w), self.add(f"{name}.b", np.zeros(fan_out))

    def norm(self, name: str, dim: int) -> tuple[Parameter, Parameter]:
        return self.add(f"{name}.g", np.ones(dim)), self.add(f"{name}.b", np.zeros(dim))

    def bias_net(self, name: str, heads: int, hidden: int) -> tuple[Parameter, ...]:
        bn = BiasNet.init(heads, hidden, self.rng, dtype=np.float64)
        return tuple(self.add(f"{name}.{f}", v) for f, v in zip(BiasNet.FIELDS, bn.arrays()))


@dataclass
class AttnParams:
    q: tuple
    k: tuple
    v: tuple
    o: tuple
    blank_k: Parameter
    blank_v: Parameter
    bias: tuple
    heads: int


def _attn_params(store: ParamStore, name: str, dim: int, heads: int, bias_hidden: int, kv_dim: int | None = None) -> AttnParams:
    kv_dim = dim if kv_dim is None else kv_dim
    d = dim // heads
    return AttnParams(
        q=store.dense(f"{name}.q", dim, dim),
        k=store.dense(f"{name}.k", kv_dim, dim),
        v=store.dense(f"{name}.v", kv_dim, dim),
        o=store.dense(f"{name}.o", dim, dim),
        blank_k=store.add(f"{name}.blank_k", store.rng.standard_normal((heads, d)) * 0.5),
        blank_v=store.add(f"{name}.blank_v", np.zeros((heads, d))),
        bias=store.bias_net(f"{name}.bias", heads, bias_hidden),
        heads=heads,
    )


class Model:
    """All learnable state of the autoencoder, built from a config and seed."""

    def __init__(self, cfg: PipelineConfig, seed: int | None = None, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        st = ParamStore(rng, dtype)
        self.store = st
        pix = cfg.patch * cfg.patch * cfg.channels
        pe = 4 * cfg.pos_freqs
        d0 = cfg.stages[0].dim
        self.embed = st.dense("embed", pix, d0)
        self.pos = st.dense("pos", pe, d0)
        self.blocks: list[list[dict]] = []
        self.stage_norms = []
        self.merges: list[MergeParams] = []
        for i, s in enumerate(cfg.stages):
            blocks = []
            for b in range(s.blocks):
                pre = f"enc{i}.blk{b}"
                blocks.append({
                    "ln1": st.norm(f"{pre}.ln1", s.dim),
                    "attn": _attn_params(st, f"{pre}.attn", s.dim, s.heads, cfg.bias_hidden),
                    "ln2": st.norm(f"{pre}.ln2", s.dim),
                    "fc1": st.dense(f"{pre}.fc1", s.dim, cfg.mlp_ratio * s.dim),
                    "fc2": st.dense(f"{pre}.fc2", cfg.mlp_ratio * s.dim, s.dim),
                })
            self.blocks.append(blocks)
            if i + 1 < len(cfg.stages):
                mp = MergeParams.init(s.dim, cfg.stages[i + 1].dim, cfg.scorer_hidden, rng, f"merge{i}",
                                      p_init=1.0 / cfg.patch, k_m=cfg.merge_k, dtype=dtype)
                for p in mp.parameters():
                    st.params[p.name] = p
                self.merges.append(mp)
        dd = cfg.dec_dim
        self.mask_token = st.add("dec.mask_token", rng.standard_normal(dd) * 0.02)
        self.dec_pos = st.dense("dec.pos", pe, dd)
        self.stage_proj = [st.dense(f"dec.stage{i}", s.dim, dd) for i, s in enumerate(cfg.stages)]
        self.dec_layers = []
        for j in range(cfg.dec_depth):
            pre = f"dec.l{j}"
            self.dec_layers.append({
                "offset": st.dense(f"{pre}.offset", dd, 2, zero=True),
                "p": st.add(f"{pre}.p", [1.0 / cfg.patch]),
                "lnq": st.norm(f"{pre}.lnq", dd),
                "lnkv": st.norm(f"{pre}.lnkv", dd),
                "cross": _attn_params(st, f"{pre}.cross", dd, cfg.dec_heads, cfg.bias_hidden),
                "lns": st.norm(f"{pre}.lns", dd),
                "self": _attn_params(st, f"{pre}.self", dd, cfg.dec_heads, cfg.bias_hidden),
                "lnm": st.norm(f"{pre}.lnm", dd),
                "fc1": st.dense(f"{pre}.fc1", dd, cfg.mlp_ratio * dd),
                "fc2": st.dense(f"{pre}.fc2", cfg.mlp_ratio * dd, dd),
            })
        self.head_norm = st.norm("dec.head_ln", dd)
        self.head = st.dense("dec.head", dd, pix)
        self.aux_heads = [
            {"p": st.add(f"aux{i}.p", [1.0 / cfg.patch]), "head": st.dense(f"aux{i}.head", s.dim, pix)}
            for i, s in enumerate(cfg.stages[:-1])
        ]

    def parameters(self) -> list[Parameter]:
        return list(self.store.params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.store.params)

    def astype(self, dtype) -> "Model":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.zero_grad()
        return self


# -- building blocks ----------------------------------------------------------------

def _linear(tape: Tape, x: Node, wb) -> Node:
    w, b = wb
    return ops.add(ops.matmul(x, tape.param(w)), tape.param(b))


def _norm(tape: Tape, x: Node, gb) -> Node:
    g, b = gb
    return ops.layer_norm(x, tape.param(g), tape.param(b))


def _mlp(tape: Tape, x: Node, fc1, fc2) -> Node:
    return _linear(tape, ops.gelu(_linear(tape, x, fc1)), fc2)


def _attend(tape: Tape, ap: AttnParams, xq: Node, xkv: Node, nbr: NeighborIndex, offsets) -> Node:
    nq, dim = xq.shape
    nk = xkv.shape[0]
    h = ap.heads
    d = dim // h
    q = ops.reshape(_linear(tape, xq, ap.q), (nq, h, d))
    k = ops.reshape(_linear(tape, xkv, ap.k), (nk, h, d))
    v = ops.reshape(_linear(tape, xkv, ap.v), (nk, h, d))
    out = nbhd_attention(q, k, v, tape.param(ap.blank_k), tape.param(ap.blank_v),
                         [tape.param(p) for p in ap.bias], offsets, nbr)
    return _linear(tape, ops.reshape(out, (nq, dim)), ap.o)


def _segments(seg: np.ndarray) -> list[tuple[int, int, int]]:
    """(segment id, start, stop) for a contiguous segment array."""
    out = []
    if seg.size == 0:
        return out
    bounds = np.flatnonzero(np.diff(seg)) + 1
    starts = np.concatenate([[0], bounds])
    stops = np.concatenate([bounds, [seg.size]])
    return [(int(seg[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def segment_knn(q_coords, q_seg, k_coords, k_seg, k: int) -> NeighborIndex:
    """knn restricted to keys of the same image, in global key indices."""
    return segmented_knn(q_coords, q_seg, k_coords, k_seg, k)


def cluster_attention_index(coords, seg, cluster_size: int, groups: int, patch: float) -> NeighborIndex:
    parts = []
    for _, s, e in _segments(seg):
        assign = balanced_clusters(coords[s:e], cluster_size, cell=patch)
        parts.append(cluster_neighborhood(assign, coords[s:e], groups).offset(s))
    return NeighborIndex.stack(parts)


# -- encoder ------------------------------------------------------------------------

@dataclass
class StageOutput:
    coords: np.ndarray  # (N, 2)
    seg: np.ndarray  # (N,) image index
    feats: Node  # after this stage's blocks
    merged: Node | None = None  # input of the next stage
    retained: np.ndarray | None = None  # local indices kept by the merge
    scores: Node | None = None

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    def counts(self) -> np.ndarray:
        return np.bincount(self.seg)


def _as_batch(images) -> np.ndarray:
    imgs = np.asarray(images)
    if imgs.ndim == 2:
        imgs = imgs[None, ..., None]
    elif imgs.ndim == 3:
        imgs = imgs[..., None] if imgs.shape[-1] not in (1, 3) or imgs.shape[0] == imgs.shape[1] else imgs[None]
    return imgs


def _mask_array(m) -> np.ndarray:
    return np.asarray(m.mask if isinstance(m, MaskSpec) else m, dtype=bool)


def encode(model: Model, tape: Tape, images, masks, trace: list | None = None) -> list[StageOutput]:
    """Encoder over the visible patches only.

    ``images`` is ``(B, H, W, C)`` (a single ``(H, W)`` or ``(H, W, C)`` image
    is accepted); ``masks`` holds one patch-grid mask per image. Masked
    patches are dropped before any computation.
    """
    cfg = model.cfg
    imgs = _as_batch(images)
    masks = [masks] if isinstance(masks, (MaskSpec, np.ndarray)) and imgs.shape[0] == 1 else list(masks)
    dtype = model.embed[0].value.dtype
    vecs, coords, seg = [], [], []
    for b, (img, m) in enumerate(zip(imgs, masks)):
        mk = _mask_array(m)
        if mk.shape != (cfg.grid, cfg.grid):
            raise ValueError(f"mask grid {mk.shape} does not match patch grid {(cfg.grid, cfg.grid)}")
        visible = np.flatnonzero(~mk.ravel())
        if visible.size == 0:
            raise ValueError(f"image {b} has no visible patches")
        pv, centres = patchify(img, cfg.patch)
        vecs.append(pv[visible])
        coords.append(centres[visible])
        seg.append(np.full(visible.size, b))
    vecs = np.concatenate(vecs).astype(dtype)
    coords = np.concatenate(coords)
    seg = np.concatenate(seg)
    if trace is not None:
        trace.append(("embed",))

    x = _linear(tape, tape.leaf(vecs, "patches"), model.embed)
    pe = fourier_features(coords, cfg.image_size, cfg.pos_freqs, dtype)
    x = ops.add(x, _linear(tape, tape.leaf(pe, "pos_features"), model.pos))

    outputs = []
    for i, scfg in enumerate(cfg.stages):
        nbr = cluster_attention_index(coords, seg, scfg.cluster_size, scfg.groups, cfg.patch)
        offsets = relative_offsets(coords, coords, nbr, cfg.patch).astype(dtype)
        if trace is not None:
            trace.append(("cluster", i))
        for blk in model.blocks[i]:
            x = ops.add(x, _attend(tape, blk["attn"], _norm(tape, x, blk["ln1"]), _norm(tape, x, blk["ln1"]), nbr, offsets))
            x = ops.add(x, _mlp(tape, _norm(tape, x, blk["ln2"]), blk["fc1"], blk["fc2"]))
            if trace is not None:
                trace.append(("block", i))
        out = StageOutput(coords, seg, x)
        outputs.append(out)
        if i + 1 == len(cfg.stages):
            break
        mp = model.merges[i]
        scores = importance_scores(tape, x, mp)
        kept, pools, valid, dists = [], [], [], []
        for _, s, e in _segments(seg):
            r = select_retained(scores.value[s:e], scfg.rate)
            _, pool, pv, pd = build_pools(coords[s:e], r, mp.k_m)
            kept.append(r + s)
            pools.append(pool + s)
            valid.append(pv)
            dists.append(pd)
        kept = np.concatenate(kept)
        x = merge_features(tape, x, scores, kept, np.concatenate(pools), np.concatenate(valid), np.concatenate(dists), mp)
        out.merged, out.retained, out.scores = x, kept, scores
        coords, seg = coords[kept], seg[kept]
        if trace is not None:
            trace.append(("merge", i))
    return outputs


# -- decoder --------------------------------------------------------------------------

@dataclass
class Queries:
    centres: np.ndarray  # (Q, 2) masked patch centres
    seg: np.ndarray  # (Q,)
    patch_index: np.ndarray  # (Q,) flat patch index within its image

    def __len__(self) -> int:
        return self.centres.shape[0]


def masked_queries(cfg: PipelineConfig, masks) -> Queries:
    centres = grid_points(cfg.image_size, cfg.image_size, cfg.patch).coords
    cs, segs, idx = [], [], []
    for b, m in enumerate(masks):
        hit = np.flatnonzero(_mask_array(m).ravel())
        cs.append(centres[hit])
        segs.append(np.full(hit.size, b))
        idx.append(hit)
    return Queries(np.concatenate(cs).reshape(-1, 2), np.concatenate(segs).astype(np.intp), np.concatenate(idx).astype(np.intp))


@dataclass
class DecodeState:
    offsets: list = field(default_factory=list)  # per-layer offset Nodes (Q, 2), pixels
    features: list = field(default_factory=list)  # per-layer query features after cross-attention


def predict_offset(tape: Tape, model: Model, layer: dict, f: Node) -> Node:
    """Bounded sampling offset in pixels: each component is
    ``c tanh(raw / c)`` with ``c = clamp / sqrt(2)``, so the norm stays
    below ``clamp`` patch widths."""
    cfg = model.cfg
    c = cfg.offset_clamp / np.sqrt(2.0)
    raw = _linear(tape, f, layer["offset"])
    return ops.scale(ops.tanh(ops.scale(raw, 1.0 / c)), c * cfg.patch)


def decode(model: Model, tape: Tape, stages: list[StageOutput], queries: Queries, state: DecodeState | None = None) -> Node | None:
    """Deformable cross-attention decoder; returns ``(Q, patch*patch*C)``
    pixel predictions, or ``None`` when nothing is masked."""
    cfg = model.cfg
    if len(queries) == 0:
        return None
    dtype = model.embed[0].value.dtype
    nq = len(queries)
    pe = fourier_features(queries.centres, cfg.image_size, cfg.pos_freqs, dtype)
    f = ops.add(_linear(tape, tape.leaf(pe, "dec_pos_features"), model.dec_pos), tape.param(model.mask_token))
    stage_tokens = []
    for i, so in enumerate(stages):
        spe = fourier_features(so.coords, cfg.image_size, cfg.pos_freqs, dtype)
        tok = ops.add(_linear(tape, so.feats, model.stage_proj[i]), _linear(tape, tape.leaf(spe, "stage_pos"), model.dec_pos))
        stage_tokens.append(tok)
    self_nbr = segment_knn(queries.centres, queries.seg, queries.centres, queries.seg, cfg.self_k)
    self_off = relative_offsets(queries.centres, queries.centres, self_nbr, cfg.patch).astype(dtype)
    ident = NeighborIndex(np.arange(nq)[:, None], np.ones((nq, 1), dtype=bool))
    ref = queries.centres.astype(dtype)
    for j, layer in enumerate(model.dec_layers):
        i = len(stages) - 1 - (j % len(stages))
        so = stages[i]
        delta = predict_offset(tape, model, layer, f)
        sample = ops.add(delta, ref)
        nbr = segment_knn(sample.value, queries.seg, so.coords, so.seg, cfg.gather_k)
        virtual = interpolate(sample, so.coords, stage_tokens[i], nbr, tape.param(layer["p"]))
        rel = ops.reshape(ops.scale(delta, 1.0 / cfg.patch), (nq, 1, 2))
        f = ops.add(f, _attend(tape, layer["cross"], _norm(tape, f, layer["lnq"]), _norm(tape, virtual, layer["lnkv"]), ident, rel))
        f = ops.add(f, _attend(tape, layer["self"], _norm(tape, f, layer["lns"]), _norm(tape, f, layer["lns"]), self_nbr, self_off))
        f = ops.add(f, _mlp(tape, _norm(tape, f, layer["lnm"]), layer["fc1"], layer["fc2"]))
        if state is not None:
            state.offsets.append(delta)
            state.features.append(f)
    return _linear(tape, _norm(tape, f, model.head_norm), model.head)


def deep_sup_heads(model: Model, tape: Tape, stages: list[StageOutput], queries: Queries) -> list[Node]:
    """One auxiliary reconstruction per intermediate stage: interpolate the
    stage tokens at each masked patch centre, then a linear pixel head."""
    cfg = model.cfg
    if len(queries) == 0:
        return []
    out = []
    for i, so in enumerate(stages[:-1]):
        aux = model.aux_heads[i]
        nbr = segment_knn(queries.centres, queries.seg, so.coords, so.seg, cfg.gather_k)
        tok = interpolate(queries.centres, so.coords, so.feats, nbr, tape.param(aux["p"]))
        out.append(_linear(tape, tok, aux["head"]))
    return out


def patch_targets(cfg: PipelineConfig, images, queries: Queries) -> np.ndarray:
    imgs = _as_batch(images)
    rows = []
    for b, img in enumerate(imgs):
        vecs, _ = patchify(img, cfg.patch)
        if cfg.norm_pix:
            vecs = (vecs - vecs.mean(axis=1, keepdims=True)) / np.sqrt(vecs.var(axis=1, keepdims=True) + 1e-6)
        rows.append(vecs[queries.patch_index[queries.seg == b]])
    return np.concatenate(rows) if rows else np.zeros((0, cfg.patch * cfg.patch * cfg.channels))


def mae_loss(tape: Tape, main: Node | None, aux: list[Node], targets: np.ndarray, weight: float):
    """Masked-patch MSE (mean over pixels, then patches) plus ``weight`` times
    the mean auxiliary loss. Returns ``(total, main, aux_mean)``; with no
    masked patches everything is a zero constant."""
    if main is None or targets.shape[0] == 0:
        zero = tape.leaf(np.zeros((), dtype=np.float64), "zero_loss")
        return zero, zero, zero
    t = targets.astype(main.value.dtype)
    main_loss = ops.mse(main, t)
    if not aux:
        return main_loss, main_loss, None
    aux_losses = [ops.mse(a, t) for a in aux]
    aux_mean = aux_losses[0]
    for a in aux_losses[1:]:
        aux_mean = ops.add(aux_mean, a)
    aux_mean = ops.scale(aux_mean, 1.0 / len(aux_losses))
    if weight == 0.0:
        return main_loss, main_loss, aux_mean
    return ops.add(main_loss, ops.scale(aux_mean, weight)), main_loss, aux_mean


@dataclass
class ForwardResult:
    loss: Node
    main_loss: Node
    aux_loss: Node | None
    stages: list[StageOutput]
    queries: Queries
    recon: Node | None
    aux: list[Node]
    targets: np.ndarray


def forward(model: Model, tape: Tape, images, masks, trace: list | None = None) -> ForwardResult:
    cfg = model.cfg
    imgs = _as_batch(images)
    masks = list(masks) if not isinstance(masks, (MaskSpec, np.ndarray)) else [masks]
    stages = encode(model, tape, imgs, masks, trace)
    queries = masked_queries(cfg, masks)
    recon = decode(model, tape, stages, queries)
    aux = deep_sup_heads(model, tape, stages, queries)
    targets = patch_targets(cfg, imgs, queries)
    total, main, aux_mean = mae_loss(tape, recon, aux, targets, cfg.deep_sup_weight)
    return ForwardResult(total, main, aux_mean, stages, queries, recon, aux, targets)


# -- feature hooks for diagnostics ------------------------------------------------------

def stage_features(model: Model, images, hook: str = "encoder") -> list[tuple[np.ndarray, np.ndarray, np.ndarray] | None]:
    """Per-stage ``(coords, seg, feats)`` of unmasked ``images``.

    ``hook="encoder"`` returns the stage tokens themselves. ``hook="decoder"``
    queries every patch centre and returns the query features right after
    the last decoder layer that cross-attends to each stage (``None`` for a
    stage no layer reads).
    """
    cfg = model.cfg
    imgs = _as_batch(images)
    empty = [np.zeros((cfg.grid, cfg.grid), dtype=bool)] * len(imgs)
    stages = encode(model, Tape(), imgs, empty)
    if hook == "encoder":
        return [(s.coords, s.seg, s.feats.value) for s in stages]
    if hook != "decoder":
        raise ValueError(f"unknown feature hook {hook!r}")
    queries = masked_queries(cfg, [np.ones((cfg.grid, cfg.grid), dtype=bool)] * len(imgs))
    state = DecodeState()
    decode(model, Tape(), stages, queries, state)
    out: list = [None] * len(stages)
    for j, f in enumerate(state.features):
        out[len(stages) - 1 - (j % len(stages))] = (queries.centres, queries.seg, f.value)
    return out
