"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Criterion 9 trains six toy models and takes roughly half an hour.
"""
import time
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest

from sparsemae.attention import AttnInputs, BiasNet, nbhd_attn_naive, nbhd_attn_streaming
from sparsemae.diagnostics import effective_rank, effective_rank_from_singular_values, fit_exponent, flop_report
from sparsemae.geometry import knn
from sparsemae.gradsuite import CASES, run_suite
from sparsemae.interpolation import stability_probe
from sparsemae.masking import dft2_direct, fft2, make_mask, power_spectrum, psd_slope, radial_psd
from sparsemae.merging import select_retained
from sparsemae.numerics import Tape
from sparsemae.pipeline import FixedData, Model, SyntheticData, encode, tiny_config, toy_config
from sparsemae.pipeline.train import masked_mse, stage_ranks, step_masks, train


def half_up(x) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


# -- 1 -------------------------------------------------------------------------------

def _random_attn(rng, dt):
    n = int(rng.integers(2, 257))
    m = int(rng.integers(1, min(32, n) + 1))
    h, d = int(rng.integers(1, 5)), int(rng.integers(1, 17))
    pts = rng.uniform(0, np.sqrt(n), (n, 2))
    nbr = knn(pts, pts, m)
    arrays = [rng.standard_normal(s).astype(dt) for s in ((n, h, d), (n, h, d), (n, h, d), (h, d), (h, d))]
    return AttnInputs(*arrays, nbr, BiasNet.init(h, 8, rng, dt), (pts[nbr.idx] - pts[:, None]).astype(dt))


def test_criterion_01_streaming_oracle(report):
    t0 = time.perf_counter()
    worst = {"b32": 0.0, "b64": 0.0}
    rng = np.random.default_rng(2024)
    configs = 120
    for _ in range(configs):
        seed = int(rng.integers(2**31))
        for name, dt in (("b32", np.float32), ("b64", np.float64)):
            inp = _random_attn(np.random.default_rng(seed), dt)
            err = float(np.max(np.abs(nbhd_attn_streaming(inp) - nbhd_attn_naive(inp))))
            worst[name] = max(worst[name], err)
    elapsed = time.perf_counter() - t0
    ok = worst["b32"] <= 1e-5 and worst["b64"] <= 1e-12 and elapsed < 60
    report(1, ok, f"{configs} configs, max abs diff b32 {worst['b32']:.2e} (<=1e-5), "
                  f"b64 {worst['b64']:.2e} (<=1e-12), {elapsed:.1f}s (<60s)")
    assert ok


# -- 2 -------------------------------------------------------------------------------

def test_criterion_02_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(range(20))
    elapsed = time.perf_counter() - t0
    worst = {name: max(r.max_error for r in reps) for name, reps in results.items()}
    bad = sorted(name for name, e in worst.items() if e > 1e-6)
    counts = {len(reps) for reps in results.values()}
    ok = not bad and counts == {20} and set(results) == set(CASES) and elapsed < 300
    top = max(worst, key=worst.get)
    report(2, ok, f"{len(results)} ops x 20 seeds, worst rel err {worst[top]:.2e} ({top}, <=1e-6), "
                  f"failing {bad or 'none'}, {elapsed:.0f}s (<300s)")
    assert ok


# -- 3 -------------------------------------------------------------------------------

def test_criterion_03_reduced_precision(report):
    rows = stability_probe([20.0], [(0.01, 10.0)], "b16emu", trials=1000, seed=0)
    rate = {r["kernel"]: r["failure_rate"] for r in rows}
    ok = rate["softmax"] == 0 and rate["invpow"] > 0
    report(3, ok, f"b16emu p=20 d in [0.01, 10], 1000 seeds: softmax failures {rate['softmax']:.3f} (==0), "
                  f"inverse-power {rate['invpow']:.3f} (>0)")
    assert ok


# -- 4 -------------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="0.4 * 4096 = 1638.4 rounds to 1638 under the exact-retention rule, not 1639")
def test_criterion_04_token_ledger(report):
    rng = np.random.default_rng(0)
    counts = [4096]
    for _ in range(3):
        counts.append(select_retained(rng.random(counts[-1]), 0.4).size)
    reduction = 1 - counts[-1] / counts[0]
    ok = counts == [4096, 1639, 656, 262] and 0.93 <= reduction <= 0.95
    report(4, ok, f"counts {' -> '.join(map(str, counts))} (expected 4096 -> 1639 -> 656 -> 262), "
                  f"cumulative reduction {reduction:.2%} (in [93%, 95%])")
    assert counts == [4096, 1639, 656, 262]
    assert 0.93 <= reduction <= 0.95


# -- 5 -------------------------------------------------------------------------------

def test_criterion_05_retention_exact(report):
    rng = np.random.default_rng(5)
    wrong = []
    for rate in (0.25, 0.35, 0.4, 0.5):
        for n in (1, 7, 100, 4096):
            got = select_retained(rng.random(n), rate).size
            if got != max(1, half_up(Decimal(str(rate)) * n)):
                wrong.append((rate, n, got))
    report(5, not wrong, f"16 (d_s, N) pairs, mismatches {wrong or 'none'}")
    assert not wrong


# -- 6 -------------------------------------------------------------------------------

def test_criterion_06_spectral(report):
    t0 = time.perf_counter()
    slopes = {}
    for strategy in ("perlin", "random"):
        masks = np.stack([make_mask(strategy, (64, 64), 0.5, s).mask for s in range(640)])
        prof = radial_psd(1.0 - 2.0 * masks)
        slopes[strategy] = {band: -psd_slope(prof, lo, hi) for band, (lo, hi) in (("mid", (4, 16)), ("high", (16, 32)))}
    elapsed = time.perf_counter() - t0
    p_mid, r_high, r_mid = slopes["perlin"]["mid"], slopes["random"]["high"], slopes["random"]["mid"]
    ok = p_mid <= -1.0 and abs(r_high) <= 0.3 and p_mid < r_mid and elapsed < 120
    report(6, ok, f"640 masks: perlin mid slope {p_mid:+.3f} (<=-1), random high slope {r_high:+.3f} (|.|<=0.3), "
                  f"random mid {r_mid:+.3f}, {elapsed:.1f}s (<120s)")
    assert ok


# -- 7 -------------------------------------------------------------------------------

def test_criterion_07_exact_ratio(report):
    wrong, total = [], 0
    for grid in (8, 14, 32, 64):
        for r in (0.35, 0.5, 0.65, 0.75):
            want = half_up(Decimal(str(r)) * grid * grid)
            for strategy in ("perlin", "random"):
                for seed in range(50):
                    total += 1
                    got = make_mask(strategy, (grid, grid), r, seed).masked_count
                    if got != want:
                        wrong.append((strategy, grid, r, seed, got, want))
    report(7, not wrong, f"{total} masks over grids 8/14/32/64, mismatches {len(wrong)}")
    assert not wrong


# -- 8 -------------------------------------------------------------------------------

def test_criterion_08_effective_rank(report):
    hand = effective_rank_from_singular_values([2.0, 1.0, 1.0, 0.0], 4, 4)
    hand_err = abs(hand - 2**1.5 / 4)
    rng = np.random.default_rng(8)
    out_of_bounds = 0
    for _ in range(1000):
        n, d = rng.integers(2, 65, 2)
        r = effective_rank(rng.standard_normal((n, d)) * rng.uniform(0.1, 10, d))
        out_of_bounds += not (1 / min(n, d) - 1e-12 <= r <= 1 + 1e-12)
    f = rng.standard_normal((30, 12))
    base = effective_rank(f)
    scale_err = max(abs(effective_rank(c * f) - base) for c in (1e-3, 0.5, 7.0, 1e4))
    ok = hand_err <= 1e-9 and out_of_bounds == 0 and scale_err <= 1e-12
    report(8, ok, f"hand error {hand_err:.1e} (<=1e-9), bound violations {out_of_bounds}/1000, "
                  f"scale drift {scale_err:.1e} (<=1e-12)")
    assert ok


# -- 9 -------------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="deep supervision does not open a 0.1 rank gap on the toy model")
def test_criterion_09_deep_supervision_rank(report):
    t0 = time.perf_counter()
    finals = {0.0: [], 0.5: []}
    for seed in range(3):
        for lam in finals:
            cfg = toy_config(seed=seed, deep_sup_weight=lam, rank_every=0)
            res = train(cfg)
            evals = SyntheticData(cfg.image_size, seed + 10_000, cfg.channels).batch(0, 4)
            finals[lam].append(stage_ranks(res.model, evals)[-1])
    elapsed = time.perf_counter() - t0
    gap = np.mean(finals[0.5]) - np.mean(finals[0.0])
    ok = gap >= 0.1 and elapsed < 1800
    report(9, ok, f"final-stage R_hat lambda=0 {np.round(finals[0.0], 3).tolist()}, lambda=0.5 "
                  f"{np.round(finals[0.5], 3).tolist()}, mean gap {gap:+.3f} (>=0.1), {elapsed / 60:.1f} min (<30)")
    assert gap >= 0.1
    assert elapsed < 1800


# -- 10 ------------------------------------------------------------------------------

def test_criterion_10_mask_agnostic(report):
    cfg = toy_config()
    model = Model(cfg, dtype=np.float64)
    imgs = SyntheticData(cfg.image_size, 3).batch(0, 2)
    masks = step_masks(cfg, 0, 2, 3)
    noisy = imgs.copy()
    rng = np.random.default_rng(10)
    p = cfg.patch
    for b, m in enumerate(masks):
        for r, c in zip(*np.nonzero(m.mask)):
            noisy[b, r * p:(r + 1) * p, c * p:(c + 1) * p] = rng.standard_normal((p, p, cfg.channels)) * 100
    trace_masked, trace_full = [], []
    a = encode(model, Tape(), imgs, masks, trace_masked)
    b = encode(model, Tape(), noisy, masks)
    encode(model, Tape(), imgs, [np.zeros((cfg.grid, cfg.grid), bool)] * 2, trace_full)
    bitwise = all(np.array_equal(sa.feats.value, sb.feats.value) for sa, sb in zip(a, b))
    same_path = trace_masked == trace_full and len(trace_full) > 0
    ok = bitwise and same_path
    report(10, ok, f"b64 stage outputs bitwise equal under masked-pixel noise: {bitwise}; "
                   f"r=0 trace identical ({len(trace_full)} recorded steps): {same_path}")
    assert ok


# -- 11 ------------------------------------------------------------------------------

def test_criterion_11_training_sanity(report):
    cfg = tiny_config(steps=500, batch_size=1, rank_every=0, seed=0)
    img = SyntheticData(cfg.image_size, 0).batch(0, 1)
    mask = step_masks(cfg, 0, 1, 0)
    model = Model(cfg)
    before = masked_mse(model, img, mask)
    train(cfg, data=FixedData(img), model=model, masks=mask)
    after = masked_mse(model, img, mask)
    drop = 1 - after / before

    frozen_cfg = tiny_config(lr=0.0, steps=20, batch_size=2, rank_every=0)
    frozen = Model(frozen_cfg)
    start = {n: p.value.copy() for n, p in frozen.named_parameters().items()}
    train(frozen_cfg, model=frozen)
    unchanged = all(np.array_equal(p.value, start[n]) for n, p in frozen.named_parameters().items())
    ok = drop >= 0.9 and unchanged
    report(11, ok, f"single-image overfit masked MSE {before:.4f} -> {after:.4f} ({drop:.1%} drop, >=90%); "
                   f"lr=0 parameters unchanged: {unchanged}")
    assert ok


# -- 12 ------------------------------------------------------------------------------

def test_criterion_12_flop_scaling(report):
    rows = flop_report(toy_config(), [448, 512, 768])
    px = [r["pixels"] for r in rows]
    e_nbhd = fit_exponent(px, [r["nbhd_flops"] for r in rows])
    e_dense = fit_exponent(px, [r["dense_flops"] for r in rows])
    ok = e_nbhd <= 1.3 and e_dense >= 1.7
    report(12, ok, f"FLOP exponent vs pixels: neighbourhood {e_nbhd:.3f} (<=1.3), dense {e_dense:.3f} (>=1.7)")
    assert ok


# -- 13 ------------------------------------------------------------------------------

def test_criterion_13_fft(report):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((64, 64))
    parseval = abs((x * x).sum() - power_spectrum(x).sum() / x.size) / (x * x).sum()
    dft_err = 0.0
    for n in (8, 16):
        g = rng.standard_normal((n, n))
        dft_err = max(dft_err, float(np.max(np.abs(fft2(g) - dft2_direct(g)))))
    ok = parseval <= 1e-6 and dft_err <= 1e-9
    report(13, ok, f"Parseval relative error {parseval:.1e} (<=1e-6), max diff to direct DFT {dft_err:.1e} (<=1e-9)")
    assert ok
