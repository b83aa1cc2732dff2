"""Command-line entry point: ``sparsemae <subcommand> [options]``.

Every run writes ``manifest.json`` next to its outputs. CSV files start with a
``# manifest <hash>`` comment, where the hash covers the subcommand, resolved
configuration, seed and build, so reruns of the same manifest produce
byte-identical CSVs (timing columns of ``bench-attn`` excepted).

Exit codes: 0 success, 2 configuration or input error, 3 non-finite
numerics, 4 a requested check failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
OUT_ENV = "SPARSEMAE_OUT"


class CheckFailed(RuntimeError):
    pass


class UsageError(ValueError):
    pass


# -- manifest ---------------------------------------------------------------------

def build_id() -> str:
    from . import __version__
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        sha = rev.stdout.strip() if rev.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"sparsemae-{__version__}" + (f"+{sha}" if sha else "")


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    build: str
    outputs: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0

    def digest(self) -> str:
        key = json.dumps({"subcommand": self.subcommand, "config": self.config, "seed": self.seed,
                          "build": self.build}, sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    @property
    def comment(self) -> str:
        return f"manifest {self.digest()}"

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        data = asdict(self)
        data["hash"] = self.digest()
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


class Run:
    """Output directory plus manifest bookkeeping for one subcommand."""

    def __init__(self, args, config: dict):
        self.t0 = time.perf_counter()
        self.out = Path(args.out or os.environ.get(OUT_ENV) or Path("runs") / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, config, args.seed, build_id())

    def path(self, name: str) -> Path:
        p = self.out / name
        self.manifest.outputs.append(name)
        return p

    def finish(self) -> Path:
        self.manifest.wall_time_s = round(time.perf_counter() - self.t0, 3)
        return self.manifest.write(self.out)


def _write_csv(path: Path, rows: list[dict], comment: str, fields: list[str] | None = None) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=fields or list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- pipeline config from flags ---------------------------------------------------------

def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _pipeline_config(args):
    from .pipeline.config import ConfigError, PipelineConfig
    text = ""
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        text = p.read_text()
    over = _overrides(args.set)
    over.setdefault("seed", str(args.seed))
    return PipelineConfig.from_ini(text, over)


# -- subcommands ----------------------------------------------------------------------------

def cmd_bench_attn(args) -> int:
    import numpy as np

    from .attention import AttnInputs, BiasNet, flop_count_attn, nbhd_attn_naive, nbhd_attn_streaming
    from .geometry import knn

    for name in ("n", "m", "heads", "dim", "reps"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.m > args.n:
        raise UsageError("--m cannot exceed --n")
    run = Run(args, {k: getattr(args, k) for k in ("n", "m", "heads", "dim", "reps", "half_io", "precision")})
    dt = np.float64 if args.precision == "b64" else np.float32
    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(0, np.sqrt(args.n), (args.n, 2))
    nbr = knn(pts, pts, args.m)
    h, d = args.heads, args.dim
    inp = AttnInputs(
        *(rng.standard_normal(s).astype(dt) for s in ((args.n, h, d), (args.n, h, d), (args.n, h, d), (h, d), (h, d))),
        nbr, BiasNet.init(h, 8, rng, dt), (pts[nbr.idx] - pts[:, None]).astype(dt),
    )

    def timed(fn):
        times, out = [], None
        for _ in range(args.reps):
            t = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t)
        return out, float(np.mean(times))

    ref, t_naive = timed(lambda: nbhd_attn_naive(inp))
    flops = flop_count_attn(args.n, args.m, h, d)

    def row(impl, seconds, err, half_io=False):
        return {"N": args.n, "M": args.m, "impl": impl, "wall_ns": int(round(seconds * 1e9)), "flops": flops,
                "max_abs_err_vs_naive": err, "heads": h, "dim": d, "precision": args.precision, "half_io": half_io}

    rows = [row("naive", t_naive, 0.0)]
    out, t_stream = timed(lambda: nbhd_attn_streaming(inp))
    err = float(np.max(np.abs(out - ref)))
    rows.append(row("streaming", t_stream, err))
    if args.half_io:
        out_h, t_half = timed(lambda: nbhd_attn_streaming(inp, half_io=True))
        rows.append(row("streaming", t_half, float(np.max(np.abs(out_h - ref))), half_io=True))
    _write_csv(run.path("bench_attn.csv"), rows, run.manifest.comment)
    run.finish()
    tol = 1e-12 if args.precision == "b64" else 1e-5
    _say(f"naive {t_naive * 1e3:.2f} ms, streaming {t_stream * 1e3:.2f} ms, max abs err {err:.3e} (tol {tol:.0e})")
    if err > tol:
        raise CheckFailed(f"streaming/naive mismatch {err:.3e} > {tol:.0e}")
    return EXIT_OK


def _check_ratio_arg(ratio: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise UsageError(f"--ratio must lie in [0, 1), got {ratio}")


def _mask_seeds(seed: int, count: int):
    import numpy as np
    return [int(s) for s in np.random.SeedSequence([seed, 0x6D61736B]).generate_state(count)]


def _masks(strategy: str, grid: int, ratio: float, seed: int, count: int, patch: int):
    import numpy as np

    from .masking import make_mask
    seeds = _mask_seeds(seed, count)
    return seeds, np.stack([make_mask(strategy, (grid, grid), ratio, s, patch).mask for s in seeds])


def cmd_mask_gen(args) -> int:
    import numpy as np

    from .imageio import write_pgm
    from .masking import masked_count, upsample
    from .numerics import aft1

    _check_ratio_arg(args.ratio)
    if args.grid < 1 or args.count < 1 or args.patch < 1:
        raise UsageError("--grid, --count and --patch must be >= 1")
    run = Run(args, {k: getattr(args, k) for k in ("strategy", "ratio", "grid", "count", "patch", "previews")})
    seeds, masks = _masks(args.strategy, args.grid, args.ratio, args.seed, args.count, args.patch)
    expected = masked_count(args.ratio, args.grid * args.grid)
    aft1.save(run.path("masks.aft1"), masks.astype(np.uint8), aft1.NAME_CODES["u8"])
    rows = [{"index": i, "seed": s, "masked": int(m.sum()), "expected": expected} for i, (s, m) in enumerate(zip(seeds, masks))]
    _write_csv(run.path("mask_counts.csv"), rows, run.manifest.comment)
    for i in range(min(args.previews, len(masks))):
        write_pgm(run.path(f"mask_{i:03d}.pgm"), upsample(~masks[i], args.preview_scale))
    run.finish()
    bad = [r["index"] for r in rows if r["masked"] != expected]
    _say(f"{len(masks)} {args.strategy} masks, {expected} of {args.grid * args.grid} cells masked each")
    if bad:
        raise CheckFailed(f"masks {bad[:5]} do not mask exactly {expected} cells")
    return EXIT_OK


def _read_mask_file(item: str):
    """``[NAME=]PATH`` of an AFT1 stack (nonzero = masked) or a PGM preview
    (dark = masked). Returns ``(name, bool array of dims (K, H, W))``."""
    from .imageio import read_pnm
    from .numerics import aft1
    name, _, path = item.rpartition("=")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input {p} not found")
    try:
        if p.suffix.lower() in (".pgm", ".pnm"):
            img = read_pnm(p)
            if img.ndim != 2:
                raise ValueError("expected a graymap")
            masks = img < 128
        else:
            masks = aft1.load(p) != 0
    except ValueError as exc:
        raise UsageError(f"cannot read masks from {p}: {exc}") from None
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3:
        raise UsageError(f"{p}: expected (H, W) or (K, H, W) masks, got dims {masks.shape}")
    return name or p.stem, masks


def cmd_psd(args) -> int:
    from .masking import psd_slope, radial_psd, upsample, write_psd_csv

    _check_ratio_arg(args.ratio)
    if args.samples < 1 or args.grid < 2 or args.upsample < 1:
        raise UsageError("--samples >= 1, --grid >= 2 and --upsample >= 1 required")
    if args.input:
        sources = [_read_mask_file(item) for item in args.input]
        strategies = [name for name, _ in sources]
    else:
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    run = Run(args, {"strategies": strategies, "ratio": args.ratio, "grid": args.grid, "samples": args.samples,
                     "upsample": args.upsample, "mid_band": args.mid_band, "high_band": args.high_band,
                     "input": args.input or []})
    slopes = []
    for i, strat in enumerate(strategies):
        if args.input:
            # files already carry their pixels-per-cell factor
            signed = 1.0 - 2.0 * sources[i][1]
        else:
            _, masks = _masks(strat, args.grid, args.ratio, args.seed, args.samples, 8)
            signed = 1.0 - 2.0 * masks
            if args.upsample > 1:
                signed = upsample(signed, args.upsample)
        try:
            prof = radial_psd(signed)
        except ValueError as exc:
            raise UsageError(f"{strat}: {exc}") from None
        write_psd_csv(prof, run.path(f"psd_{strat}.csv"), run.manifest.comment)
        for band, (lo, hi) in (("mid", args.mid_band), ("high", args.high_band)):
            lo, hi = lo * args.upsample, hi * args.upsample
            try:
                slope = -psd_slope(prof, lo, hi)
            except ValueError:
                slope = float("nan")  # e.g. r = 0: only the DC term carries power
            slopes.append({"strategy": strat, "band": band, "f_lo": lo, "f_hi": hi, "slope": slope})
            _say(f"{strat:>7s} {band:>4s} band [{lo:g}, {hi:g}]: slope {slope:+.3f}")
    _write_csv(run.path("slopes.csv"), slopes, run.manifest.comment)
    run.finish()
    if args.check:
        get = {(r["strategy"], r["band"]): r["slope"] for r in slopes}
        problems = []
        if ("perlin", "mid") in get and not get[("perlin", "mid")] <= -1.0:
            problems.append(f"perlin mid-band slope {get[('perlin', 'mid')]:.3f} > -1")
        if ("random", "high") in get and not abs(get[("random", "high")]) <= 0.3:
            problems.append(f"random high-band slope {get[('random', 'high')]:.3f} outside +-0.3")
        if ("perlin", "mid") in get and ("random", "mid") in get and not get[("perlin", "mid")] < get[("random", "mid")]:
            problems.append("perlin slope not steeper than random")
        if problems:
            raise CheckFailed("; ".join(problems))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .pipeline.train import train, write_metrics

    cfg = _pipeline_config(args)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    run = Run(args, {"config": cfg.to_ini()})
    (run.path("config.ini")).write_text(cfg.to_ini())

    def log(row):
        if args.log_every and (row["step"] % args.log_every == 0 or row["step"] == cfg.steps - 1):
            ranks = " ".join(f"{k}={row[k]:.3f}" for k in row if k.startswith("r_hat") and row[k] != "")
            _say(f"step {row['step']:5d} loss {row['loss']:.4f} lr {row['lr']:.2e} {ranks}".rstrip())

    res = train(cfg, out_dir=run.out, log=log)
    write_metrics(res.metrics, run.path("metrics.csv"), run.manifest.comment)
    run.path("checkpoint")
    run.finish()
    return EXIT_OK


def _require_checkpoint(path: str) -> Path:
    from .pipeline.checkpoint import MANIFEST
    p = Path(path)
    if not (p / MANIFEST).is_file():
        raise UsageError(f"checkpoint {p} not found (no {MANIFEST})")
    return p


def _eval_images(cfg, count: int, seed: int):
    from .pipeline.data import SyntheticData
    return SyntheticData(cfg.image_size, seed, cfg.channels).batch(0, count)


def cmd_diag_rank(args) -> int:
    from .diagnostics import pca_color_map, rank_report
    from .imageio import write_ppm
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.model import stage_features

    if args.images < 1 or args.pca_scale < 1:
        raise UsageError("--images and --pca-scale must be >= 1")
    paths = [_require_checkpoint(c) for c in args.checkpoint]
    hooks = {"both": ["encoder", "decoder"], "none": []}.get(args.pca, [args.pca])
    run = Run(args, {"checkpoints": [str(p) for p in paths], "images": args.images, "image_seed": args.image_seed,
                     "pca": hooks, "pca_scale": args.pca_scale})
    rows, finals = [], []
    for c, p in enumerate(paths):
        model = load_checkpoint(p)
        cfg = model.cfg
        imgs = _eval_images(cfg, args.images, args.image_seed)
        reps = rank_report([f for _, _, f in stage_features(model, imgs, "encoder")])
        for r in reps:
            rows.append({"checkpoint": str(p), "stage": r.stage, "n": r.n, "d": r.d, "r_hat": r.r_hat})
            _say(f"{p}: stage {r.stage} N={r.n} D={r.d} R_hat={r.r_hat:.4f}")
        finals.append(reps[-1].r_hat)
        for hook in hooks:
            # first evaluation image only
            for i, entry in enumerate(stage_features(model, imgs[:1], hook)):
                if entry is not None:
                    rgb = pca_color_map(entry[0], entry[2], cfg.image_size, args.pca_scale)
                    write_ppm(run.path(f"pca_{hook}_ck{c}_stage{i}.ppm"), rgb)
    _write_csv(run.path("rank.csv"), rows, run.manifest.comment)
    run.finish()
    if args.min_gap is not None:
        if len(finals) < 2:
            raise UsageError("--min-gap needs two checkpoints")
        gap = finals[1] - finals[0]
        _say(f"final-stage gap {gap:+.4f} (required >= {args.min_gap})")
        if gap < args.min_gap:
            raise CheckFailed(f"rank gap {gap:.4f} < {args.min_gap}")
    return EXIT_OK


def cmd_viz_tokens(args) -> int:
    import numpy as np

    from .imageio import to_u8, write_ppm
    from .masking import make_mask
    from .numerics.tape import Tape
    from .pipeline.checkpoint import load_checkpoint
    from .pipeline.model import encode

    model = load_checkpoint(_require_checkpoint(args.checkpoint))
    cfg = model.cfg
    _check_ratio_arg(args.mask_ratio)
    run = Run(args, {"checkpoint": args.checkpoint, "image_index": args.image_index, "mask_ratio": args.mask_ratio, "scale": args.scale})
    from .pipeline.data import SyntheticData
    img = SyntheticData(cfg.image_size, args.image_seed, cfg.channels).image(args.image_index)
    mask = make_mask(cfg.mask_strategy, (cfg.grid, cfg.grid), args.mask_ratio, args.seed, cfg.patch).mask
    stages = encode(model, Tape(), img[None], [mask])
    gray = np.repeat(np.repeat(to_u8(img[..., 0]), args.scale, 0), args.scale, 1)
    half = max(1, cfg.patch * args.scale // 4)
    for i, st in enumerate(stages):
        rgb = np.repeat(gray[..., None], 3, axis=2) // 2
        masked_px = np.repeat(np.repeat(mask, cfg.patch * args.scale, 0), cfg.patch * args.scale, 1)
        rgb[masked_px] = rgb[masked_px] // 3
        for x, y in st.coords * args.scale:
            xi, yi = int(x), int(y)
            rgb[max(0, yi - half):yi + half, max(0, xi - half):xi + half] = (255, 64, 32)
        write_ppm(run.path(f"tokens_stage{i}.ppm"), rgb)
        _say(f"stage {i}: {st.count} tokens")
    rows = [{"stage": i, "x": float(x), "y": float(y)} for i, st in enumerate(stages) for x, y in st.coords]
    _write_csv(run.path("tokens.csv"), rows, run.manifest.comment)
    run.finish()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, run_suite

    cases = [c.strip() for c in args.cases.split(",")] if args.cases else list(CASES)
    unknown = [c for c in cases if c not in CASES]
    if unknown:
        raise UsageError(f"unknown cases {unknown}; choose from {sorted(CASES)}")
    run = Run(args, {"cases": cases, "seeds": args.seeds})
    rows = []

    def record(name, seed, rep):
        rows.append({"case": name, "seed": seed, "max_rel_err": rep.max_error, "tol": rep.tol, "passed": rep.passed})
        if not rep.passed:
            _say(f"FAIL {name} seed {seed}: {rep}")

    results = run_suite(range(args.seed, args.seed + args.seeds), cases, record)
    _write_csv(run.path("gradcheck.csv"), rows, run.manifest.comment)
    run.finish()
    failed = 0
    for name, reps in results.items():
        worst = max(r.max_error for r in reps)
        ok = all(r.passed for r in reps)
        failed += not ok
        _say(f"{'PASS' if ok else 'FAIL'} {name:24s} worst rel err {worst:.2e} over {len(reps)} seeds")
    if failed:
        raise CheckFailed(f"{failed} gradient-check case(s) failed")
    return EXIT_OK


def cmd_flop_report(args) -> int:
    from .diagnostics import fit_exponent, flop_report

    cfg = _pipeline_config(args)
    res = [int(r) for r in args.resolutions.split(",")]
    if any(r % cfg.patch for r in res):
        raise UsageError(f"resolutions must be multiples of patch {cfg.patch}")
    run = Run(args, {"config": cfg.to_ini(), "resolutions": res})
    rows = flop_report(cfg, res)
    px = [r["pixels"] for r in rows]
    e_nbhd = fit_exponent(px, [r["nbhd_flops"] for r in rows])
    e_dense = fit_exponent(px, [r["dense_flops"] for r in rows])
    _write_csv(run.path("flops.csv"), rows, run.manifest.comment)
    _write_csv(run.path("flop_exponents.csv"), [{"model": "nbhd", "exponent": e_nbhd}, {"model": "dense", "exponent": e_dense}],
               run.manifest.comment)
    run.finish()
    _say(f"FLOP exponent vs pixels: neighbourhood {e_nbhd:.3f}, dense {e_dense:.3f}")
    if args.check and not (e_nbhd <= 1.3 and e_dense >= 1.7):
        raise CheckFailed(f"exponents {e_nbhd:.3f} (need <= 1.3) / {e_dense:.3f} (need >= 1.7)")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .interpolation import stability_probe, write_probe_csv

    if args.trials < 1 or not 0 < args.d_range[0] < args.d_range[1]:
        raise UsageError("need --trials >= 1 and 0 < d_min < d_max")
    p_values = [float(p) for p in args.p.split(",")]
    run = Run(args, {"p": p_values, "d_range": args.d_range, "trials": args.trials, "precision": args.precision})
    rows = stability_probe(p_values, [tuple(args.d_range)], args.precision, args.trials, seed=args.seed)
    write_probe_csv(rows, run.path("probe.csv"), run.manifest.comment)
    run.finish()
    for r in rows:
        _say(f"{r['kernel']:>7s} p={r['p']:g} failure rate {r['failure_rate']:.4f}")
    if args.check:
        soft = [r for r in rows if r["kernel"] == "softmax"]
        inv = [r for r in rows if r["kernel"] == "invpow"]
        if any(r["failure_rate"] != 0 for r in soft) or not any(r["failure_rate"] > 0 for r in inv):
            raise CheckFailed("expected zero softmax failures and some inverse-power failures")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or runs/<subcommand>)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")

    cfg_opts = argparse.ArgumentParser(add_help=False)
    cfg_opts.add_argument("--config", help="INI config file")
    cfg_opts.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (stageN.key for stages)")

    ap = argparse.ArgumentParser(prog="sparsemae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-attn", parents=[common], help="time naive vs streaming neighbourhood attention")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--half-io", action="store_true")
    p.add_argument("--precision", choices=["b32", "b64"], default="b32")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("mask-gen", parents=[common], help="generate mask batches and previews")
    p.add_argument("--strategy", choices=["perlin", "random"], default="perlin")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--previews", type=int, default=4)
    p.add_argument("--preview-scale", type=int, default=4)
    p.set_defaults(func=cmd_mask_gen)

    p = sub.add_parser("psd", parents=[common], help="radially averaged mask spectra and slope fits")
    p.add_argument("--strategies", default="perlin,random")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--samples", type=int, default=640)
    p.add_argument("--upsample", type=int, default=1, help="pixels per mask cell before the transform")
    p.add_argument("--mid-band", type=float, nargs=2, default=[4.0, 16.0], metavar=("LO", "HI"))
    p.add_argument("--high-band", type=float, nargs=2, default=[16.0, 32.0], metavar=("LO", "HI"))
    p.add_argument("--input", action="append", metavar="[NAME=]PATH",
                   help="read masks from an AFT1 stack or PGM instead of generating them (repeatable)")
    p.add_argument("--check", action="store_true", help="exit 4 unless the slope ordering holds")
    p.set_defaults(func=cmd_psd)

    p = sub.add_parser("train-toy", parents=[common, cfg_opts], help="train the toy autoencoder on synthetic images")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("diag-rank", parents=[common], help="per-stage effective rank of checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--image-seed", type=int, default=10_000)
    p.add_argument("--min-gap", type=float, default=None, help="require final-stage R_hat(2nd) - R_hat(1st) >= GAP")
    p.add_argument("--pca", choices=["encoder", "decoder", "both", "none"], default="both",
                   help="PCA colour maps of stage tokens (encoder) or of decoder queries after cross-attention")
    p.add_argument("--pca-scale", type=int, default=4, help="output pixels per image pixel")
    p.set_defaults(func=cmd_diag_rank)

    p = sub.add_parser("viz-tokens", parents=[common], help="render retained-token maps per stage")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--image-seed", type=int, default=10_000)
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_viz_tokens)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--cases", default=None, help="comma-separated subset")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flop-report", parents=[common, cfg_opts], help="closed-form encoder FLOPs vs resolution")
    p.add_argument("--resolutions", default="448,512,768")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_flop_report)

    p = sub.add_parser("probe", parents=[common], help="interpolation stability under reduced precision")
    p.add_argument("--p", default="20")
    p.add_argument("--d-range", type=float, nargs=2, default=[0.01, 10.0], metavar=("DMIN", "DMAX"))
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--precision", choices=["b16emu", "b32", "b64"], default="b16emu")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_probe)
    return ap


def _cap_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _cap_threads(args.threads)
        from .pipeline.checkpoint import CheckpointError
        from .pipeline.config import ConfigError
        from .pipeline.train import NonFiniteError
        try:
            return args.func(args)
        except (ConfigError, CheckpointError, UsageError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (NonFiniteError, FloatingPointError) as exc:
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except CheckFailed as exc:
            print(f"check failed: {exc}", file=sys.stderr)
            return EXIT_CHECK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
