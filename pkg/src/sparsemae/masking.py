"""Structured (Perlin) and random patch masks, and radially averaged power
spectra for comparing their spatial statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._util import scaled_count


@dataclass
class MaskSpec:
    mask: np.ndarray  # (Hp, Wp) bool, True = masked
    ratio: float
    patch: int = 8
    seed: int | None = None

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class PsdProfile:
    freqs: np.ndarray  # integer radii with at least one DFT bin
    power: np.ndarray  # mean power per radius
    counts: np.ndarray  # DFT bins per radius


# -- noise ---------------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lattice_rng(seed: int, octave: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, octave])))


def perlin_field(h: int, w: int, octaves: int = 2, base_freq: int = 4, persistence: float = 0.5, seed: int = 0) -> np.ndarray:
    """Multi-octave gradient noise on an ``h x w`` cell grid.

    Octave ``o`` places ``base_freq * 2**o`` lattice cells across each axis,
    draws one unit gradient per lattice corner from a counter-based generator
    keyed on ``(seed, o)``, and blends the four corner dot products with the
    quintic fade. Octaves are summed with weight ``persistence**o``. Sample
    ``(i, j)`` sits at lattice position ``(i f / h, j f / w)``, so lattice
    corners coincide with samples whenever ``f`` divides the grid.
    """
    if h < 2 or w < 2:
        raise ValueError(f"grid must be at least 2x2, got {h}x{w}")
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    field = np.zeros((h, w))
    for o in range(octaves):
        f = base_freq * 2**o
        theta = _lattice_rng(seed, o).uniform(0.0, 2.0 * np.pi, size=(f + 1, f + 1))
        gx, gy = np.cos(theta), np.sin(theta)
        py = np.arange(h) * (f / h)
        px = np.arange(w) * (f / w)
        y0 = np.floor(py).astype(int)
        x0 = np.floor(px).astype(int)
        ty = (py - y0)[:, None]
        tx = (px - x0)[None, :]
        Y0, X0 = y0[:, None], x0[None, :]

        def corner(dy, dx):
            return gx[Y0 + dy, X0 + dx] * (tx - dx) + gy[Y0 + dy, X0 + dx] * (ty - dy)

        u, v = _fade(tx), _fade(ty)
        top = corner(0, 0) * (1 - u) + corner(0, 1) * u
        bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
        field += persistence**o * (top * (1 - v) + bottom * v)
    return field


# -- masks -----------------------------------------------------------------------

def masked_count(ratio: float, cells: int) -> int:
    return scaled_count(ratio, cells)


def _check_ratio(ratio):
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")


def mask_from_field(field: np.ndarray, ratio: float, patch: int = 8, seed: int | None = None) -> MaskSpec:
    """Mask the ``round(ratio * cells)`` highest-valued cells (ties to the
    lower cell index), i.e. threshold at the (1 - ratio) quantile."""
    _check_ratio(ratio)
    flat = np.asarray(field, dtype=np.float64).ravel()
    n = masked_count(ratio, flat.size)
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:n]] = True
    return MaskSpec(mask.reshape(np.shape(field)), ratio, patch, seed)


def perlin_mask(shape: tuple[int, int], ratio: float, seed: int, patch: int = 8, octaves: int = 2,
                base_freq: int = 4, persistence: float = 0.5) -> MaskSpec:
    field = perlin_field(shape[0], shape[1], octaves, base_freq, persistence, seed)
    return mask_from_field(field, ratio, patch, seed)


def random_mask(shape: tuple[int, int], ratio: float, seed: int, patch: int = 8) -> MaskSpec:
    """Exactly ``round(ratio * cells)`` cells chosen uniformly without replacement."""
    _check_ratio(ratio)
    cells = shape[0] * shape[1]
    n = masked_count(ratio, cells)
    perm = np.random.default_rng(seed).permutation(cells)
    mask = np.zeros(cells, dtype=bool)
    mask[perm[:n]] = True
    return MaskSpec(mask.reshape(shape), ratio, patch, seed)


def make_mask(strategy: str, shape: tuple[int, int], ratio: float, seed: int, patch: int = 8, **perlin) -> MaskSpec:
    if strategy == "perlin":
        return perlin_mask(shape, ratio, seed, patch, **perlin)
    if strategy == "random":
        return random_mask(shape, ratio, seed, patch)
    raise ValueError(f"unknown masking strategy {strategy!r}")


def upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the last two axes."""
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)


# -- spectra ---------------------------------------------------------------------

def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def fft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT along ``axis``."""
    a = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length {n} is not a power of two; zero-pad to {1 << (n - 1).bit_length()}")
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    a = a[..., rev]
    lead = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return np.moveaxis(a, -1, axis)


def fft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT over the last two axes: rows, then columns."""
    return fft(fft(x, axis=-1), axis=-2)


def dft2_direct(x: np.ndarray) -> np.ndarray:
    """O(N^2) reference DFT via explicit Fourier matrices."""
    h, w = x.shape[-2:]
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ x @ fw.T


def power_spectrum(grid: np.ndarray) -> np.ndarray:
    """``|DFT|^2`` with the DC term moved to the centre."""
    g = np.asarray(grid, dtype=np.float64)
    for n in g.shape[-2:]:
        if not _is_pow2(n):
            raise ValueError(f"side {n} is not a power of two; zero-pad to {1 << (n - 1).bit_length()}")
    f = fft2(g)
    p = f.real**2 + f.imag**2
    return np.roll(p, (g.shape[-2] // 2, g.shape[-1] // 2), axis=(-2, -1))


def radial_bins(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    v, u = np.mgrid[0:h, 0:w]
    return np.rint(np.hypot(u - w // 2, v - h // 2)).astype(np.intp)


def radial_psd(grid: np.ndarray) -> PsdProfile:
    """Radially averaged power spectrum of a 2-D field.

    A stack ``(B, H, W)`` is averaged over its first axis first. Bins are
    integer-rounded radii around the centred DC term.
    """
    p = power_spectrum(grid)
    if p.ndim == 3:
        p = p.mean(axis=0)
    bins = radial_bins(p.shape).ravel()
    counts = np.bincount(bins)
    sums = np.bincount(bins, weights=p.ravel())
    keep = counts > 0
    freqs = np.flatnonzero(keep)
    return PsdProfile(freqs, sums[keep] / counts[keep], counts[keep])


def psd_slope(profile: PsdProfile, f_lo: float, f_hi: float) -> float:
    """Power-law exponent ``alpha`` of ``PSD(f) ~ f^-alpha`` fitted by least
    squares in log-log space over ``f_lo <= f <= f_hi``."""
    if not f_lo < f_hi:
        raise ValueError(f"need f_lo < f_hi, got {f_lo}, {f_hi}")
    sel = (profile.freqs >= f_lo) & (profile.freqs <= f_hi)
    if sel.sum() < 2:
        raise ValueError(f"fewer than two bins in [{f_lo}, {f_hi}]")
    f, pw = profile.freqs[sel].astype(np.float64), profile.power[sel]
    if np.any(pw <= 0):
        raise ValueError(f"nonpositive power in band [{f_lo}, {f_hi}]")
    x, y = np.log(f), np.log(pw)
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc * xc).sum())
    return -slope


def write_psd_csv(profile: PsdProfile, path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["f", "psd", "n_f"])
        for f, pw, n in zip(profile.freqs, profile.power, profile.counts):
            writer.writerow([int(f), repr(float(pw)), int(n)])
