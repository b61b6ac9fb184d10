"""Zernike phase-screen turbulence simulator.

Each image tile gets an independent random pupil phase (a sum of Noll-indexed
Zernike modes), the phase becomes a PSF through the pupil's Fourier
transform, the tile is blurred with that PSF and white noise is added.
"""
from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, FormatError, InputError

log = logging.getLogger(__name__)

FLOAT_MAGIC = b"FSIMG64\0"


@dataclass(frozen=True)
class ZernikeSpec:
    j_max: int = 28
    grid: int = 256
    aperture_radius: float | None = None  # pixels; default grid / 2
    kernel_size: int = 33

    def __post_init__(self):
        if self.j_max < 1:
            raise ConfigError("j_max must be >= 1")
        if self.grid < 64 or self.grid % 2:
            raise ConfigError("pupil grid must be even and >= 64")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")

    @property
    def radius(self) -> float:
        return self.grid / 2 if self.aperture_radius is None else float(self.aperture_radius)


@dataclass(frozen=True)
class TurbulenceParams:
    D_over_r0: float = 2.0
    noise_sigma: float = 0.0
    tile_size: int = 64
    seed: int = 0
    cn2: float | None = None  # metadata only, not used by the simulation

    def __post_init__(self):
        # 0 is accepted as "no turbulence"; the simulated regime is [1, 10].
        if not 0.0 <= self.D_over_r0 <= 10.0:
            raise ConfigError("D/r0 must be in [0, 10]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.tile_size < 1:
            raise ConfigError("tile_size must be positive")


def noll_to_nm(j: int) -> tuple[int, int]:
    """Radial order n and signed azimuthal frequency m for Noll index j."""
    if j < 1:
        raise InputError(f"Noll index must be >= 1, got {j}")
    n = 0
    while (n + 1) * (n + 2) // 2 < j:
        n += 1
    k = j - n * (n + 1) // 2  # 1-based position inside order n
    # |m| values in order n, ascending, each non-zero one appearing twice
    ms = [m for m in range(n % 2, n + 1, 2) for _ in range(1 if m == 0 else 2)]
    m = ms[k - 1]
    if m != 0 and j % 2 == 1:
        m = -m
    return n, m


def _radial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    m = abs(m)
    out = np.zeros_like(rho)
    for s in range((n - m) // 2 + 1):
        c = (-1) ** s * math.factorial(n - s) / (
            math.factorial(s) * math.factorial((n + m) // 2 - s) * math.factorial((n - m) // 2 - s)
        )
        out += c * rho ** (n - 2 * s)
    return out


@lru_cache(maxsize=8)
def pupil_coords(grid: int, radius: float):
    """Normalized radius, angle and aperture mask; the disk is centered on pixel grid // 2."""
    ax = (np.arange(grid) - grid // 2) / radius
    x, y = np.meshgrid(ax, ax)  # x varies along columns
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    mask = rho <= 1.0
    for a in (rho, theta, mask):
        a.setflags(write=False)
    return rho, theta, mask


def zernike_mode(j: int, grid: int = 256, radius: float | None = None) -> np.ndarray:
    """Noll-normalized Zernike mode on a grid x grid pupil; zero outside the disk."""
    n, m = noll_to_nm(j)
    rho, theta, mask = pupil_coords(grid, grid / 2 if radius is None else float(radius))
    z = math.sqrt(n + 1) * _radial(n, m, rho)
    if m > 0:
        z = z * math.sqrt(2) * np.cos(m * theta)
    elif m < 0:
        z = z * math.sqrt(2) * np.sin(-m * theta)
    return np.where(mask, z, 0.0)


@lru_cache(maxsize=8)
def _mode_stack(j_max: int, grid: int, radius: float) -> np.ndarray:
    stack = np.stack([zernike_mode(j, grid, radius) for j in range(2, j_max + 1)]) if j_max >= 2 else np.zeros((0, grid, grid))
    stack.setflags(write=False)
    return stack


def coefficient_weights(j_max: int) -> np.ndarray:
    """Relative std of modes 2..j_max: (n+1)^(-11/12), scaled to unit sum of squares."""
    if j_max < 2:
        return np.zeros(0)
    w = np.array([(noll_to_nm(j)[0] + 1) ** (-11.0 / 12.0) for j in range(2, j_max + 1)])
    return w / np.sqrt((w**2).sum())


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple; order of use does not matter."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def sample_coefficients(spec: ZernikeSpec, D_over_r0: float, seed: int, *key: int) -> np.ndarray:
    """Gaussian coefficients for modes 2..j_max (piston excluded)."""
    w = coefficient_weights(spec.j_max)
    a = np.array([substream(seed, *key, j).standard_normal() for j in range(2, spec.j_max + 1)])
    return D_over_r0 ** (5.0 / 6.0) * w * a


def phase_from_coefficients(coeffs, spec: ZernikeSpec) -> np.ndarray:
    stack = _mode_stack(spec.j_max, spec.grid, spec.radius)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (stack.shape[0],):
        raise InputError(f"expected {stack.shape[0]} coefficients")
    return np.tensordot(coeffs, stack, axes=1) if coeffs.size else np.zeros((spec.grid, spec.grid))


def sample_phase_screen(spec: ZernikeSpec, params: TurbulenceParams, *key: int) -> np.ndarray:
    return phase_from_coefficients(sample_coefficients(spec, params.D_over_r0, params.seed, *key), spec)


def pupil_psf(phase, spec: ZernikeSpec) -> np.ndarray:
    """Full-grid PSF (unit sum), optical axis at pixel grid // 2."""
    phase = np.asarray(phase, dtype=np.float64)
    if not np.isfinite(phase).all():
        raise InputError("phase must be finite")
    _, _, mask = pupil_coords(spec.grid, spec.radius)
    if not mask.any():
        raise InputError("aperture is empty")
    pupil = np.where(mask, np.exp(1j * phase), 0.0)
    field = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(pupil)))
    I = field.real**2 + field.imag**2
    return I / I.sum()


def centroid(img) -> tuple[float, float]:
    """(row, col) intensity centroid."""
    img = np.asarray(img, dtype=np.float64)
    r = np.arange(img.shape[0])
    c = np.arange(img.shape[1])
    s = img.sum()
    return float(img.sum(axis=1) @ r / s), float(img.sum(axis=0) @ c / s)


def psf_from_phase(phase, spec: ZernikeSpec, kernel_size: int | None = None,
                   min_energy: float = 0.999, max_size: int | None = None) -> np.ndarray:
    """k x k kernel cropped around the PSF centroid, normalized to unit sum.

    If the crop keeps less than ``min_energy`` of the light the kernel grows
    (up to ``max_size``, default one doubling) and a warning is issued when it
    still falls short.
    """
    I = pupil_psf(phase, spec)
    k = spec.kernel_size if kernel_size is None else kernel_size
    limit = min(2 * k + 1 if max_size is None else max_size, spec.grid - 1)
    cr, cc = (int(round(v)) for v in centroid(I))
    while True:
        h = k // 2
        rows = np.arange(cr - h, cr + h + 1) % spec.grid
        cols = np.arange(cc - h, cc + h + 1) % spec.grid
        K = I[np.ix_(rows, cols)]
        energy = K.sum()
        if energy >= min_energy or k + 2 > limit:
            break
        k = min(2 * k + 1, limit if limit % 2 else limit - 1)
    if energy < min_energy:
        warnings.warn(f"PSF crop of {k}x{k} keeps {energy:.4%} of the energy", RuntimeWarning, stacklevel=2)
    return K / energy


def delta_kernel(k: int = 1) -> np.ndarray:
    K = np.zeros((k, k))
    K[k // 2, k // 2] = 1.0
    return K


def blur_metric(psf) -> float:
    """Second-moment radius about the centroid."""
    p = np.asarray(psf, dtype=np.float64)
    p = p / p.sum()
    cr, cc = centroid(p)
    r, c = np.indices(p.shape)
    return float(np.sqrt((p * ((r - cr) ** 2 + (c - cc) ** 2)).sum()))


def tile_kernels(shape, spec: ZernikeSpec, params: TurbulenceParams, frame: int = 0,
                 min_energy: float = 0.999) -> dict[tuple[int, int], np.ndarray]:
    """Kernel per tile index (row, col).  Zero turbulence gives delta kernels."""
    ts = params.tile_size
    nty, ntx = -(-shape[0] // ts), -(-shape[1] // ts)
    out = {}
    if spec.kernel_size > ts:
        raise ConfigError(f"tile size {ts} smaller than kernel size {spec.kernel_size}")
    max_k = ts if ts % 2 else ts - 1
    short = 0
    for ty in range(nty):
        for tx in range(ntx):
            if params.D_over_r0 == 0.0:
                out[ty, tx] = delta_kernel(1)
                continue
            phase = sample_phase_screen(spec, params, frame, ty, tx)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                out[ty, tx] = psf_from_phase(phase, spec, min_energy=min_energy, max_size=max_k)
            short += bool(caught)
    if short:
        log.warning("%d of %d tile kernels keep less than %.3g of the PSF energy at %dx%d",
                    short, len(out), min_energy, max_k, max_k)
    return out



def degrade_image(img, spec: ZernikeSpec = ZernikeSpec(), params: TurbulenceParams = TurbulenceParams(),
                  frame: int = 0) -> np.ndarray:
    """Blur each tile with its own turbulent PSF, then add white noise.

    Border pixels are extended by edge replication, so unit-sum kernels keep
    constant images constant.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError("expected a 2-D grayscale image")
    H, W = img.shape
    ts = params.tile_size
    kernels = tile_kernels(img.shape, spec, params, frame)
    out = img.copy()
    if params.D_over_r0 > 0.0:
        h = max(K.shape[0] for K in kernels.values()) // 2
        padded = np.pad(img, h, mode="edge")
        for (ty, tx), K in kernels.items():
            y0, x0 = ty * ts, tx * ts
            y1, x1 = min(y0 + ts, H), min(x0 + ts, W)
            kh = K.shape[0] // 2
            off = h - kh
            region = padded[y0 + off : y1 + off + 2 * kh, x0 + off : x1 + off + 2 * kh]
            out[y0:y1, x0:x1] = fftconvolve(region, K, mode="valid")
    if params.noise_sigma > 0:
        out = out + params.noise_sigma * substream(params.seed, frame, 1 << 30).standard_normal(out.shape)
    return out


# -------------------------------------------------------------- image formats

def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    pos += 1
    if len(data) - pos < w * h:
        raise FormatError(f"{path}: truncated PGM data")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).astype(np.float64)


def write_pgm(path, img) -> None:
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        f.write(a.tobytes())


def read_float_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:8] != FLOAT_MAGIC:
        raise FormatError(f"{path}: bad float image header")
    h, w = struct.unpack_from("<II", data, 8)
    if len(data) - 16 < 8 * h * w:
        raise FormatError(f"{path}: truncated float image")
    return np.frombuffer(data, dtype="<f8", count=h * w, offset=16).reshape(h, w).copy()


def write_float_image(path, img) -> None:
    a = np.asarray(img, dtype="<f8")
    with open(path, "wb") as f:
        f.write(FLOAT_MAGIC + struct.pack("<II", a.shape[0], a.shape[1]))
        f.write(a.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(8)
    return read_float_image(path) if head == FLOAT_MAGIC else read_pgm(path)


def write_image(path, img, like: str | None = None) -> None:
    """PGM for ``.pgm`` paths, the float64 format otherwise."""
    if str(path).lower().endswith(".pgm"):
        write_pgm(path, img)
    else:
        write_float_image(path, img)
