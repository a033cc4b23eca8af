"""Synthetic binary porous media by truncated Gaussian simulation.

Pipeline: i.i.d. standard normal noise -> separable periodic Gaussian filter ->
affine normalization to [0, 1] -> count-based threshold at the target porosity.
Phase convention: 0 = pore, 1 = grain.

Random numbers come from numpy's Philox counter-based bit generator keyed by a
``SeedSequence``; normals are drawn with numpy's ziggurat sampler
(``Generator.standard_normal``). Every sample/attempt gets its own derived
stream so generation can run in any order or in parallel.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_PIXEL_SIZE_M = 0.003

VOXEL_MAGIC = b"PMVG"
VOXEL_VERSION = 1
_VOXEL_HEADER = struct.Struct("<4sIIId")


class GenerationError(RuntimeError):
    """Raised when no acceptable sample is found within the retry budget."""


@dataclass
class VoxelGrid:
    phase: np.ndarray  # uint8, indexed [x, y] or [x, y, z]
    pixel_size_m: float = DEFAULT_PIXEL_SIZE_M

    def __post_init__(self):
        self.phase = np.ascontiguousarray(self.phase, dtype=np.uint8)
        if self.phase.ndim not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got ndim={self.phase.ndim}")
        if len(set(self.phase.shape)) != 1:
            raise ValueError(f"grid must be square/cubic, got shape {self.phase.shape}")
        if np.any(self.phase > 1):
            raise ValueError("phase values must be 0 (pore) or 1 (grain)")
        if not self.pixel_size_m > 0:
            raise ValueError("pixel_size_m must be positive")

    @property
    def dim(self) -> int:
        return self.phase.ndim

    @property
    def n(self) -> int:
        return self.phase.shape[0]

    @property
    def pore(self) -> np.ndarray:
        return self.phase == 0


@dataclass
class GenConfig:
    n: int = 128
    dim: int = 2
    correlation_length_px: int = 9
    porosity_range: tuple[float, float] = (0.125, 0.25)
    max_retries: int = 50
    pixel_size_m: float = DEFAULT_PIXEL_SIZE_M

    def __post_init__(self):
        self.porosity_range = tuple(float(p) for p in self.porosity_range)
        lo, hi = self.porosity_range
        if not 0 < lo < hi < 1:
            raise ValueError(f"porosity_range must satisfy 0 < lo < hi < 1, got {self.porosity_range}")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        lc = self.correlation_length_px
        if lc < 3 or lc % 2 == 0:
            raise ValueError(f"correlation_length_px must be odd and >= 3, got {lc}")
        if lc > self.n:
            raise ValueError("correlation_length_px larger than the domain")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


def make_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def derive_seed(*key: int) -> int:
    """Stable 64-bit seed derived from a key tuple."""
    lo, hi = np.random.SeedSequence([int(k) for k in key]).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def gaussian_noise(dims, seed: int) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3) or any(d < 1 for d in dims):
        raise ValueError(f"invalid dims {dims}")
    return make_rng(seed).standard_normal(dims)


def gaussian_kernel1d(size: int) -> np.ndarray:
    """Truncated Gaussian with sigma = size/4 on ``size`` taps, normalized to sum 1."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    sigma = size / 4.0
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def convolve_periodic(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable convolution with the same centered 1D kernel along every axis, periodic wrap."""
    kernel = np.asarray(kernel, dtype=float)
    half = kernel.size // 2
    out = np.asarray(field, dtype=float)
    for axis in range(out.ndim):
        if kernel.size > out.shape[axis]:
            raise ValueError(f"kernel of {kernel.size} taps exceeds axis {axis} extent {out.shape[axis]}")
        acc = np.zeros_like(out)
        for j, w in enumerate(kernel):
            acc += w * np.roll(out, j - half, axis=axis)
        out = acc
    return out


def gaussian_filter(field: np.ndarray, kernel_size_px: int) -> np.ndarray:
    return convolve_periodic(field, gaussian_kernel1d(kernel_size_px))


def normalize01(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    lo, hi = field.min(), field.max()
    if not hi > lo:
        raise ValueError("cannot normalize a constant field")
    out = (field - lo) / (hi - lo)
    # pin the endpoints against round-off
    out[field == lo] = 0.0
    out[field == hi] = 1.0
    return out


def threshold_to_porosity(field: np.ndarray, phi: float, pixel_size_m: float = DEFAULT_PIXEL_SIZE_M) -> VoxelGrid:
    """Mark the round(phi*V) lowest-valued cells as pore; ties go to the lower linear index."""
    if not 0 < phi < 1:
        raise ValueError("phi must lie in (0, 1)")
    field = np.asarray(field)
    flat = field.ravel()
    n_pore = int(round(phi * flat.size))
    order = np.argsort(flat, kind="stable")
    phase = np.ones(flat.size, dtype=np.uint8)
    phase[order[:n_pore]] = 0
    return VoxelGrid(phase.reshape(field.shape), pixel_size_m)


def porosity(grid: VoxelGrid) -> float:
    return float(np.count_nonzero(grid.phase == 0)) / grid.phase.size


def percolates(grid: VoxelGrid, axis: int = 0) -> bool:
    """Face-connected pore path between the two faces normal to ``axis``."""
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} invalid for a {grid.dim}D grid")
    labels, count = ndimage.label(grid.pore)  # default structure = face connectivity
    if count == 0:
        return False
    inlet = np.take(labels, 0, axis=axis)
    outlet = np.take(labels, -1, axis=axis)
    shared = np.intersect1d(inlet[inlet > 0], outlet[outlet > 0])
    return shared.size > 0


def empirical_correlation_length(field: np.ndarray) -> int:
    """First lag at which the axis-averaged periodic autocorrelation drops below 1/e."""
    f = np.asarray(field, dtype=float)
    f = f - f.mean()
    spec = np.abs(np.fft.fftn(f)) ** 2
    acov = np.real(np.fft.ifftn(spec))
    acov /= acov.flat[0]
    n = f.shape[0]
    profiles = []
    for a in range(f.ndim):
        idx = [0] * f.ndim
        idx[a] = slice(0, n // 2)
        profiles.append(acov[tuple(idx)])
    profile = np.mean(profiles, axis=0)
    below = np.nonzero(profile < np.exp(-1.0))[0]
    return int(below[0]) if below.size else n // 2


def generate_sample(config: GenConfig, seed: int) -> VoxelGrid:
    """Draw one percolating medium; pure function of ``(config, seed)``."""
    lo, hi = config.porosity_range
    dims = (config.n,) * config.dim
    last = None
    for attempt in range(config.max_retries):
        phi = make_rng(seed, attempt, 1).uniform(lo, hi)
        noise = gaussian_noise(dims, derive_seed(seed, attempt, 0))
        try:
            smooth = normalize01(gaussian_filter(noise, config.correlation_length_px))
        except ValueError:
            last = "degenerate (constant) field"
            continue
        grid = threshold_to_porosity(smooth, phi, config.pixel_size_m)
        if not percolates(grid, axis=0):
            last = "no percolating pore path along x"
            continue
        p = porosity(grid)
        if not lo <= p < hi:
            last = f"porosity {p:.4f} outside [{lo}, {hi})"
            continue
        return grid
    raise GenerationError(f"no acceptable sample after {config.max_retries} attempts (seed={seed}): {last}")


def write_voxel_grid(path, grid: VoxelGrid) -> None:
    header = _VOXEL_HEADER.pack(VOXEL_MAGIC, VOXEL_VERSION, grid.dim, grid.n, grid.pixel_size_m)
    data = grid.phase.tobytes(order="F")  # x fastest
    Path(path).write_bytes(header + data)


def read_voxel_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _VOXEL_HEADER.size:
        raise ValueError(f"{path}: truncated voxel grid header")
    magic, version, dim, n, dx = _VOXEL_HEADER.unpack_from(raw)
    if magic != VOXEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {VOXEL_MAGIC!r}")
    if version != VOXEL_VERSION:
        raise ValueError(f"{path}: voxel grid version {version} unsupported (reader version {VOXEL_VERSION})")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_VOXEL_HEADER.size)
    if body.size != n**dim:
        raise ValueError(f"{path}: expected {n**dim} cells, found {body.size}")
    return VoxelGrid(body.reshape((n,) * dim, order="F"), dx)
