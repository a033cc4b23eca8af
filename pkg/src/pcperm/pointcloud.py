"""Pore-grain boundary point clouds: extraction, fixed-size resampling, scaling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mediagen import VoxelGrid, make_rng

CLOUD_MAGIC = b"PMPC"
CLOUD_VERSION = 1
_CLOUD_HEADER = struct.Struct("<4sIII")


class EmptyBoundaryError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3); z = 0 for clouds from 2D grids
    source_dim: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise ValueError("a point cloud needs at least one point")
        if self.source_dim not in (2, 3):
            raise ValueError("source_dim must be 2 or 3")
        if self.source_dim == 2 and np.any(self.points[:, 2] != 0):
            raise ValueError("2D clouds must have z = 0")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class CloudBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi < self.lo):
            raise ValueError("bounds need max >= min on every axis")

    @classmethod
    def domain(cls, n: int, dim: int) -> "CloudBounds":
        """The fixed box [0, n]^dim shared by every sample of a dataset."""
        hi = np.array([n, n, n if dim == 3 else 0], dtype=float)
        return cls(np.zeros(3), hi)

    @classmethod
    def of(cls, cloud: PointCloud) -> "CloudBounds":
        return cls(cloud.points.min(axis=0), cloud.points.max(axis=0))


def extract_boundary(grid: VoxelGrid) -> PointCloud:
    """Centers of pore cells with at least one face-adjacent grain cell (no wrap)."""
    pore = grid.pore
    grain = ~pore
    touching = np.zeros_like(pore)
    for axis in range(grid.dim):
        lead = [slice(None)] * grid.dim
        lag = [slice(None)] * grid.dim
        lead[axis] = slice(1, None)
        lag[axis] = slice(None, -1)
        touching[tuple(lag)] |= grain[tuple(lead)]
        touching[tuple(lead)] |= grain[tuple(lag)]
    mask = pore & touching
    if not mask.any():
        raise EmptyBoundaryError("grid has no pore-grain interface (all pore or all grain)")
    # ascending linear index, x fastest, matching the voxel file layout
    idx = np.nonzero(mask.ravel(order="F"))[0]
    coords = np.stack(np.unravel_index(idx, mask.shape, order="F"), axis=1) + 0.5
    pts = np.zeros((coords.shape[0], 3))
    pts[:, :grid.dim] = coords
    return PointCloud(pts, grid.dim)


def sample_to_n(cloud: PointCloud, n_target: int, seed: int) -> PointCloud:
    """Subsample without replacement or pad with uniformly re-drawn own points."""
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    n = cloud.n_points
    if n == n_target:
        return PointCloud(cloud.points.copy(), cloud.source_dim)
    rng = make_rng(seed)
    if n > n_target:
        keep = np.sort(rng.choice(n, size=n_target, replace=False))
        return PointCloud(cloud.points[keep], cloud.source_dim)
    extra = rng.integers(0, n, size=n_target - n)
    return PointCloud(np.concatenate([cloud.points, cloud.points[extra]]), cloud.source_dim)


def normalize_coords(cloud: PointCloud, bounds: CloudBounds) -> PointCloud:
    span = bounds.hi - bounds.lo
    axes = 2 if cloud.source_dim == 2 else 3
    if np.any(span[:axes] <= 0):
        raise ValueError(f"degenerate normalization bounds {bounds.lo} .. {bounds.hi}")
    out = np.zeros_like(cloud.points)
    out[:, :axes] = (cloud.points[:, :axes] - bounds.lo[:axes]) / span[:axes]
    return PointCloud(out, cloud.source_dim)


def cloud_stats(sizes, bins: int = 10):
    """``(N_min, N_max, (counts, edges))`` of raw boundary sizes.

    Accepts point clouds or plain integer sizes.
    """
    sizes = np.array([s.n_points if isinstance(s, PointCloud) else int(s) for s in sizes])
    if sizes.size == 0:
        raise ValueError("empty dataset")
    return int(sizes.min()), int(sizes.max()), np.histogram(sizes, bins=bins)


def write_cloud(path, cloud: PointCloud) -> None:
    header = _CLOUD_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, cloud.n_points, cloud.source_dim)
    Path(path).write_bytes(header + cloud.points.astype("<f4").tobytes())


def read_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    magic, version, n, dim = _CLOUD_HEADER.unpack_from(raw)
    if magic != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CLOUD_MAGIC!r}")
    if version != CLOUD_VERSION:
        raise ValueError(f"{path}: point cloud version {version} unsupported (reader version {CLOUD_VERSION})")
    pts = np.frombuffer(raw, dtype="<f4", offset=_CLOUD_HEADER.size)
    if pts.size != 3 * n:
        raise ValueError(f"{path}: expected {n} points, found {pts.size / 3:g}")
    return PointCloud(pts.reshape(n, 3).astype(float), dim)
