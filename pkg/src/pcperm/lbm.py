"""BGK lattice-Boltzmann solver (D2Q9 / D3Q19) for Darcy permeability.

Flow is driven along x by a uniform body force (Guo forcing) standing in for
-dp/dx. The domain is periodic in x; the y (and z) boundary planes and every
pore->grain link use half-way bounce-back.

Distributions are stored compactly, only for pore cells, as an array of shape
(Q, n_pore). Streaming is one gather through a precomputed index table that
already encodes periodic wrap and bounce-back, so each step reads only the
previous buffer and is independent of how the work is split across threads.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mediagen import VoxelGrid

MILLIDARCY_M2 = 9.869233e-16

FLOW_MAGIC = b"PMFF"
FLOW_VERSION = 1
_FLOW_HEADER = struct.Struct("<4sIII")


class LBMInstabilityError(RuntimeError):
    pass


def _d2q9():
    c = np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1],
                  [1, 1], [-1, 1], [-1, -1], [1, -1]])
    w = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)
    return c, w


def _d3q19():
    c = [[0, 0, 0]]
    for a in range(3):
        for s in (1, -1):
            v = [0, 0, 0]
            v[a] = s
            c.append(v)
    for a in range(3):
        for b in range(a + 1, 3):
            for sa in (1, -1):
                for sb in (1, -1):
                    v = [0, 0, 0]
                    v[a], v[b] = sa, sb
                    c.append(v)
    c = np.array(c)
    w = np.array([1 / 3] + [1 / 18] * 6 + [1 / 36] * 12)
    return c, w


LATTICES = {2: _d2q9(), 3: _d3q19()}


def opposite(c: np.ndarray) -> np.ndarray:
    return np.array([int(np.nonzero((c == -ci).all(axis=1))[0][0]) for ci in c])


@dataclass
class FluidParams:
    tau: float = 1.0
    force_x: float = 1e-6
    rho0: float = 1.0

    def __post_init__(self):
        if not self.tau > 0.5:
            raise ValueError(f"tau must exceed 0.5, got {self.tau}")
        if self.force_x < 0:
            raise ValueError("force_x must be non-negative")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")

    @property
    def viscosity(self) -> float:
        return (self.tau - 0.5) / 3.0

    @property
    def mu(self) -> float:
        return self.rho0 * self.viscosity


@dataclass
class FlowState:
    grid: VoxelGrid
    f: np.ndarray  # (Q, n_pore)
    step_count: int
    c: np.ndarray
    w: np.ndarray
    pore_index: np.ndarray  # flat (C-order) indices of pore cells
    stream_index: np.ndarray  # (Q, n_pore) gather table into f.ravel()
    threads: int = 1

    @property
    def n_pore(self) -> int:
        return self.pore_index.size

    def density(self) -> np.ndarray:
        return self.f.sum(axis=0)

    def total_mass(self) -> float:
        return float(self.f.sum())


@dataclass
class FlowField:
    u: np.ndarray  # (dim, *grid shape)
    mean_ux: float
    converged: bool
    steps: int


def _stream_table(grid: VoxelGrid, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shape = grid.phase.shape
    pore = grid.pore
    n_pore = int(pore.sum())
    compact = np.full(shape, -1, dtype=np.int64)
    compact[pore] = np.arange(n_pore)
    coords = np.nonzero(pore)
    opp = opposite(c)
    table = np.empty((len(c), n_pore), dtype=np.int64)
    own = np.arange(n_pore)
    for i, ci in enumerate(c):
        src = [coords[a] - ci[a] for a in range(grid.dim)]
        src[0] = src[0] % shape[0]  # periodic along x
        inside = np.ones(n_pore, dtype=bool)
        for a in range(1, grid.dim):
            inside &= (src[a] >= 0) & (src[a] < shape[a])
        src_compact = np.full(n_pore, -1, dtype=np.int64)
        idx = tuple(np.where(inside, s, 0) for s in src)
        src_compact[inside] = compact[idx][inside]
        fluid = src_compact >= 0
        table[i] = np.where(fluid, i * n_pore + src_compact, opp[i] * n_pore + own)
    return np.ravel_multi_index(coords, shape), table


def init_state(grid: VoxelGrid, params: FluidParams, threads: int = 1) -> FlowState:
    c, w = LATTICES[grid.dim]
    pore_index, table = _stream_table(grid, c)
    f = np.repeat((w * params.rho0)[:, None], pore_index.size, axis=1)
    return FlowState(grid, f, 0, c, w, pore_index, table, threads)


def _collide(f: np.ndarray, c: np.ndarray, w: np.ndarray, params: FluidParams) -> np.ndarray:
    tau = params.tau
    fx = params.force_x
    rho = f.sum(axis=0)
    u = (c.T.astype(float) @ f)
    u[0] += 0.5 * fx
    u /= rho
    cu = c.astype(float) @ u
    usq = (u * u).sum(axis=0)
    feq = w[:, None] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq)
    out = f - (f - feq) / tau
    if fx != 0.0:
        cx = c[:, 0].astype(float)[:, None]
        src = (1.0 - 0.5 / tau) * w[:, None] * (3.0 * (cx - u[0]) * fx + 9.0 * cu * cx * fx)
        out += src
    return out


def _chunks(n: int, parts: int):
    edges = np.linspace(0, n, max(1, parts) + 1).astype(int)
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def step(state: FlowState, params: FluidParams) -> FlowState:
    with np.errstate(over="ignore", invalid="ignore"):
        return _step(state, params)


def _step(state: FlowState, params: FluidParams) -> FlowState:
    if state.n_pore == 0:
        state.step_count += 1
        return state
    if state.threads > 1:
        post = np.empty_like(state.f)
        new = np.empty_like(state.f)

        def collide_part(ab):
            a, b = ab
            post[:, a:b] = _collide(state.f[:, a:b], state.c, state.w, params)

        def stream_part(ab):
            a, b = ab
            new[:, a:b] = flat[state.stream_index[:, a:b]]

        parts = _chunks(state.n_pore, state.threads)
        with ThreadPoolExecutor(state.threads) as ex:
            list(ex.map(collide_part, parts))
            flat = post.ravel()
            list(ex.map(stream_part, parts))
    else:
        post = _collide(state.f, state.c, state.w, params)
        new = post.ravel()[state.stream_index]
    if not np.isfinite(new).all():
        raise LBMInstabilityError(
            f"non-finite distributions at step {state.step_count + 1} "
            f"(tau={params.tau}, force_x={params.force_x}); reduce the force or raise tau")
    state.f = new
    state.step_count += 1
    return state


def velocity(state: FlowState, params: FluidParams) -> np.ndarray:
    """Macroscopic velocity on the full grid, zero on grain cells."""
    dim = state.grid.dim
    shape = state.grid.phase.shape
    u = np.zeros((dim,) + shape)
    if state.n_pore:
        rho = state.f.sum(axis=0)
        mom = state.c.T.astype(float) @ state.f
        mom[0] += 0.5 * params.force_x
        for a in range(dim):
            u[a].flat[state.pore_index] = mom[a] / rho
    return u


def mean_ux(state: FlowState, params: FluidParams) -> float:
    """Mean x-velocity over every cell of the domain, grains included."""
    if state.n_pore == 0:
        return 0.0
    rho = state.f.sum(axis=0)
    mom = state.c[:, 0].astype(float) @ state.f + 0.5 * params.force_x
    return float((mom / rho).sum() / state.grid.phase.size)


def run_to_steady(state: FlowState, params: FluidParams, tol: float = 1e-6,
                  check_every: int = 100, max_steps: int = 200_000) -> FlowField:
    if not tol > 0:
        raise ValueError("tol must be positive")
    eps = np.finfo(float).eps
    prev = mean_ux(state, params)
    converged = state.n_pore == 0
    while not converged and state.step_count < max_steps:
        for _ in range(min(check_every, max_steps - state.step_count)):
            step(state, params)
        now = mean_ux(state, params)
        if not np.isfinite(now):
            raise LBMInstabilityError(f"mean velocity became non-finite at step {state.step_count}")
        if abs(now - prev) / max(abs(now), eps) < tol:
            converged = True
        prev = now
    return FlowField(velocity(state, params), mean_ux(state, params), converged, state.step_count)


def darcy_permeability(mean_ux: float, mu: float, grad_p: float) -> float:
    if grad_p == 0:
        raise ValueError("pressure gradient must be nonzero")
    return -mu * mean_ux / grad_p


def to_millidarcy(k_lattice: float, pixel_size_m: float) -> float:
    if not pixel_size_m > 0:
        raise ValueError("pixel_size_m must be positive")
    return k_lattice * pixel_size_m**2 / MILLIDARCY_M2


def from_millidarcy(k_md: float, pixel_size_m: float) -> float:
    if not pixel_size_m > 0:
        raise ValueError("pixel_size_m must be positive")
    return k_md * MILLIDARCY_M2 / pixel_size_m**2


def permeability(grid: VoxelGrid, params: FluidParams | None = None, tol: float = 1e-6,
                 check_every: int = 100, max_steps: int = 200_000, threads: int = 1):
    """Solve to steady state and return ``(k_lattice, flow_field)``."""
    params = params or FluidParams()
    state = init_state(grid, params, threads=threads)
    flow = run_to_steady(state, params, tol, check_every, max_steps)
    if params.force_x == 0:
        return 0.0, flow
    return darcy_permeability(flow.mean_ux, params.mu, -params.force_x), flow


def write_flow_field(path, u: np.ndarray) -> None:
    dim = u.shape[0]
    n = u.shape[1]
    header = _FLOW_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, dim, n)
    body = b"".join(np.asarray(u[a], dtype="<f8").tobytes(order="F") for a in range(dim))
    Path(path).write_bytes(header + body)


def read_flow_field(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, dim, n = _FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {FLOW_MAGIC!r}")
    if version != FLOW_VERSION:
        raise ValueError(f"{path}: flow field version {version} unsupported (reader version {FLOW_VERSION})")
    data = np.frombuffer(raw, dtype="<f8", offset=_FLOW_HEADER.size)
    if data.size != dim * n**dim:
        raise ValueError(f"{path}: expected {dim * n**dim} values, found {data.size}")
    return np.stack([data[a * n**dim:(a + 1) * n**dim].reshape((n,) * dim, order="F") for a in range(dim)])
