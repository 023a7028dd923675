"""Dense 4D occupancy grids and exact voxel traversal.

Values are stored timestep-major, ``values[t, ix, iy, iz]``. Traversal is the
Amanatides-Woo walk; boundary crossing distances are recomputed from the
voxel index at every step instead of being accumulated, which keeps long
rays free of drift.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .geometry import VolumeBounds, as_vec3

DEFAULT_VOXEL_SIZE = 0.5

OCC4_MAGIC = b"OCC4"
OCC4_VERSION = 1
_OCC4_HEADER = struct.Struct("<4sB6dd3II")


class GridFormatError(ValueError):
    pass


def grid_dims(bounds: VolumeBounds, voxel_size: float) -> tuple[int, int, int]:
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    ratio = bounds.extent / voxel_size
    # tolerate representation error so 140 / 0.5 stays 280
    dims = np.ceil(ratio - 1e-9 * np.maximum(ratio, 1.0)).astype(np.int64)
    return tuple(int(max(d, 1)) for d in dims)


@dataclass
class OccupancyGrid4D:
    bounds: VolumeBounds
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        self.voxel_size = float(self.voxel_size)
        dims = grid_dims(self.bounds, self.voxel_size)
        lo = self.bounds.min_corner
        self.bounds = VolumeBounds(lo, lo + np.array(dims, dtype=np.float64) * self.voxel_size)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[None]
        if v.shape[1:] != dims:
            raise ValueError(f"values shape {v.shape[1:]} does not match dims {dims}")
        if v.shape[0] < 1:
            raise ValueError("grid needs at least one timestep")
        if v.size and (np.nanmin(v) < 0.0 or np.nanmax(v) > 1.0 or np.isnan(v).any()):
            raise ValueError("occupancy values must lie in [0, 1]")
        self.values = np.ascontiguousarray(v)

    @classmethod
    def empty(cls, bounds: VolumeBounds, voxel_size: float = DEFAULT_VOXEL_SIZE, n_timesteps: int = 1, fill: float = 0.0):
        dims = grid_dims(bounds, voxel_size)
        return cls(bounds, voxel_size, np.full((n_timesteps, *dims), fill, dtype=np.float64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_diagonal(self) -> float:
        return self.voxel_size * math.sqrt(3.0)

    def voxel_centers(self) -> np.ndarray:
        """``(nx, ny, nz, 3)`` array of voxel center coordinates."""
        axes = [self.bounds.min_corner[a] + (np.arange(n) + 0.5) * self.voxel_size for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def replicate(self, n_timesteps: int) -> "OccupancyGrid4D":
        return OccupancyGrid4D(self.bounds, self.voxel_size, np.repeat(self.values[:1], n_timesteps, axis=0))

    def save(self, path) -> None:
        save_grid(self, path)


def world_to_voxel(grid: OccupancyGrid4D, point) -> Optional[tuple[int, int, int]]:
    idx = world_to_voxel_many(grid.bounds, grid.voxel_size, np.asarray(point, dtype=np.float64)[None])[0]
    if idx[0] < 0:
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


def world_to_voxel_many(bounds: VolumeBounds, voxel_size: float, points) -> np.ndarray:
    """Floor-based voxel indices, ``-1`` rows for points outside ``bounds``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.array(grid_dims(bounds, voxel_size))
    hi = bounds.min_corner + dims * voxel_size
    inside = np.all((pts >= bounds.min_corner) & (pts <= hi), axis=1)
    idx = np.floor((pts - bounds.min_corner) / voxel_size).astype(np.int64)
    idx = np.clip(idx, 0, dims - 1)
    idx[~inside] = -1
    return idx


def rasterize_points(points, bounds: VolumeBounds, voxel_size: float = DEFAULT_VOXEL_SIZE) -> OccupancyGrid4D:
    grid = OccupancyGrid4D.empty(bounds, voxel_size, 1)
    idx = world_to_voxel_many(grid.bounds, voxel_size, points)
    idx = idx[idx[:, 0] >= 0]
    grid.values[0, idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return grid


# -- traversal ---------------------------------------------------------------


@dataclass(frozen=True)
class TraversalStep:
    voxel_index: tuple[int, int, int]
    entry_distance: float
    exit_distance: float


@dataclass
class RayTraversal:
    """Traversals of a ray batch in CSR layout.

    Ray ``r`` owns ``voxel[offsets[r]:offsets[r+1]]`` (flat indices into one
    temporal slice) with matching ``entry``/``exit`` distances.
    """

    offsets: np.ndarray
    voxel: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    @property
    def hit(self) -> np.ndarray:
        return np.diff(self.offsets) > 0

    def steps(self, r: int, dims) -> list[TraversalStep]:
        a, b = self.offsets[r], self.offsets[r + 1]
        ijk = np.unravel_index(self.voxel[a:b], dims)
        return [
            TraversalStep((int(ijk[0][k]), int(ijk[1][k]), int(ijk[2][k])), float(self.entry[a + k]), float(self.exit[a + k]))
            for k in range(b - a)
        ]


@numba.njit(cache=True, nogil=True)
def _walk(o, d, lo, vs, dims, out_vox, out_entry, out_exit, start, write):
    hi = np.empty(3)
    for a in range(3):
        hi[a] = lo[a] + dims[a] * vs
    # slab test, same arithmetic as geometry.slab_intervals
    tmin_all = -np.inf
    tmax_all = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 0, 0.0, -1.0
            continue
        inv = 1.0 / d[a]
        t0 = (lo[a] - o[a]) * inv
        t1 = (hi[a] - o[a]) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > tmin_all:
            tmin_all = t0
        if t1 < tmax_all:
            tmax_all = t1
    t_near = max(tmin_all, 0.0)
    t_far = tmax_all
    if not t_near < t_far:
        return 0, t_near, t_far

    idx = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    for a in range(3):
        p = o[a] + t_near * d[a]
        i = int(math.floor((p - lo[a]) / vs))
        if i < 0:
            i = 0
        elif i > dims[a] - 1:
            i = dims[a] - 1
        idx[a] = i
        step[a] = 1 if d[a] > 0.0 else (-1 if d[a] < 0.0 else 0)

    count = 0
    entry = t_near
    max_iter = 4 * (dims[0] + dims[1] + dims[2]) + 8
    tb = np.empty(3)
    for _ in range(max_iter):
        for a in range(3):
            if step[a] == 0:
                tb[a] = np.inf
            else:
                nxt = idx[a] + 1 if step[a] > 0 else idx[a]
                tb[a] = (lo[a] + nxt * vs - o[a]) / d[a]
        # ties: lowest axis advances first
        axis = 0
        if tb[1] < tb[axis]:
            axis = 1
        if tb[2] < tb[axis]:
            axis = 2
        ex = tb[axis]
        nxt_i = idx[axis] + step[axis]
        last = ex >= t_far or nxt_i < 0 or nxt_i >= dims[axis]
        if last:
            ex = t_far
        if ex > entry:
            if write:
                out_vox[start + count] = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
                out_entry[start + count] = entry
                out_exit[start + count] = ex
            count += 1
            entry = ex
        if last:
            break
        idx[axis] = nxt_i
    return count, t_near, t_far


@numba.njit(cache=True, nogil=True)
def _trace_batch(origins, directions, lo, vs, dims):
    n = origins.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    t_near = np.empty(n)
    t_far = np.empty(n)
    dummy_i = np.empty(0, dtype=np.int64)
    dummy_f = np.empty(0)
    for r in range(n):
        c, tn, tf = _walk(origins[r], directions[r], lo, vs, dims, dummy_i, dummy_f, dummy_f, 0, False)
        counts[r] = c
        t_near[r] = tn
        t_far[r] = tf
    offsets = np.zeros(n + 1, dtype=np.int64)
    for r in range(n):
        offsets[r + 1] = offsets[r] + counts[r]
    total = offsets[n]
    vox = np.empty(total, dtype=np.int64)
    entry = np.empty(total)
    exit_ = np.empty(total)
    for r in range(n):
        _walk(origins[r], directions[r], lo, vs, dims, vox, entry, exit_, offsets[r], True)
    return offsets, vox, entry, exit_, t_near, t_far


def trace_rays(grid: OccupancyGrid4D, origins, directions) -> RayTraversal:
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    dims = np.array(grid.dims, dtype=np.int64)
    offsets, vox, entry, exit_, t_near, t_far = _trace_batch(o, d, grid.bounds.min_corner.copy(), grid.voxel_size, dims)
    return RayTraversal(offsets, vox, entry, exit_, t_near, t_far)


def traverse(grid: OccupancyGrid4D, origin, direction) -> list[TraversalStep]:
    """Ordered voxels crossed by one ray inside the grid, with entry/exit distances."""
    tr = trace_rays(grid, as_vec3(origin)[None], as_vec3(direction)[None])
    return tr.steps(0, grid.dims)


# -- serialization -------------------------------------------------------------


def save_grid(grid: OccupancyGrid4D, path) -> None:
    b = grid.bounds
    header = _OCC4_HEADER.pack(
        OCC4_MAGIC, OCC4_VERSION, *b.min_corner, *b.max_corner, grid.voxel_size, *grid.dims, grid.n_timesteps
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.values.astype("<f4").tobytes(order="C"))


def load_grid(path) -> OccupancyGrid4D:
    data = Path(path).read_bytes()
    if len(data) < _OCC4_HEADER.size:
        raise GridFormatError(f"{path}: truncated header")
    magic, version, *rest = _OCC4_HEADER.unpack_from(data)
    if magic != OCC4_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != OCC4_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    lo, hi, vs = rest[0:3], rest[3:6], rest[6]
    nx, ny, nz, t = rest[7:11]
    n = nx * ny * nz * t
    payload = data[_OCC4_HEADER.size :]
    if len(payload) != 4 * n:
        raise GridFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, nx, ny, nz)
    grid = OccupancyGrid4D(VolumeBounds(lo, hi), vs, values)
    if grid.dims != (nx, ny, nz):
        raise GridFormatError(f"{path}: dims {(nx, ny, nz)} inconsistent with bounds/voxel size")
    return grid
