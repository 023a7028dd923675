"""Expected-depth rendering from occupancy, its gradient, and depth images.

A ray crossing voxels ``v_1..v_n`` may only stop at a voxel's entry boundary
(distance ``lambda_i``) or escape. Voxel occupancy is the conditional
probability of stopping there given the ray reached it, so

    p_i = z_i * prod_{j<i} (1 - z_j),   residual = prod_j (1 - z_j).

Escaping mass is placed at an *escape distance*: the ground-truth depth in
training mode, the grid exit in inference mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .geometry import RayBatch, RigidPose
from .grid import OccupancyGrid4D, RayTraversal, trace_rays

ESCAPE_MODES = ("virtual", "boundary", "outside")


class RenderError(ValueError):
    pass


@dataclass
class RaySample:
    occupancies: np.ndarray
    boundary_distances: np.ndarray
    exit_distance: float = math.nan
    gt_depth: Optional[float] = None

    def __post_init__(self):
        self.occupancies = np.asarray(self.occupancies, dtype=np.float64).reshape(-1)
        self.boundary_distances = np.asarray(self.boundary_distances, dtype=np.float64).reshape(-1)
        if len(self.occupancies) != len(self.boundary_distances):
            raise RenderError("occupancies and boundary_distances differ in length")

    @property
    def n(self) -> int:
        return len(self.occupancies)


@dataclass
class RenderResult:
    expected_depth: Optional[float]
    stop_probabilities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residual_mass: float = 1.0

    @property
    def no_intersection(self) -> bool:
        return self.expected_depth is None


def stop_probabilities(occupancies) -> tuple[np.ndarray, float]:
    z = np.asarray(occupancies, dtype=np.float64).reshape(-1)
    free = np.cumprod(1.0 - z)
    reach = np.concatenate(([1.0], free[:-1]))
    residual = float(free[-1]) if len(z) else 1.0
    return reach * z, residual


def _expected(sample: RaySample, escape: float) -> RenderResult:
    p, residual = stop_probabilities(sample.occupancies)
    depth = float(np.dot(p, sample.boundary_distances) + residual * escape)
    return RenderResult(depth, p, residual)


def expected_depth_train(sample: RaySample) -> RenderResult:
    """Escaping mass stops at a virtual point placed at the ground-truth depth."""
    if sample.gt_depth is None:
        raise RenderError("training render needs gt_depth")
    if sample.n == 0:
        return RenderResult(float(sample.gt_depth))
    return _expected(sample, float(sample.gt_depth))


def expected_depth_infer(sample: RaySample) -> RenderResult:
    """Escaping mass stops at the grid boundary; ``n == 0`` yields no depth."""
    if sample.n == 0:
        return RenderResult(None)
    return _expected(sample, float(sample.exit_distance))


def escape_distance(sample: RaySample, mode: str) -> float:
    if mode == "virtual":
        return float(sample.gt_depth)
    if mode == "boundary":
        return float(sample.exit_distance)
    if mode == "outside":
        return max(float(sample.gt_depth), float(sample.exit_distance))
    raise RenderError(f"unknown escape mode {mode!r}")


def grad_expected_depth(sample: RaySample, mode: str = "virtual") -> np.ndarray:
    """d(expected depth)/d(z_k), division-free.

    With ``A_k = prod_{j<k}(1 - z_j)`` and ``B_k`` the depth expected from
    rays that pass voxel k (``B_n = escape``,
    ``B_{k-1} = z_k lambda_k + (1 - z_k) B_k``), the partial is
    ``A_k (lambda_k - B_k)``.
    """
    if sample.n == 0:
        raise RenderError("gradient needs at least one traversed voxel")
    z = sample.occupancies
    lam = sample.boundary_distances
    esc = escape_distance(sample, mode)
    n = len(z)
    reach = np.concatenate(([1.0], np.cumprod(1.0 - z)[:-1]))
    after = np.empty(n)
    b = esc
    for k in range(n - 1, -1, -1):
        after[k] = b
        b = z[k] * lam[k] + (1.0 - z[k]) * b
    return reach * (lam - after)


# -- batched kernels -----------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _render_kernel(values, offsets, vox, entry, timestep, escape):
    n = len(offsets) - 1
    out = np.empty(n)
    for r in range(n):
        a, b = offsets[r], offsets[r + 1]
        if a == b:
            out[r] = escape[r]
            continue
        slab = values[timestep[r]]
        reach = 1.0
        acc = 0.0
        for k in range(a, b):
            z = slab[vox[k]]
            acc += reach * z * entry[k]
            reach *= 1.0 - z
        out[r] = acc + reach * escape[r]
    return out


@numba.njit(cache=True, nogil=True)
def _render_grad_kernel(values, offsets, vox, entry, timestep, escape, gt, grad):
    """Accumulates d(sum_r |gt_r - depth_r|)/dz into ``grad`` in ray order."""
    n = len(offsets) - 1
    depth = np.empty(n)
    max_len = 0
    for r in range(n):
        if offsets[r + 1] - offsets[r] > max_len:
            max_len = offsets[r + 1] - offsets[r]
    reach_buf = np.empty(max_len + 1)
    for r in range(n):
        a, b = offsets[r], offsets[r + 1]
        if a == b:
            depth[r] = escape[r]
            continue
        slab = values[timestep[r]]
        reach = 1.0
        acc = 0.0
        for k in range(a, b):
            z = slab[vox[k]]
            reach_buf[k - a] = reach
            acc += reach * z * entry[k]
            reach *= 1.0 - z
        d = acc + reach * escape[r]
        depth[r] = d
        diff = d - gt[r]
        if diff == 0.0:
            continue
        sgn = 1.0 if diff > 0.0 else -1.0
        g = grad[timestep[r]]
        after = escape[r]
        for k in range(b - 1, a - 1, -1):
            z = slab[vox[k]]
            g[vox[k]] += sgn * reach_buf[k - a] * (entry[k] - after)
            after = z * entry[k] + (1.0 - z) * after
    return depth


def _escape_array(traversal: RayTraversal, gt: np.ndarray, mode: str) -> np.ndarray:
    if mode == "virtual":
        return gt.copy()
    if mode == "boundary":
        return traversal.t_far.copy()
    if mode == "outside":
        return np.maximum(gt, traversal.t_far)
    raise RenderError(f"unknown escape mode {mode!r}")


def _check_timesteps(grid: OccupancyGrid4D, timestep: np.ndarray) -> None:
    if len(timestep) and (timestep.min() < 0 or timestep.max() >= grid.n_timesteps):
        raise RenderError(f"ray timestep outside [0, {grid.n_timesteps})")


def render_rays(grid: OccupancyGrid4D, rays: RayBatch, mode: str = "boundary", traversal: RayTraversal = None) -> np.ndarray:
    """Expected depth per ray. Rays missing the grid are NaN in boundary mode."""
    _check_timesteps(grid, rays.timestep)
    tr = traversal if traversal is not None else trace_rays(grid, rays.origins, rays.directions)
    esc = _escape_array(tr, rays.gt_depth, mode)
    flat = grid.values.reshape(grid.n_timesteps, -1)
    depth = _render_kernel(flat, tr.offsets, tr.voxel, tr.entry, rays.timestep, esc)
    if mode == "boundary":
        depth[~tr.hit] = np.nan
    return depth


def render_and_grad(
    values: np.ndarray, traversal: RayTraversal, timestep: np.ndarray, gt: np.ndarray, mode: str = "virtual"
) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed L1 loss, rendered depths and d(loss)/d(values) for a traced batch."""
    flat = np.ascontiguousarray(values.reshape(values.shape[0], -1))
    grad = np.zeros_like(flat)
    esc = _escape_array(traversal, gt, mode)
    depth = _render_grad_kernel(flat, traversal.offsets, traversal.voxel, traversal.entry, timestep, esc, gt, grad)
    loss = float(np.abs(gt - depth).sum())
    return loss, depth, grad.reshape(values.shape)


def l1_depth_loss(grid: OccupancyGrid4D, rays: RayBatch, mode: str = "virtual", reduction: str = "sum"):
    """``(loss, residuals)`` with residual ``gt - rendered`` per ray."""
    if np.any(~(rays.gt_depth > 0)):
        raise RenderError("every ray needs a positive gt_depth")
    _check_timesteps(grid, rays.timestep)
    tr = trace_rays(grid, rays.origins, rays.directions)
    flat = grid.values.reshape(grid.n_timesteps, -1)
    depth = _render_kernel(flat, tr.offsets, tr.voxel, tr.entry, rays.timestep, _escape_array(tr, rays.gt_depth, mode))
    residuals = rays.gt_depth - depth
    loss = float(np.abs(residuals).sum())
    if reduction == "mean":
        loss = loss / max(len(rays), 1)
    elif reduction != "sum":
        raise RenderError(f"unknown reduction {reduction!r}")
    return loss, residuals


def sample_ray(grid: OccupancyGrid4D, origin, direction, timestep: int = 0, gt_depth: Optional[float] = None) -> RaySample:
    """Gather the per-voxel occupancies and boundaries along one ray."""
    tr = trace_rays(grid, np.asarray(origin)[None], np.asarray(direction)[None])
    flat = grid.values[timestep].reshape(-1)
    return RaySample(flat[tr.voxel], tr.entry.copy(), float(tr.t_far[0]), gt_depth)


# -- depth images -----------------------------------------------------------


def pinhole_rays(camera_pose: RigidPose, width: int, height: int, fov: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit world directions through pixel centers, ``(height, width, 3)``.

    Camera frame: +x forward, +y left, +z up; ``fov`` is horizontal.
    """
    if width <= 0 or height <= 0:
        raise RenderError("image size must be positive")
    if not 0 < fov < math.pi:
        raise RenderError("fov must lie in (0, pi)")
    f = 0.5 * width / math.tan(0.5 * fov)
    u = np.arange(width) + 0.5 - 0.5 * width
    v = np.arange(height) + 0.5 - 0.5 * height
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([np.full_like(uu, f), -uu, -vv], axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    world = camera_pose.rotate(cam.reshape(-1, 3)).reshape(height, width, 3)
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    return np.broadcast_to(camera_pose.translation, world.shape), world


def render_depth_image(
    grid: OccupancyGrid4D, timestep: int, camera_pose: RigidPose, width: int, height: int, fov: float
) -> np.ndarray:
    """Inference-mode depth per pixel; NaN marks rays that miss the grid."""
    if not 0 <= timestep < grid.n_timesteps:
        raise RenderError(f"timestep {timestep} outside [0, {grid.n_timesteps})")
    origins, dirs = pinhole_rays(camera_pose, width, height, fov)
    rays = RayBatch(origins.reshape(-1, 3), dirs.reshape(-1, 3), timestep=np.full(width * height, timestep))
    return render_rays(grid, rays, mode="boundary").reshape(height, width)


PGM_SCALE = 256.0


def write_depth_pgm(depth: np.ndarray, path, scale: float = PGM_SCALE) -> None:
    """16-bit binary PGM (big-endian per the format), sentinel 0, plus a scale sidecar."""
    d = np.asarray(depth, dtype=np.float64)
    q = np.where(np.isfinite(d), np.clip(np.round(d * scale), 0, 65535), 0).astype(">u2")
    h, w = d.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())
    path.with_suffix(".scale.txt").write_text(f"depth_scale = {scale:g}\nsentinel = 0\nunit = meters\n")


def read_depth_pgm(path, scale: float = PGM_SCALE) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise RenderError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 65535:
        raise RenderError(f"{path}: expected 16-bit PGM")
    q = np.frombuffer(data[pos + 1 : pos + 1 + 2 * w * h], dtype=">u2").reshape(h, w)
    out = q.astype(np.float64) / scale
    out[q == 0] = np.nan
    return out
