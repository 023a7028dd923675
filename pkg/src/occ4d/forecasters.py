"""Occupancy forecasters that answer future depth queries.

* ``raytracing_baseline``: rasterize aligned past sweeps into one binary grid.
* ``fit_grid``: fit occupancy logits directly by gradient descent on the
  rendered L1 depth loss, either one grid shared by every future timestep
  (static) or one grid per timestep (dynamic).
* ``constant_velocity_poses``: extrapolate future sensor poses.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .clip import SequenceClip
from .geometry import RayBatch, RigidPose, VolumeBounds
from .grid import DEFAULT_VOXEL_SIZE, OccupancyGrid4D, rasterize_points, trace_rays
from .renderer import render_and_grad

logger = logging.getLogger(__name__)


class ForecastError(RuntimeError):
    pass


class Variant(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class Supervision(str, enum.Enum):
    PAST_RAYS = "past_rays"
    # oracle bound for tests: fits the very rays that are later evaluated
    FUTURE_RAYS = "future_rays"


@dataclass
class FitConfig:
    variant: Variant = Variant.STATIC
    iterations: int = 1000
    step_size: float = 0.01
    init_logit: float = -4.0
    # where probability mass that leaves every voxel stops; see renderer
    escape: str = "outside"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def raytracing_baseline(clip: SequenceClip, bounds: VolumeBounds, voxel_size: float = DEFAULT_VOXEL_SIZE,
                        n_future: int = 1) -> OccupancyGrid4D:
    if not clip.past_frames:
        raise ForecastError("raytracing baseline needs at least one past frame")
    pts = np.concatenate([f.world_points() for f in clip.past_frames]) if clip.past_frames else np.zeros((0, 3))
    return rasterize_points(pts, bounds, voxel_size).replicate(n_future)


def constant_velocity_poses(past_poses: Sequence[RigidPose], past_timestamps: Sequence[float],
                            future_timestamps: Sequence[float]) -> list[RigidPose]:
    """Linear translation from the last two poses; rotation held at the last."""
    if len(past_poses) < 2 or len(past_poses) != len(past_timestamps):
        raise ForecastError("constant-velocity extrapolation needs >= 2 timed poses")
    p0, p1 = past_poses[-2], past_poses[-1]
    dt = past_timestamps[-1] - past_timestamps[-2]
    if not dt > 0:
        raise ForecastError("past timestamps must increase")
    vel = (p1.translation - p0.translation) / dt
    t_last = past_timestamps[-1]
    return [RigidPose(p1.rotation, p1.translation + vel * (ts - t_last)) for ts in future_timestamps]


def supervision_rays(clip: SequenceClip, supervision: Supervision, variant: Variant, n_future: int) -> RayBatch:
    """Training rays, each tagged with the grid timestep it supervises.

    Future frames map onto timesteps in order. Past frames carry no
    information about later slices, so a dynamic fit replicates them into
    every slice.
    """
    supervision = Supervision(supervision)
    if supervision is Supervision.FUTURE_RAYS:
        frames = clip.future_frames[:n_future]
        if not frames:
            raise ForecastError("future supervision requested but the clip has no future frames")
        batches = [f.rays(t if variant is Variant.DYNAMIC else 0) for t, f in enumerate(frames)]
    else:
        if not clip.past_frames:
            raise ForecastError("no past frames to supervise with")
        if variant is Variant.DYNAMIC:
            batches = [f.rays(t) for t in range(n_future) for f in clip.past_frames]
        else:
            batches = [f.rays(0) for f in clip.past_frames]
    rays = RayBatch.concatenate(batches)
    if len(rays) == 0:
        raise ForecastError("supervision frames contain no points")
    return rays


@dataclass
class FitResult:
    grid: OccupancyGrid4D
    loss_trace: list = field(default_factory=list)


def fit_rays(rays: RayBatch, bounds: VolumeBounds, voxel_size: float, n_slices: int, config: FitConfig) -> FitResult:
    """Gradient descent on occupancy logits; ``rays.timestep`` selects the slice."""
    template = OccupancyGrid4D.empty(bounds, voxel_size, n_slices)
    logits = np.full(template.values.shape, float(config.init_logit))
    tr = trace_rays(template, rays.origins, rays.directions)
    trace = []
    for it in range(config.iterations):
        z = sigmoid(logits)
        loss, _, grad_z = render_and_grad(z, tr, rays.timestep, rays.gt_depth, config.escape)
        if not math.isfinite(loss):
            raise ForecastError(f"loss became non-finite at iteration {it}")
        trace.append(loss)
        with np.errstate(over="ignore", invalid="ignore"):
            logits -= config.step_size * grad_z * z * (1.0 - z)
        if not np.all(np.isfinite(logits)):
            raise ForecastError(f"logits became non-finite at iteration {it}")
        if it % 100 == 0:
            logger.debug("iter %d loss %.6g", it, loss)
    return FitResult(OccupancyGrid4D(template.bounds, voxel_size, sigmoid(logits)), trace)


def fit_grid(clip: SequenceClip, bounds: VolumeBounds, voxel_size: float = DEFAULT_VOXEL_SIZE, n_future: int = 1,
             config: FitConfig = None, supervision: Supervision = Supervision.PAST_RAYS):
    """Returns ``(grid, loss_trace)``; a static fit is replicated over ``n_future`` slices."""
    config = config or FitConfig()
    rays = supervision_rays(clip, supervision, config.variant, n_future)
    slices = n_future if config.variant is Variant.DYNAMIC else 1
    res = fit_rays(rays, bounds, voxel_size, slices, config)
    grid = res.grid if slices == n_future else res.grid.replicate(n_future)
    return grid, res.loss_trace


FORECASTERS = ("raytrace", "fit-static", "fit-dynamic")


def run_forecaster(name: str, clip: SequenceClip, bounds: VolumeBounds, voxel_size: float, n_future: int,
                   config: FitConfig = None, supervision: Supervision = Supervision.PAST_RAYS):
    """Dispatch by CLI name. Returns ``(grid, loss_trace or None)``."""
    if name == "raytrace":
        return raytracing_baseline(clip, bounds, voxel_size, n_future), None
    if name in ("fit-static", "fit-dynamic"):
        cfg = FitConfig(**{**(config.__dict__ if config else {}), "variant": name.split("-")[1]})
        return fit_grid(clip, bounds, voxel_size, n_future, cfg, supervision)
    raise ForecastError(f"unknown forecaster {name!r}")
