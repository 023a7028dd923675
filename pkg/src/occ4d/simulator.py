"""Analytic synthetic world used as an exact oracle.

A scene is a ground half-space plus axis-aligned boxes translating at
constant velocity. Rays are cast analytically, so scans, occupancy and
depths are all exact.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .clip import DEFAULT_FREQUENCY_HZ, Frame, SequenceClip
from .geometry import ClassLabel, RigidPose, VolumeBounds, as_vec3, direction_from_angles
from .grid import OccupancyGrid4D


@dataclass(frozen=True)
class Box:
    min_corner: np.ndarray
    max_corner: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    label: ClassLabel = ClassLabel.VEHICLE

    def __post_init__(self):
        lo, hi, v = as_vec3(self.min_corner), as_vec3(self.max_corner), as_vec3(self.velocity)
        if not np.all(lo < hi):
            raise ValueError("box corners must be ordered")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "velocity", v)

    def at(self, time: float) -> tuple[np.ndarray, np.ndarray]:
        shift = self.velocity * time
        return self.min_corner + shift, self.max_corner + shift


@dataclass(frozen=True)
class Scene:
    ground_z: Optional[float] = 0.0
    boxes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class LidarModel:
    azimuth_count: int
    elevation_angles: tuple
    max_range: float = 100.0

    def __post_init__(self):
        el = tuple(float(e) for e in self.elevation_angles)
        if self.azimuth_count < 1:
            raise ValueError("azimuth_count must be >= 1")
        if not el or any(b <= a for a, b in zip(el, el[1:])):
            raise ValueError("elevation angles must be non-empty and strictly increasing")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        object.__setattr__(self, "elevation_angles", el)

    def directions(self) -> np.ndarray:
        """Sensor-frame unit directions, elevation-major."""
        az = -math.pi + (np.arange(self.azimuth_count) + 0.5) * (2 * math.pi / self.azimuth_count)
        el = np.asarray(self.elevation_angles)
        ee, aa = np.meshgrid(el, az, indexing="ij")
        return direction_from_angles(aa.ravel(), ee.ravel())

    @property
    def n_beams(self) -> int:
        return self.azimuth_count * len(self.elevation_angles)


def lidar_preset(name: str, azimuth_count: Optional[int] = None) -> LidarModel:
    cfg = configparser.ConfigParser()
    cfg.read_string(resources.files("occ4d.data").joinpath("lidar_presets.ini").read_text())
    if name not in cfg:
        raise KeyError(f"unknown lidar preset {name!r}; have {cfg.sections()}")
    sec = cfg[name]
    el = [math.radians(float(x)) for x in sec["elevation_deg"].split(",")]
    return LidarModel(azimuth_count or sec.getint("azimuth_count"), tuple(el), sec.getfloat("max_range"))


def cast_rays(scene: Scene, time: float, origins, directions, max_range: float = np.inf):
    """Vectorized exact ray cast. Returns ``(depth, label)``; misses are NaN / -1."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    best = np.full(n, np.inf)
    label = np.full(n, -1, dtype=np.int8)
    if scene.ground_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground_z - o[:, 2]) / d[:, 2]
        ok = (d[:, 2] < 0) & (o[:, 2] > scene.ground_z) & (t > 0)
        best = np.where(ok, t, best)
        label[ok] = int(ClassLabel.BACKGROUND)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    for box in scene.boxes:
        lo, hi = box.at(time)
        with np.errstate(invalid="ignore"):
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        ok = (t_enter <= t_exit) & (t_enter > 0) & (t_enter < best)
        best = np.where(ok, t_enter, best)
        label[ok] = int(box.label)
    miss = ~np.isfinite(best) | (best > max_range)
    best[miss] = np.nan
    label[miss] = -1
    return best, label


def cast_ray_exact(scene: Scene, time: float, origin, direction, max_range: float = np.inf) -> Optional[float]:
    depth, _ = cast_rays(scene, time, as_vec3(origin)[None], as_vec3(direction)[None], max_range)
    return None if np.isnan(depth[0]) else float(depth[0])


def scan(
    scene: Scene,
    time: float,
    sensor_pose: RigidPose,
    lidar: LidarModel,
    return_labels: bool = False,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    """World-frame returns of one sweep; misses are dropped."""
    dirs = sensor_pose.rotate(lidar.directions())
    origins = np.broadcast_to(sensor_pose.translation, dirs.shape)
    depth, label = cast_rays(scene, time, origins, dirs, lidar.max_range)
    keep = ~np.isnan(depth)
    depth = depth[keep]
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        depth = np.maximum(depth + rng.normal(0.0, noise_sigma, size=depth.shape), 1e-3)
    pts = origins[keep] + depth[:, None] * dirs[keep]
    if return_labels:
        return pts, label[keep]
    return pts


def generate_clip(
    scene: Scene,
    poses: Sequence[RigidPose],
    timestamps: Sequence[float],
    lidar: LidarModel,
    present_index: Optional[int] = None,
    frequency: float = DEFAULT_FREQUENCY_HZ,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> SequenceClip:
    """Scan at every pose; frames ``[0, present_index]`` form the history."""
    if len(poses) < 2 or len(poses) != len(timestamps):
        raise ValueError("need >= 2 poses with matching timestamps")
    if present_index is None:
        present_index = len(poses) // 2 - 1
    rng = np.random.default_rng(seed)
    frames = []
    for pose, ts in zip(poses, timestamps):
        pts, labels = scan(scene, ts, pose, lidar, return_labels=True, noise_sigma=noise_sigma, rng=rng)
        frames.append(Frame(pose.inverse().apply(pts), pose, float(ts), labels))
    return SequenceClip(frames[: present_index + 1], frames[present_index + 1 :], frequency)


def linear_trajectory(n_frames: int, frequency: float = DEFAULT_FREQUENCY_HZ, start=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0), yaw: float = 0.0, t0: float = 0.0):
    ts = [t0 + k / frequency for k in range(n_frames)]
    start, velocity = as_vec3(start), as_vec3(velocity)
    poses = [RigidPose.from_yaw(yaw, start + velocity * (t - t0)) for t in ts]
    return poses, ts


def ground_truth_occupancy(scene: Scene, time: float, bounds: VolumeBounds, voxel_size: float) -> OccupancyGrid4D:
    """Binary grid: a voxel is occupied iff its center is inside a solid."""
    grid = OccupancyGrid4D.empty(bounds, voxel_size, 1)
    c = grid.voxel_centers()
    occ = np.zeros(grid.dims, dtype=bool)
    if scene.ground_z is not None:
        occ |= c[..., 2] < scene.ground_z
    for box in scene.boxes:
        lo, hi = box.at(time)
        occ |= np.all((c >= lo) & (c <= hi), axis=-1)
    grid.values[0] = occ
    return grid
