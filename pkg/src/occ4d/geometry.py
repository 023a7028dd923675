"""Rigid poses, rays, axis-aligned volumes and spherical projection.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` (or ``(N, 3)`` for
batches); all coordinates are meters.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ORTHONORMAL_TOL = 1e-6
UNIT_TOL = 1e-9


class GeometryError(ValueError):
    pass


class ClassLabel(enum.IntEnum):
    BACKGROUND = 0
    PEDESTRIAN = 1
    VEHICLE = 2
    OTHER_FOREGROUND = 3

    @classmethod
    def parse(cls, name: str) -> "ClassLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class label {name!r}") from None


NO_LABEL = -1


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite vector {a}")
    return a


def normalize(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise GeometryError("cannot normalize a zero vector")
    return a / n


@dataclass(frozen=True)
class RigidPose:
    """World-from-sensor transform ``x_world = R @ x_sensor + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = as_vec3(self.translation)
        if not np.allclose(r @ r.T, np.eye(3), atol=ORTHONORMAL_TOL) or abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError("rotation is not orthonormal with det +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, translation)

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        """Build from a 3x4 or 4x4 ``[R | t]`` matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        return transform_points(self, points)

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


def transform_points(pose: RigidPose, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class VolumeBounds:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo, hi = as_vec3(self.min_corner), as_vec3(self.max_corner)
        if not np.all(lo < hi):
            raise GeometryError(f"bounds must satisfy min < max componentwise, got {lo} / {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_ranges(cls, x, y, z) -> "VolumeBounds":
        return cls((x[0], y[0], z[0]), (x[1], y[1], z[1]))

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=-1)

    def scaled(self, s: float) -> "VolumeBounds":
        return VolumeBounds(self.min_corner * s, self.max_corner * s)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    gt_depth: Optional[float] = None
    timestep: int = 0
    class_label: Optional[ClassLabel] = None

    def __post_init__(self):
        o, d = as_vec3(self.origin), as_vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise GeometryError("ray direction must be unit length")
        if self.gt_depth is not None and not self.gt_depth > 0:
            raise GeometryError("gt_depth must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class RayBatch:
    """Structure-of-arrays ray container.

    ``gt_depth`` is NaN where unknown and ``class_label`` is ``NO_LABEL``
    where unlabeled. ``timestep`` is a 0-based index into a grid's time axis.
    """

    origins: np.ndarray
    directions: np.ndarray
    gt_depth: np.ndarray = None
    timestep: np.ndarray = None
    class_label: np.ndarray = None

    def __post_init__(self):
        self.origins = np.ascontiguousarray(np.asarray(self.origins, dtype=np.float64).reshape(-1, 3))
        self.directions = np.ascontiguousarray(np.asarray(self.directions, dtype=np.float64).reshape(-1, 3))
        n = len(self.origins)
        if len(self.directions) != n:
            raise GeometryError("origins and directions differ in length")
        if n and np.any(np.abs(np.linalg.norm(self.directions, axis=1) - 1.0) > UNIT_TOL):
            raise GeometryError("ray directions must be unit length")
        if self.gt_depth is None:
            self.gt_depth = np.full(n, np.nan)
        self.gt_depth = np.asarray(self.gt_depth, dtype=np.float64).reshape(n)
        if self.timestep is None:
            self.timestep = np.zeros(n, dtype=np.int64)
        self.timestep = np.asarray(self.timestep, dtype=np.int64).reshape(n)
        if self.class_label is None:
            self.class_label = np.full(n, NO_LABEL, dtype=np.int8)
        self.class_label = np.asarray(self.class_label, dtype=np.int8).reshape(n)

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def from_rays(cls, rays) -> "RayBatch":
        rays = list(rays)
        return cls(
            origins=np.array([r.origin for r in rays]).reshape(-1, 3),
            directions=np.array([r.direction for r in rays]).reshape(-1, 3),
            gt_depth=np.array([np.nan if r.gt_depth is None else r.gt_depth for r in rays]),
            timestep=np.array([r.timestep for r in rays], dtype=np.int64),
            class_label=np.array([NO_LABEL if r.class_label is None else int(r.class_label) for r in rays]),
        )

    @classmethod
    def from_endpoints(cls, origin, points, timestep: int = 0, labels=None) -> "RayBatch":
        """Rays from a sensor origin to each endpoint; gt depth is the range."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        o = np.broadcast_to(as_vec3(origin), pts.shape)
        delta = pts - o
        rng = np.linalg.norm(delta, axis=1)
        keep = rng > 0
        return cls(
            origins=o[keep],
            directions=delta[keep] / rng[keep, None],
            gt_depth=rng[keep],
            timestep=np.full(int(keep.sum()), timestep, dtype=np.int64),
            class_label=None if labels is None else np.asarray(labels)[keep],
        )

    def subset(self, mask) -> "RayBatch":
        return RayBatch(
            self.origins[mask], self.directions[mask], self.gt_depth[mask], self.timestep[mask], self.class_label[mask]
        )

    def endpoints(self, depth=None) -> np.ndarray:
        d = self.gt_depth if depth is None else np.asarray(depth, dtype=np.float64)
        return self.origins + d[:, None] * self.directions

    @staticmethod
    def concatenate(batches) -> "RayBatch":
        batches = list(batches)
        if not batches:
            return RayBatch(np.zeros((0, 3)), np.zeros((0, 3)))
        return RayBatch(
            np.concatenate([b.origins for b in batches]),
            np.concatenate([b.directions for b in batches]),
            np.concatenate([b.gt_depth for b in batches]),
            np.concatenate([b.timestep for b in batches]),
            np.concatenate([b.class_label for b in batches]),
        )


def slab_intervals(origins, directions, lo, hi):
    """Vectorized slab test. Returns ``(t_near, t_far, hit)`` with ``t_near >= 0``.

    Boundary contacts count as hits; zero direction components are handled
    with infinities, never divisions by zero.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel axis: inside the slab -> (-inf, inf), outside -> empty
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    hit = t_near <= t_far
    return t_near, t_far, hit


def ray_volume_intersection(origin, direction, bounds: VolumeBounds) -> Optional[tuple[float, float]]:
    t_near, t_far, hit = slab_intervals(origin, direction, bounds.min_corner, bounds.max_corner)
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


def spherical_project(point, sensor_origin=(0.0, 0.0, 0.0)) -> tuple[float, float, float]:
    """Azimuth ``atan2(y, x)``, elevation ``asin(z / r)`` and range ``r``."""
    v = as_vec3(point) - as_vec3(sensor_origin)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise GeometryError("degenerate projection: point coincides with sensor origin")
    az = math.atan2(v[1], v[0])
    if az == -math.pi:
        az = math.pi
    el = math.asin(max(-1.0, min(1.0, v[2] / r)))
    return az, el, r


def spherical_project_many(points, sensor_origin=(0.0, 0.0, 0.0)):
    v = np.asarray(points, dtype=np.float64).reshape(-1, 3) - as_vec3(sensor_origin)
    r = np.linalg.norm(v, axis=1)
    if np.any(r == 0):
        raise GeometryError("degenerate projection: point coincides with sensor origin")
    az = np.arctan2(v[:, 1], v[:, 0])
    az = np.where(az == -np.pi, np.pi, az)
    el = np.arcsin(np.clip(v[:, 2] / r, -1.0, 1.0))
    return az, el, r


def spherical_unproject(azimuth, elevation, rng, sensor_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    r = np.asarray(rng, dtype=np.float64)
    ce = np.cos(el)
    v = np.stack([r * ce * np.cos(az), r * ce * np.sin(az), r * np.sin(el)], axis=-1)
    return v + np.asarray(sensor_origin, dtype=np.float64)


def direction_from_angles(azimuth, elevation) -> np.ndarray:
    return spherical_unproject(azimuth, elevation, np.ones(np.shape(azimuth)))
