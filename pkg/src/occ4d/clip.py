"""LiDAR sequence clips: past and future frames with sensor poses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import NO_LABEL, RayBatch, RigidPose

DEFAULT_FREQUENCY_HZ = 2.0


class ClipError(ValueError):
    pass


@dataclass
class Frame:
    """One sweep. ``points`` are in the sensor frame; ``pose`` is world-from-sensor."""

    points: np.ndarray
    pose: RigidPose
    timestamp: float
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ClipError("labels and points differ in length")

    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.points)

    def rays(self, timestep: int = 0, pose: RigidPose = None) -> RayBatch:
        """Rays from the sensor origin to each return.

        ``pose`` substitutes the sensor placement (e.g. a planned pose); the
        sensor-frame directions and ranges are kept.
        """
        pose = self.pose if pose is None else pose
        rng = np.linalg.norm(self.points, axis=1)
        keep = rng > 0
        dirs = pose.rotate(self.points[keep] / rng[keep, None])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        labels = None if self.labels is None else self.labels[keep]
        return RayBatch(
            np.broadcast_to(pose.translation, dirs.shape),
            dirs,
            rng[keep],
            np.full(len(dirs), timestep, dtype=np.int64),
            np.full(len(dirs), NO_LABEL, dtype=np.int8) if labels is None else labels,
        )

    def transformed(self, world_change: RigidPose) -> "Frame":
        return replace(self, pose=world_change.compose(self.pose))


@dataclass
class SequenceClip:
    past_frames: list[Frame]
    future_frames: list[Frame] = field(default_factory=list)
    frequency: float = DEFAULT_FREQUENCY_HZ

    def __post_init__(self):
        ts = [f.timestamp for f in self.past_frames + self.future_frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ClipError("frame timestamps must be strictly increasing")

    @property
    def present(self) -> Frame:
        if not self.past_frames:
            raise ClipError("clip has no history")
        return self.past_frames[-1]

    @property
    def future_timestamps(self) -> list[float]:
        return [f.timestamp for f in self.future_frames]

    @property
    def future_poses(self) -> list[RigidPose]:
        return [f.pose for f in self.future_frames]

    def history(self) -> "SequenceClip":
        """The clip with future frames removed."""
        return SequenceClip(list(self.past_frames), [], self.frequency)

    def recentered(self) -> "SequenceClip":
        """Re-express every pose relative to the present sensor pose."""
        change = self.present.pose.inverse()
        return SequenceClip(
            [f.transformed(change) for f in self.past_frames],
            [f.transformed(change) for f in self.future_frames],
            self.frequency,
        )

    def future_rays(self, poses: list[RigidPose] = None) -> RayBatch:
        poses = poses if poses is not None else [None] * len(self.future_frames)
        return RayBatch.concatenate(f.rays(t, p) for t, (f, p) in enumerate(zip(self.future_frames, poses)))
