"""On-disk clip format.

A clip directory holds a ``manifest.ini``, one PCF1 file per frame, a
``poses.bin`` (per frame: 12 float64 row-major world-from-sensor ``[R|t]``
then a float64 timestamp) and optional per-frame ``.labels`` sidecars
(one int8 class per point).
"""

from __future__ import annotations

import configparser
import struct
from pathlib import Path

import numpy as np

from .clip import Frame, SequenceClip
from .geometry import GeometryError, RigidPose

PCF1_MAGIC = b"PCF1"
PCF1_VERSION = 1
_PCF1_HEADER = struct.Struct("<4sBI")
_POSE_RECORD = struct.Struct("<13d")


class ClipFormatError(ValueError):
    pass


class FrameFormatError(ClipFormatError):
    pass


class PoseFormatError(ClipFormatError):
    pass


class TimestampError(ClipFormatError):
    pass


class ManifestError(ClipFormatError):
    pass


def write_frame(path, points) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as f:
        f.write(_PCF1_HEADER.pack(PCF1_MAGIC, PCF1_VERSION, len(pts)))
        f.write(pts.tobytes())


def read_frame(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _PCF1_HEADER.size:
        raise FrameFormatError(f"{path}: truncated header")
    magic, version, count = _PCF1_HEADER.unpack_from(data)
    if magic != PCF1_MAGIC:
        raise FrameFormatError(f"{path}: bad magic {magic!r}")
    if version != PCF1_VERSION:
        raise FrameFormatError(f"{path}: unsupported version {version}")
    payload = data[_PCF1_HEADER.size :]
    if len(payload) != 12 * count:
        raise FrameFormatError(f"{path}: truncated payload ({len(payload)} bytes for {count} points)")
    return np.frombuffer(payload, dtype="<f4").reshape(count, 3).astype(np.float64)


def write_poses(path, poses, timestamps) -> None:
    with open(path, "wb") as f:
        for pose, ts in zip(poses, timestamps):
            m = np.hstack([pose.rotation, pose.translation[:, None]])
            f.write(_POSE_RECORD.pack(*m.ravel(), float(ts)))


def read_poses(path) -> tuple[list[RigidPose], list[float]]:
    data = Path(path).read_bytes()
    if len(data) % _POSE_RECORD.size:
        raise PoseFormatError(f"{path}: size {len(data)} is not a whole number of pose records")
    poses, ts = [], []
    for k, rec in enumerate(_POSE_RECORD.iter_unpack(data)):
        try:
            poses.append(RigidPose.from_matrix(np.array(rec[:12]).reshape(3, 4)))
        except GeometryError as e:
            raise PoseFormatError(f"{path}: pose {k}: {e}") from None
        ts.append(rec[12])
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise TimestampError(f"{path}: timestamps are not strictly increasing")
    return poses, ts


def save_clip(clip: SequenceClip, directory) -> Path:
    """Write a clip; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames = clip.past_frames + clip.future_frames
    names = []
    for k, fr in enumerate(frames):
        name = f"frame_{k:04d}.pcf"
        write_frame(d / name, fr.points)
        if fr.labels is not None:
            fr.labels.astype(np.int8).tofile(d / f"frame_{k:04d}.labels")
        names.append(name)
    write_poses(d / "poses.bin", [f.pose for f in frames], [f.timestamp for f in frames])
    cfg = configparser.ConfigParser()
    cfg["clip"] = {
        "frames": ", ".join(names),
        "poses": "poses.bin",
        "present_index": str(len(clip.past_frames) - 1),
        "frequency": repr(float(clip.frequency)),
    }
    manifest = d / "manifest.ini"
    with open(manifest, "w") as f:
        cfg.write(f)
    return manifest


def load_clip(manifest_path, load_future_points: bool = True) -> SequenceClip:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.ini"
    cfg = configparser.ConfigParser()
    if not cfg.read(manifest_path):
        raise ManifestError(f"{manifest_path}: cannot read manifest")
    try:
        sec = cfg["clip"]
        names = [n.strip() for n in sec["frames"].split(",") if n.strip()]
        present = sec.getint("present_index")
        freq = sec.getfloat("frequency")
        poses_name = sec["poses"]
    except (KeyError, ValueError) as e:
        raise ManifestError(f"{manifest_path}: malformed manifest ({e})") from None
    if present < 0 or present >= len(names):
        raise ManifestError(f"{manifest_path}: present_index {present} out of range")
    if present == 0:
        # the present frame alone gives no history to extrapolate from
        raise ManifestError(f"{manifest_path}: present_index 0 leaves no history")
    root = manifest_path.parent
    poses, ts = read_poses(root / poses_name)
    if len(poses) != len(names):
        raise ManifestError(f"{manifest_path}: {len(names)} frames but {len(poses)} poses")
    frames = []
    for k, name in enumerate(names):
        if k > present and not load_future_points:
            pts, labels = np.zeros((0, 3)), None
        else:
            pts = read_frame(root / name)
            lab_path = (root / name).with_suffix(".labels")
            labels = np.fromfile(lab_path, dtype=np.int8) if lab_path.exists() else None
            if labels is not None and len(labels) != len(pts):
                raise FrameFormatError(f"{lab_path}: {len(labels)} labels for {len(pts)} points")
        frames.append(Frame(pts, poses[k], ts[k], labels))
    return SequenceClip(frames[: present + 1], frames[present + 1 :], freq)
