"""Run configuration read from a flat ``key = value`` file with ``[sections]``.

Recognized sections::

    [volume]      x, y, z (min, max pairs), voxel_size
    [run]         horizon, frames_in, frames_out, forecaster, supervision,
                  pose_source, confidence_threshold, per_class, workers
    [fit]         variant, iterations, step_size, init_logit, escape
    [scene]       ground_z
    [box NAME]    min, max, velocity, label        (any number)
    [lidar]       preset | azimuth_count + elevation_deg, max_range
    [trajectory NAME]  start, velocity, yaw_deg, n_frames, present_index,
                       frequency, noise_sigma   (any number; one clip each)
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .clip import DEFAULT_FREQUENCY_HZ
from .forecasters import FORECASTERS, FitConfig, Supervision
from .geometry import ClassLabel, VolumeBounds
from .grid import DEFAULT_VOXEL_SIZE
from .simulator import Box, LidarModel, Scene, lidar_preset


class ConfigError(ValueError):
    pass


HORIZON_FRAMES = {"1s": (2, 2), "3s": (6, 6)}
POSE_SOURCES = ("ground_truth", "constant_velocity")
_POSE_ALIASES = {"gt": "ground_truth", "cv": "constant_velocity"}
_SUPERVISION_ALIASES = {"past": "past_rays", "future": "future_rays"}


@dataclass
class RunConfig:
    bounds: VolumeBounds = field(default_factory=lambda: VolumeBounds((-70.0, -70.0, -4.5), (70.0, 70.0, 4.5)))
    voxel_size: float = DEFAULT_VOXEL_SIZE
    horizon: str = "1s"
    frames_in: Optional[int] = None
    frames_out: Optional[int] = None
    forecaster: str = "raytrace"
    fit: FitConfig = field(default_factory=FitConfig)
    supervision: Supervision = Supervision.PAST_RAYS
    confidence_threshold: Optional[float] = 0.05
    pose_source: str = "ground_truth"
    per_class: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.horizon not in HORIZON_FRAMES:
            raise ConfigError(f"horizon must be one of {sorted(HORIZON_FRAMES)}")
        fin, fout = HORIZON_FRAMES[self.horizon]
        self.frames_in = fin if self.frames_in is None else int(self.frames_in)
        self.frames_out = fout if self.frames_out is None else int(self.frames_out)
        if self.frames_in < 1 or self.frames_out < 1:
            raise ConfigError("frames_in and frames_out must be >= 1")
        if self.forecaster not in FORECASTERS:
            raise ConfigError(f"forecaster must be one of {FORECASTERS}")
        self.pose_source = _POSE_ALIASES.get(self.pose_source, self.pose_source)
        if self.pose_source not in POSE_SOURCES:
            raise ConfigError(f"pose_source must be one of {POSE_SOURCES}")
        self.supervision = Supervision(_SUPERVISION_ALIASES.get(self.supervision, self.supervision))
        if not self.voxel_size > 0:
            raise ConfigError("voxel_size must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


@dataclass
class TrajectorySpec:
    name: str
    start: np.ndarray
    velocity: np.ndarray
    yaw: float
    n_frames: int
    present_index: int
    frequency: float = DEFAULT_FREQUENCY_HZ
    noise_sigma: float = 0.0


@dataclass
class SimulationConfig:
    scene: Scene
    lidar: LidarModel
    trajectories: list


def _floats(text: str, n: Optional[int] = None) -> list[float]:
    vals = [float(v) for v in text.replace(" ", "").split(",") if v]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def read_config_file(path) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if not cfg.read(path):
            raise ConfigError(f"cannot read config {path}")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return cfg


def parse_run_config(cfg: configparser.ConfigParser) -> RunConfig:
    kw = {}
    try:
        if cfg.has_section("volume"):
            v = cfg["volume"]
            default = RunConfig().bounds
            lo, hi = list(default.min_corner), list(default.max_corner)
            for a, key in enumerate("xyz"):
                if key in v:
                    lo[a], hi[a] = _floats(v[key], 2)
            kw["bounds"] = VolumeBounds(lo, hi)
            if "voxel_size" in v:
                kw["voxel_size"] = v.getfloat("voxel_size")
        if cfg.has_section("run"):
            r = cfg["run"]
            for key in ("horizon", "forecaster", "supervision", "pose_source"):
                if key in r:
                    kw[key] = r[key].strip()
            for key in ("frames_in", "frames_out", "workers"):
                if key in r:
                    kw[key] = r.getint(key)
            if "confidence_threshold" in r:
                txt = r["confidence_threshold"].strip().lower()
                kw["confidence_threshold"] = None if txt in ("none", "off", "") else float(txt)
            if "per_class" in r:
                kw["per_class"] = r.getboolean("per_class")
        if cfg.has_section("fit"):
            f = cfg["fit"]
            fk = {}
            if "variant" in f:
                fk["variant"] = f["variant"].strip()
            if "iterations" in f:
                fk["iterations"] = f.getint("iterations")
            for key in ("step_size", "init_logit"):
                if key in f:
                    fk[key] = f.getfloat(key)
            if "escape" in f:
                fk["escape"] = f["escape"].strip()
            kw["fit"] = FitConfig(**fk)
        return RunConfig(**kw)
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None


def parse_simulation(cfg: configparser.ConfigParser, run: RunConfig = None) -> SimulationConfig:
    run = run or parse_run_config(cfg)
    try:
        ground = cfg.get("scene", "ground_z", fallback="0.0").strip()
        ground_z = None if ground.lower() == "none" else float(ground)
        boxes = []
        for sec in cfg.sections():
            if sec.split()[0] != "box":
                continue
            b = cfg[sec]
            boxes.append(
                Box(
                    _floats(b["min"], 3),
                    _floats(b["max"], 3),
                    _floats(b.get("velocity", "0,0,0"), 3),
                    ClassLabel.parse(b.get("label", "vehicle")),
                )
            )
        scene = Scene(ground_z, boxes)

        lid = cfg["lidar"] if cfg.has_section("lidar") else {}
        if "preset" in lid:
            az = int(lid["azimuth_count"]) if "azimuth_count" in lid else None
            lidar = lidar_preset(lid["preset"].strip(), az)
            if "max_range" in lid:
                lidar = LidarModel(lidar.azimuth_count, lidar.elevation_angles, float(lid["max_range"]))
        elif "elevation_deg" in lid:
            lidar = LidarModel(
                int(lid.get("azimuth_count", "360")),
                tuple(math.radians(e) for e in _floats(lid["elevation_deg"])),
                float(lid.get("max_range", "100")),
            )
        else:
            lidar = lidar_preset("hdl32")

        trajectories = []
        n_default = run.frames_in + run.frames_out
        for sec in cfg.sections():
            parts = sec.split()
            if parts[0] != "trajectory":
                continue
            t = cfg[sec]
            n_frames = t.getint("n_frames", fallback=n_default)
            trajectories.append(
                TrajectorySpec(
                    name=parts[1] if len(parts) > 1 else f"clip{len(trajectories):03d}",
                    start=np.array(_floats(t.get("start", "0,0,0"), 3)),
                    velocity=np.array(_floats(t.get("velocity", "0,0,0"), 3)),
                    yaw=math.radians(t.getfloat("yaw_deg", fallback=0.0)),
                    n_frames=n_frames,
                    present_index=t.getint("present_index", fallback=run.frames_in - 1),
                    frequency=t.getfloat("frequency", fallback=DEFAULT_FREQUENCY_HZ),
                    noise_sigma=t.getfloat("noise_sigma", fallback=0.0),
                )
            )
        if not trajectories:
            trajectories.append(TrajectorySpec("clip000", np.zeros(3), np.zeros(3), 0.0, n_default, run.frames_in - 1))
        return SimulationConfig(scene, lidar, trajectories)
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None


def load_run_config(path) -> RunConfig:
    return parse_run_config(read_config_file(path))
