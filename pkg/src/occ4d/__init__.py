"""4D occupancy forecasting: differentiable depth rendering, ray-based metrics and a LiDAR simulator."""

__version__ = "0.1.0"

from .geometry import ClassLabel, Ray, RayBatch, RigidPose, VolumeBounds, ray_volume_intersection, spherical_project, transform_points
from .grid import OccupancyGrid4D, load_grid, rasterize_points, save_grid, traverse, world_to_voxel
from .renderer import (
    RaySample,
    RenderResult,
    expected_depth_infer,
    expected_depth_train,
    grad_expected_depth,
    l1_depth_loss,
    render_depth_image,
    stop_probabilities,
)
from .metrics import MetricReport, chamfer, chamfer_nearfield, clamp_ray, evaluate_forecast, fit_range_surface, nearfield_errors
from .clip import Frame, SequenceClip
from .forecasters import FitConfig, constant_velocity_poses, fit_grid, raytracing_baseline
from .simulator import Box, LidarModel, Scene, cast_ray_exact, generate_clip, ground_truth_occupancy, lidar_preset, scan

__all__ = [
    "ClassLabel",
    "Ray",
    "RayBatch",
    "RigidPose",
    "VolumeBounds",
    "ray_volume_intersection",
    "spherical_project",
    "transform_points",
    "OccupancyGrid4D",
    "load_grid",
    "rasterize_points",
    "save_grid",
    "traverse",
    "world_to_voxel",
    "RaySample",
    "RenderResult",
    "expected_depth_infer",
    "expected_depth_train",
    "grad_expected_depth",
    "l1_depth_loss",
    "render_depth_image",
    "stop_probabilities",
    "MetricReport",
    "chamfer",
    "chamfer_nearfield",
    "clamp_ray",
    "evaluate_forecast",
    "fit_range_surface",
    "nearfield_errors",
    "Frame",
    "SequenceClip",
    "FitConfig",
    "constant_velocity_poses",
    "fit_grid",
    "raytracing_baseline",
    "Box",
    "LidarModel",
    "Scene",
    "cast_ray_exact",
    "generate_clip",
    "ground_truth_occupancy",
    "lidar_preset",
    "scan",
]
