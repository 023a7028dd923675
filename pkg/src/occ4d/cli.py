"""Command-line entry point: ``occ4d <subcommand> ...``.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import query_poses, run_benchmark, trim_clip
from .config import (
    ConfigError,
    RunConfig,
    parse_run_config,
    parse_simulation,
    read_config_file,
)
from .forecasters import FORECASTERS, ForecastError, Supervision, run_forecaster
from .geometry import RayBatch, RigidPose
from .grid import load_grid, save_grid
from .io import load_clip, read_frame, save_clip, write_frame
from .metrics import MetricError, PointCloudPrediction, evaluate_forecast
from .renderer import render_depth_image, render_rays, write_depth_pgm
from .simulator import generate_clip, lidar_preset, linear_trajectory

logger = logging.getLogger("occ4d")

SUPERVISION_HELP = (
    "past: fit on history only (honest forecasting). future: fit on the very future rays that are "
    "evaluated; an ORACLE upper bound for testing, not a forecast"
)


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = parse_run_config(read_config_file(args.config))
    else:
        cfg = RunConfig()
    return cfg.with_overrides(
        forecaster=getattr(args, "forecaster", None),
        supervision=getattr(args, "supervision", None),
        pose_source=getattr(args, "pose_source", None),
        workers=getattr(args, "workers", None),
    )


def _parse_camera(text: str) -> RigidPose:
    vals = [float(v) for v in text.split(",")]
    if len(vals) not in (3, 4):
        raise ConfigError(f"camera must be x,y,z[,yaw_deg], got {text!r}")
    yaw = math.radians(vals[3]) if len(vals) == 4 else 0.0
    return RigidPose.from_yaw(yaw, vals[:3])


def cmd_simulate(args) -> int:
    if args.config is None:
        with resources.as_file(resources.files("occ4d.data").joinpath("example_scene.ini")) as path:
            cfg = read_config_file(path)
    else:
        cfg = read_config_file(args.config)
    run = parse_run_config(cfg)
    sim = parse_simulation(cfg, run)
    out = Path(args.out)
    for k, traj in enumerate(sim.trajectories):
        poses, ts = linear_trajectory(traj.n_frames, traj.frequency, traj.start, traj.velocity, traj.yaw)
        clip = generate_clip(sim.scene, poses, ts, sim.lidar, traj.present_index, traj.frequency,
                             traj.noise_sigma, seed=args.seed + k)
        manifest = save_clip(clip, out / traj.name)
        print(manifest)
    return 0


def _clip_for_forecast(args, config: RunConfig, path):
    clip = trim_clip(load_clip(path), config.frames_in, config.frames_out).recentered()
    source = clip if config.supervision is Supervision.FUTURE_RAYS else clip.history()
    return clip, source


def cmd_forecast(args, default_forecaster: str = None) -> int:
    config = _load_config(args)
    if default_forecaster and not args.forecaster:
        config = config.with_overrides(forecaster=default_forecaster)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, path in enumerate(args.clips):
        clip, source = _clip_for_forecast(args, config, path)
        n_future = max(len(clip.future_frames), config.frames_out)
        grid, trace = run_forecaster(config.forecaster, source, config.bounds, config.voxel_size, n_future,
                                     config.fit, config.supervision)
        stem = f"{k:03d}_{Path(path).parent.name if Path(path).suffix else Path(path).name}"
        save_grid(grid, out / f"{stem}.occ4")
        print(out / f"{stem}.occ4")
        if trace is not None:
            with open(out / f"{stem}_loss.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["iteration", "loss"])
                for i, loss in enumerate(trace):
                    w.writerow([i, f"{loss:.9g}"])
    return 0


def cmd_fit_grid(args) -> int:
    if args.forecaster and args.forecaster == "raytrace":
        raise ConfigError("fit-grid needs a fit-* forecaster")
    return cmd_forecast(args, default_forecaster="fit-static")


def _load_prediction(pred_dir: Path, n: int) -> PointCloudPrediction:
    pts, conf = [], []
    for t in range(n):
        pts.append(read_frame(pred_dir / f"pred_{t:04d}.pcf"))
        c = pred_dir / f"pred_{t:04d}.conf"
        conf.append(np.fromfile(c, dtype="<f4").astype(np.float64) if c.exists() else None)
    if all(c is None for c in conf):
        conf = None
    elif any(c is None for c in conf):
        raise MetricError("confidences must be given for every timestep or none")
    return PointCloudPrediction(pts, conf)


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    if args.grid is None and args.pred_dir is None:
        res = run_benchmark(config, args.clips, out, workers=args.workers)
        if res.aggregate is None:
            logger.error("all clips failed")
            return 1
        print(res.aggregate.to_json(), end="")
        return 0
    if len(args.clips) != 1:
        raise ConfigError("evaluating a stored prediction takes exactly one clip")
    out.mkdir(parents=True, exist_ok=True)
    clip = trim_clip(load_clip(args.clips[0]), config.frames_in, config.frames_out).recentered()
    rays = clip.future_rays(query_poses(clip, config.pose_source))
    if args.grid is not None:
        pred = load_grid(args.grid)
    else:
        pred = _load_prediction(Path(args.pred_dir), len(clip.future_frames))
    report = evaluate_forecast(pred, rays, config.bounds, per_class=config.per_class,
                               confidence_threshold=config.confidence_threshold)
    (out / "report.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return 0


def cmd_render_depth(args) -> int:
    grid = load_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cameras = args.camera or ["0,0,0,0"]
    fov = math.radians(args.fov_deg)
    for k, cam in enumerate(cameras):
        depth = render_depth_image(grid, args.timestep, _parse_camera(cam), args.width, args.height, fov)
        write_depth_pgm(depth, out / f"depth_t{args.timestep}_{k:03d}.pgm")
        print(out / f"depth_t{args.timestep}_{k:03d}.pgm")
    if args.lidar:
        lidar = lidar_preset(args.lidar, args.azimuth_count)
        pose = _parse_camera(args.lidar_pose)
        dirs = pose.rotate(lidar.directions())
        rays = RayBatch(np.broadcast_to(pose.translation, dirs.shape), dirs, timestep=np.full(len(dirs), args.timestep))
        depth = render_rays(grid, rays, mode="boundary")
        ok = ~np.isnan(depth)
        pts = rays.origins[ok] + depth[ok, None] * rays.directions[ok]
        write_frame(out / f"resampled_{args.lidar}_t{args.timestep}.pcf", pts)
        print(out / f"resampled_{args.lidar}_t{args.timestep}.pcf")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occ4d", description="4D occupancy forecasting benchmark tools")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, clips=True):
        sp.add_argument("--config", type=Path, help="run config file")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        if clips:
            sp.add_argument("--clips", nargs="+", required=True, metavar="MANIFEST")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="generate synthetic clips from a scene config")
    s.add_argument("--config", type=Path, help="scene config (default: the bundled example scene)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    for name, func, choices in (
        ("fit-grid", cmd_fit_grid, ("fit-static", "fit-dynamic")),
        ("forecast", cmd_forecast, FORECASTERS),
    ):
        sp = sub.add_parser(name, help=f"{name} for each clip; writes OCC4 grids")
        common(sp)
        sp.add_argument("--forecaster", choices=choices)
        sp.add_argument("--supervision", choices=("past", "future"), help=SUPERVISION_HELP)
        sp.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="score a stored prediction, or run the full benchmark")
    common(e)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--grid", type=Path, help="OCC4 grid to evaluate")
    src.add_argument("--pred-dir", type=Path, help="directory of pred_NNNN.pcf (+ .conf) clouds")
    e.add_argument("--forecaster", choices=FORECASTERS)
    e.add_argument("--supervision", choices=("past", "future"), help=SUPERVISION_HELP)
    e.add_argument("--pose-source", choices=("gt", "cv"))
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render-depth", help="render PGM depth maps (and optional LiDAR resampling)")
    r.add_argument("--grid", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--timestep", type=int, default=0)
    r.add_argument("--camera", action="append", help="x,y,z[,yaw_deg]; repeatable")
    r.add_argument("--width", type=int, default=256)
    r.add_argument("--height", type=int, default=64)
    r.add_argument("--fov-deg", type=float, default=90.0)
    r.add_argument("--lidar", help="beam preset to resample into a point cloud (hdl32, hdl64, stacked2x32)")
    r.add_argument("--azimuth-count", type=int)
    r.add_argument("--lidar-pose", default="0,0,0,0")
    r.set_defaults(func=cmd_render_depth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "supervision", None) == "future":
        logger.warning("supervision=future fits the evaluation rays themselves: oracle bound, not a forecast")
    try:
        return args.func(args)
    except (ConfigError, ForecastError, MetricError, ValueError, OSError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1


def cli_dispatch(argv) -> int:
    """Run a subcommand; argparse usage errors exit with status 2."""
    try:
        return main(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2


if __name__ == "__main__":
    sys.exit(main())
