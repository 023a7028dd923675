import json

import numpy as np
import pytest

from occ4d.cli import cli_dispatch
from occ4d.config import ConfigError, RunConfig, load_run_config, parse_simulation, read_config_file
from occ4d.forecasters import Supervision
from occ4d.grid import OccupancyGrid4D, load_grid, save_grid
from occ4d.geometry import RigidPose, VolumeBounds, slab_intervals
from occ4d.io import load_clip, read_frame, save_clip
from occ4d.renderer import pinhole_rays, read_depth_pgm

from conftest import make_clip, small_lidar, static_scene

SMALL_RUN = """
[volume]
x = -12, 12
y = -12, 12
z = -3, 3
voxel_size = 0.5

[run]
horizon = 1s

[fit]
iterations = 200
step_size = 0.01
"""


@pytest.fixture
def clip_manifest(tmp_path):
    return save_clip(make_clip(static_scene(), small_lidar()), tmp_path / "clip")


@pytest.fixture
def run_ini(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(SMALL_RUN)
    return p


class TestRunConfig:
    def test_defaults(self):
        c = RunConfig()
        assert list(c.bounds.min_corner) == [-70, -70, -4.5] and c.voxel_size == 0.5
        assert (c.frames_in, c.frames_out) == (2, 2)
        assert c.confidence_threshold == 0.05 and c.pose_source == "ground_truth"

    def test_three_second_horizon(self):
        c = RunConfig(horizon="3s")
        assert (c.frames_in, c.frames_out) == (6, 6)

    def test_aliases(self):
        c = RunConfig(pose_source="cv", supervision="future")
        assert c.pose_source == "constant_velocity" and c.supervision is Supervision.FUTURE_RAYS

    @pytest.mark.parametrize("kw", [{"horizon": "5s"}, {"frames_in": 0}, {"forecaster": "x"}, {"pose_source": "imu"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)

    def test_file(self, run_ini):
        c = load_run_config(run_ini)
        assert list(c.bounds.max_corner) == [12, 12, 3] and c.fit.iterations == 200

    def test_bad_number(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[volume]\nx = -1, oops\n")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_bad_label(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[box a]\nmin = 0,0,0\nmax = 1,1,1\nlabel = bicycle\n")
        with pytest.raises(ConfigError):
            parse_simulation(read_config_file(p))


class TestSimulate:
    def test_bundled_example(self, tmp_path):
        assert cli_dispatch(["simulate", "--out", str(tmp_path / "sim")]) == 0
        for manifest in sorted((tmp_path / "sim").glob("*/manifest.ini")):
            clip = load_clip(manifest)
            names = [n for n in manifest.read_text().split("frames = ")[1].splitlines()[0].split(", ")]
            assert len(names) == len(clip.past_frames) + len(clip.future_frames) == 4
            assert all((manifest.parent / n).exists() for n in names)

    def test_custom_scene(self, tmp_path):
        cfg = tmp_path / "scene.ini"
        cfg.write_text(SMALL_RUN + "[lidar]\nazimuth_count = 32\nelevation_deg = -20, -10, -5\n"
                       "[trajectory a]\nn_frames = 3\npresent_index = 1\nstart = 0, 0, 2\n")
        assert cli_dispatch(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
        clip = load_clip(tmp_path / "s" / "a" / "manifest.ini")
        assert len(clip.past_frames) == 2 and len(clip.future_frames) == 1
        assert len(clip.past_frames[0].points) == 96

    def test_missing_config_file(self, tmp_path):
        assert cli_dispatch(["simulate", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 1


class TestForecastCommands:
    def test_forecast_raytrace(self, tmp_path, clip_manifest, run_ini):
        out = tmp_path / "fc"
        assert cli_dispatch(["forecast", "--config", str(run_ini), "--clips", str(clip_manifest),
                             "--forecaster", "raytrace", "--out", str(out)]) == 0
        g = load_grid(out / "000_clip.occ4")
        assert g.n_timesteps == 2 and set(np.unique(g.values)) <= {0.0, 1.0}

    def test_fit_grid_writes_loss_csv(self, tmp_path, clip_manifest, run_ini):
        out = tmp_path / "fit"
        assert cli_dispatch(["fit-grid", "--config", str(run_ini), "--clips", str(clip_manifest), "--out", str(out)]) == 0
        lines = (out / "000_clip_loss.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss" and len(lines) == 201

    def test_fit_grid_rejects_raytrace(self, tmp_path, clip_manifest):
        assert cli_dispatch(["fit-grid", "--clips", str(clip_manifest), "--forecaster", "raytrace",
                             "--out", str(tmp_path)]) == 2

    def test_unknown_flag(self, tmp_path, clip_manifest):
        assert cli_dispatch(["forecast", "--clips", str(clip_manifest), "--out", str(tmp_path), "--bogus"]) == 2

    def test_unknown_subcommand(self):
        assert cli_dispatch(["train"]) == 2

    def test_corrupt_clip_exits_one(self, tmp_path, clip_manifest, run_ini):
        f = clip_manifest.parent / "frame_0000.pcf"
        f.write_bytes(f.read_bytes()[:-3])
        assert cli_dispatch(["forecast", "--config", str(run_ini), "--clips", str(clip_manifest),
                             "--out", str(tmp_path / "x")]) == 1


class TestEvaluateCommand:
    def test_oracle_fit_beats_raytrace_on_dynamic_clip(self, tmp_path, run_ini):
        from occ4d.geometry import ClassLabel
        from occ4d.simulator import Box, Scene

        scene = Scene(0.0, [Box((4, -2, 0), (7, 1, 2), velocity=(2, 0, 0)),
                            Box((-6, 3, 0), (-3, 5, 1.5), velocity=(0, 2, 0), label=ClassLabel.VEHICLE)])
        manifest = save_clip(make_clip(scene, small_lidar()), tmp_path / "dyn")
        cfg = tmp_path / "run.ini"
        cfg.write_text(SMALL_RUN.replace("iterations = 200", "iterations = 1000"))
        assert cli_dispatch(["fit-grid", "--config", str(cfg), "--clips", str(manifest), "--forecaster", "fit-dynamic",
                             "--supervision", "future", "--out", str(tmp_path / "fit")]) == 0
        assert cli_dispatch(["forecast", "--config", str(cfg), "--clips", str(manifest), "--forecaster", "raytrace",
                             "--out", str(tmp_path / "rt")]) == 0
        scores = {}
        for name in ("fit", "rt"):
            assert cli_dispatch(["evaluate", "--config", str(cfg), "--clips", str(manifest),
                                 "--grid", str(tmp_path / name / "000_dyn.occ4"), "--out", str(tmp_path / f"ev_{name}")]) == 0
            scores[name] = json.loads((tmp_path / f"ev_{name}" / "report.json").read_text())["l1_m"]
        assert scores["fit"] < scores["rt"]

    def test_point_cloud_prediction(self, tmp_path, clip_manifest, run_ini):
        from occ4d.io import write_frame

        clip = load_clip(clip_manifest).recentered()
        pred = tmp_path / "pred"
        pred.mkdir()
        for t, f in enumerate(clip.future_frames):
            write_frame(pred / f"pred_{t:04d}.pcf", f.world_points())
        assert cli_dispatch(["evaluate", "--config", str(run_ini), "--clips", str(clip_manifest),
                             "--pred-dir", str(pred), "--out", str(tmp_path / "ev")]) == 0
        rep = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert rep["chamfer_vanilla_m2"] < 1e-9

    def test_benchmark_mode(self, tmp_path, clip_manifest, run_ini):
        assert cli_dispatch(["evaluate", "--config", str(run_ini), "--clips", str(clip_manifest),
                             "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "aggregate.json").exists() and (tmp_path / "b" / "aggregate.csv").exists()

    def test_all_clips_fail(self, tmp_path, run_ini):
        assert cli_dispatch(["evaluate", "--config", str(run_ini), "--clips", str(tmp_path / "missing.ini"),
                             "--out", str(tmp_path / "b")]) == 1


class TestRenderDepth:
    def test_empty_grid(self, tmp_path):
        g = OccupancyGrid4D.empty(VolumeBounds((-5, -5, -5), (5, 5, 5)), 0.5, 2)
        save_grid(g, tmp_path / "g.occ4")
        assert cli_dispatch(["render-depth", "--grid", str(tmp_path / "g.occ4"), "--out", str(tmp_path / "d"),
                             "--width", "16", "--height", "8", "--camera", "0,0,0,0", "--camera", "1,1,0,90"]) == 0
        for k, cam in enumerate([RigidPose.identity(), RigidPose.from_yaw(np.pi / 2, (1, 1, 0))]):
            p = tmp_path / "d" / f"depth_t0_{k:03d}.pgm"
            assert p.read_bytes().startswith(b"P5\n16 8\n65535\n")
            o, d = pinhole_rays(cam, 16, 8, np.radians(90))
            _, t_far, _ = slab_intervals(o.reshape(-1, 3), d.reshape(-1, 3), g.bounds.min_corner, g.bounds.max_corner)
            assert np.allclose(read_depth_pgm(p), t_far.reshape(8, 16), atol=1 / 512)

    def test_lidar_resampling(self, tmp_path):
        g = OccupancyGrid4D.empty(VolumeBounds((-10, -10, -3), (10, 10, 3)), 0.5)
        g.values[0, :, :, :2] = 1.0  # ground slab below z = -2
        save_grid(g, tmp_path / "g.occ4")
        assert cli_dispatch(["render-depth", "--grid", str(tmp_path / "g.occ4"), "--out", str(tmp_path / "d"),
                             "--width", "4", "--height", "4", "--lidar", "hdl32", "--azimuth-count", "90"]) == 0
        pts = read_frame(tmp_path / "d" / "resampled_hdl32_t0.pcf")
        assert len(pts) == 32 * 90
        down = pts[pts[:, 2] < -0.5]
        assert np.allclose(down[:, 2][np.linalg.norm(down[:, :2], axis=1) < 9], -2.0, atol=1e-5)

    def test_bad_timestep(self, tmp_path):
        save_grid(OccupancyGrid4D.empty(VolumeBounds((0, 0, 0), (1, 1, 1)), 0.5), tmp_path / "g.occ4")
        assert cli_dispatch(["render-depth", "--grid", str(tmp_path / "g.occ4"), "--out", str(tmp_path / "d"),
                             "--timestep", "3"]) == 1
