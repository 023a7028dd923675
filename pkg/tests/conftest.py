import sys

import numpy as np
import pytest

from occ4d.geometry import ClassLabel, VolumeBounds
from occ4d.simulator import Box, LidarModel, Scene, generate_clip, lidar_preset, linear_trajectory

SENSOR_HEIGHT = 2.05


def static_scene():
    return Scene(
        0.0,
        [
            Box((6, -3, 0), (10, 2, 2.5)),
            Box((-8, 5, 0), (-5, 9, 1.8), label=ClassLabel.PEDESTRIAN),
        ],
    )


def small_lidar():
    return LidarModel(64, tuple(np.radians(np.linspace(-25, 5, 8))), 60.0)


def make_clip(scene, lidar, n_past=2, n_future=2, speed=1.0, frequency=2.0, seed=0):
    poses, ts = linear_trajectory(n_past + n_future, frequency, start=(0, 0, SENSOR_HEIGHT), velocity=(speed, 0, 0))
    return generate_clip(scene, poses, ts, lidar, present_index=n_past - 1, frequency=frequency, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_bounds():
    return VolumeBounds((0, 0, 0), (2, 2, 2))


@pytest.fixture(scope="session")
def small_clip():
    return make_clip(static_scene(), small_lidar()).recentered()


@pytest.fixture(scope="session")
def small_bounds():
    return VolumeBounds((-12, -12, -3), (12, 12, 3))


@pytest.fixture(scope="session")
def hdl32_clip():
    return make_clip(static_scene(), lidar_preset("hdl32", azimuth_count=360)).recentered()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
    passed = sum(line.startswith("PASS") for line in results.values())
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
