import math
import struct

import numpy as np
import pytest

from occ4d.geometry import VolumeBounds, ray_volume_intersection
from occ4d.grid import (
    GridFormatError,
    OccupancyGrid4D,
    grid_dims,
    load_grid,
    rasterize_points,
    save_grid,
    trace_rays,
    traverse,
    world_to_voxel,
)

from oracles import compare_with_dense, random_traversal_case


def steps_as_tuples(steps):
    return [(s.voxel_index, s.entry_distance, s.exit_distance) for s in steps]


class TestGridConstruction:
    def test_dims_absorb_float_error(self):
        assert grid_dims(VolumeBounds((-70, -70, -4.5), (70, 70, 4.5)), 0.5) == (280, 280, 18)

    def test_partial_voxel_extends_bounds(self):
        g = OccupancyGrid4D.empty(VolumeBounds((0, 0, 0), (1.2, 1, 1)), 0.5)
        assert g.dims == (3, 2, 2)
        assert np.allclose(g.bounds.max_corner, (1.5, 1.0, 1.0))

    def test_values_must_be_probabilities(self, unit_bounds):
        with pytest.raises(ValueError):
            OccupancyGrid4D(unit_bounds, 1.0, np.full((1, 2, 2, 2), 1.5))

    def test_replicate(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0, 1, fill=0.3).replicate(4)
        assert g.n_timesteps == 4 and np.all(g.values == 0.3)


class TestWorldToVoxel:
    def test_interior(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0)
        assert world_to_voxel(g, (0.5, 0.5, 0.5)) == (0, 0, 0)

    def test_max_face_maps_to_last_voxel(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0)
        assert world_to_voxel(g, (2.0, 2.0, 2.0)) == (1, 1, 1)

    def test_outside(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0)
        assert world_to_voxel(g, (2.1, 0, 0)) is None
        assert world_to_voxel(g, (-1e-9, 1, 1)) is None


class TestRasterize:
    def test_empty(self, unit_bounds):
        assert rasterize_points(np.zeros((0, 3)), unit_bounds, 1.0).values.sum() == 0

    def test_single_point(self, unit_bounds):
        g = rasterize_points([[1.5, 0.5, 0.5]], unit_bounds, 1.0)
        assert g.values.sum() == 1 and g.values[0, 1, 0, 0] == 1

    def test_idempotent_within_voxel(self, unit_bounds):
        g = rasterize_points([[1.5, 0.5, 0.5], [1.2, 0.1, 0.9]], unit_bounds, 1.0)
        assert g.values.sum() == 1

    def test_points_outside_ignored(self, unit_bounds):
        assert rasterize_points([[5, 5, 5]], unit_bounds, 1.0).values.sum() == 0


class TestTraverse:
    def test_axis_ray_from_outside(self):
        g = OccupancyGrid4D.empty(VolumeBounds((0, 0, 0), (2, 1, 1)), 1.0)
        assert steps_as_tuples(traverse(g, (-1, 0.5, 0.5), (1, 0, 0))) == [((0, 0, 0), 1.0, 2.0), ((1, 0, 0), 2.0, 3.0)]

    def test_origin_inside(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0)
        assert steps_as_tuples(traverse(g, (0.5, 0.5, 0.5), (1, 0, 0))) == [((0, 0, 0), 0.0, 0.5), ((1, 0, 0), 0.5, 1.5)]

    def test_miss(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0)
        assert traverse(g, (-1, 5, 0.5), (1, 0, 0)) == []

    def test_through_corner_has_no_zero_length_step(self, unit_bounds):
        g = OccupancyGrid4D.empty(unit_bounds, 1.0)
        d = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
        steps = traverse(g, (0.5, 0.5, 0.5), d)
        assert [s.voxel_index for s in steps] == [(0, 0, 0), (1, 1, 0)]
        assert all(s.exit_distance > s.entry_distance for s in steps)

    def test_invariants_on_random_rays(self, rng):
        for _ in range(500):
            lo, vs, dims, o, d = random_traversal_case(rng)
            g = OccupancyGrid4D.empty(VolumeBounds(lo, lo + np.array(dims) * vs), vs)
            steps = traverse(g, o, d)
            hit = ray_volume_intersection(o, d, g.bounds)
            if hit is None or hit[1] - hit[0] == 0:
                assert len(steps) <= 1
                continue
            assert steps[0].entry_distance == pytest.approx(hit[0], abs=1e-12)
            assert steps[-1].exit_distance == pytest.approx(hit[1], abs=1e-12)
            for a, b in zip(steps, steps[1:]):
                assert abs(a.exit_distance - b.entry_distance) <= 1e-9
                # face-adjacent or diagonal neighbours only
                assert max(abs(i - j) for i, j in zip(a.voxel_index, b.voxel_index)) == 1
            assert all(s.entry_distance < s.exit_distance for s in steps)
            total = math.fsum(s.exit_distance - s.entry_distance for s in steps)
            assert total == pytest.approx(hit[1] - hit[0], rel=1e-6)

    def test_dense_sampling_oracle(self, rng):
        for _ in range(300):
            lo, vs, dims, o, d = random_traversal_case(rng)
            g = OccupancyGrid4D.empty(VolumeBounds(lo, lo + np.array(dims) * vs), vs)
            hit = ray_volume_intersection(o, d, g.bounds)
            if hit is None:
                continue
            err = compare_with_dense(traverse(g, o, d), o, d, lo, vs, dims, *hit)
            assert err is None, err

    def test_midpoints_lie_in_their_voxel(self, rng):
        for _ in range(300):
            lo, vs, dims, o, d = random_traversal_case(rng)
            g = OccupancyGrid4D.empty(VolumeBounds(lo, lo + np.array(dims) * vs), vs)
            for s in traverse(g, o, d):
                m = o + 0.5 * (s.entry_distance + s.exit_distance) * d
                vlo = lo + np.array(s.voxel_index) * vs
                assert np.all(m >= vlo - 1e-9) and np.all(m <= vlo + vs + 1e-9)

    def test_deterministic(self, rng):
        g = OccupancyGrid4D.empty(VolumeBounds((-5, -5, -2), (5, 5, 2)), 0.5)
        o = rng.uniform(-8, 8, size=(200, 3))
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        a, b = trace_rays(g, o, d), trace_rays(g, o, d)
        for f in ("offsets", "voxel", "entry", "exit"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()

    def test_batch_matches_single(self, rng):
        g = OccupancyGrid4D.empty(VolumeBounds((-5, -5, -2), (5, 5, 2)), 0.5)
        o = rng.uniform(-8, 8, size=(50, 3))
        d = rng.normal(size=(50, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        tr = trace_rays(g, o, d)
        for r in range(50):
            assert tr.steps(r, g.dims) == traverse(g, o[r], d[r])


class TestOcc4Format:
    def test_roundtrip(self, tmp_path, rng):
        g = OccupancyGrid4D(VolumeBounds((-1, -2, -0.5), (1, 2, 0.5)), 0.5, rng.random((3, 4, 8, 2)).astype(np.float32))
        save_grid(g, tmp_path / "g.occ4")
        h = load_grid(tmp_path / "g.occ4")
        assert h.dims == g.dims and h.n_timesteps == 3
        assert np.array_equal(h.values, g.values)
        assert np.array_equal(h.bounds.min_corner, g.bounds.min_corner)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.occ4").write_bytes(b"NOPE" + bytes(200))
        with pytest.raises(GridFormatError, match="magic"):
            load_grid(tmp_path / "x.occ4")

    def test_truncated_payload(self, tmp_path, unit_bounds):
        save_grid(OccupancyGrid4D.empty(unit_bounds, 1.0, 2), tmp_path / "g.occ4")
        data = (tmp_path / "g.occ4").read_bytes()
        (tmp_path / "g.occ4").write_bytes(data[:-4])
        with pytest.raises(GridFormatError, match="payload"):
            load_grid(tmp_path / "g.occ4")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "g.occ4").write_bytes(b"OCC4")
        with pytest.raises(GridFormatError, match="header"):
            load_grid(tmp_path / "g.occ4")

    def test_header_layout(self, tmp_path, unit_bounds):
        save_grid(OccupancyGrid4D.empty(unit_bounds, 1.0, 1), tmp_path / "g.occ4")
        data = (tmp_path / "g.occ4").read_bytes()
        magic, version = struct.unpack_from("<4sB", data)
        assert magic == b"OCC4" and version == 1
        assert len(data) == struct.calcsize("<4sB6dd3II") + 4 * 8
