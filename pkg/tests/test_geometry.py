import numpy as np
import pytest

from voxdet.geometry import (
    CameraCalibration,
    EgoPose,
    VoxelGridSpec,
    align_to_initial,
    metric_to_grid_coords,
    point_to_voxel,
    project,
    voxel_center,
    voxel_centers,
)


def make_calib(fx=1.0, fy=1.0, cx=0.0, cy=0.0, extrinsic=None):
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraCalibration(intrinsics=k, extrinsic=np.eye(4) if extrinsic is None else extrinsic)


PAPER_SPEC = VoxelGridSpec((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), (128, 128, 10), 8)


class TestProject:
    def test_optical_axis(self):
        assert project((0.0, 0.0, 5.0), make_calib()) == (0.0, 0.0, 5.0)

    def test_pinhole_example(self):
        u, v, d = project((1.0, 2.0, 4.0), make_calib(fx=100, fy=100, cx=50, cy=50))
        assert (u, v, d) == (75.0, 100.0, 4.0)

    def test_behind_camera(self):
        assert project((0.0, 0.0, -1.0), make_calib()) is None

    def test_near_plane(self):
        assert project((0.0, 0.0, 0.05), make_calib()) is None

    def test_scale_consistency(self):
        calib = make_calib(fx=30, fy=40, cx=5, cy=6)
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(0.5, 4.0, size=3)
            s = rng.uniform(0.5, 3.0)
            u1, v1, d1 = project(tuple(p), calib)
            u2, v2, d2 = project(tuple(s * p), calib)
            assert u2 == pytest.approx(u1, abs=1e-9)
            assert v2 == pytest.approx(v1, abs=1e-9)
            assert d2 == pytest.approx(s * d1, rel=1e-12)


class TestAlign:
    def test_identity_relative_pose(self):
        calib = make_calib(extrinsic=_some_extrinsic())
        pose = EgoPose(np.eye(4), 0.0)
        out = align_to_initial(calib, pose, pose)
        np.testing.assert_allclose(out.extrinsic, calib.extrinsic, rtol=0, atol=1e-12)

    def test_translation_composes(self):
        calib = make_calib()
        shifted = np.eye(4)
        shifted[0, 3] = 1.0
        out = align_to_initial(calib, EgoPose(shifted, -0.5), EgoPose(np.eye(4), 0.0))
        expected = np.eye(4)
        expected[0, 3] = 1.0
        np.testing.assert_allclose(out.extrinsic, expected, rtol=0, atol=1e-12)

    def test_idempotent_in_shared_frame(self):
        calib = make_calib(extrinsic=_some_extrinsic())
        pose = EgoPose(_some_pose(), 0.0)
        once = align_to_initial(calib, pose, pose)
        np.testing.assert_allclose(once.extrinsic, calib.extrinsic, rtol=0, atol=1e-12)


def _some_extrinsic():
    ext = np.eye(4)
    c, s = np.cos(0.3), np.sin(0.3)
    ext[:3, :3] = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    ext[:3, 3] = (0.5, -1.0, 0.2)
    return ext


def _some_pose():
    m = np.eye(4)
    c, s = np.cos(-0.7), np.sin(-0.7)
    m[:3, :3] = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    m[:3, 3] = (3.0, 2.0, 0.0)
    return m


class TestVoxelIndexing:
    def test_first_center(self):
        spec = VoxelGridSpec((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), (128, 128, 10), 4)
        assert voxel_center(spec, (0, 0, 0))[0] == pytest.approx(-50.8, abs=1e-12)

    def test_last_center(self):
        spec = VoxelGridSpec((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), (128, 128, 10), 4)
        assert voxel_center(spec, (127, 0, 0))[0] == pytest.approx(50.8, abs=1e-12)

    def test_single_cell_midpoint(self):
        spec = VoxelGridSpec((-51.2, 51.2), (-1.0, 1.0), (0.0, 2.0), (1, 1, 1), 4)
        assert voxel_center(spec, (0, 0, 0)) == (0.0, 0.0, 1.0)

    def test_out_of_range_index(self):
        with pytest.raises(ValueError):
            voxel_center(PAPER_SPEC, (128, 0, 0))

    def test_point_to_voxel_paper_example(self):
        spec = VoxelGridSpec((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), (1024, 1024, 80), 4)
        assert point_to_voxel(spec, (0.05, 0.05, -4.95)) == (512, 512, 0)

    def test_lower_boundary_inclusive(self):
        assert point_to_voxel(PAPER_SPEC, (-51.2, 0.0, 0.0))[0] == 0

    def test_upper_boundary_exclusive(self):
        assert point_to_voxel(PAPER_SPEC, (51.2, 0.0, 0.0)) is None

    def test_round_trip(self):
        spec = VoxelGridSpec((-51.2, 51.2), (-40.0, 40.0), (-5.0, 3.0), (64, 50, 16), 4)
        rng = np.random.default_rng(1)
        for _ in range(200):
            idx = tuple(int(rng.integers(n)) for n in spec.counts)
            assert point_to_voxel(spec, voxel_center(spec, idx)) == idx

    def test_centers_array_matches_scalar(self):
        spec = VoxelGridSpec((-4.0, 4.0), (-2.0, 6.0), (-1.0, 1.0), (4, 5, 2), 3)
        grid = voxel_centers(spec)
        assert grid.shape == (4, 5, 2, 3)
        for idx in [(0, 0, 0), (3, 4, 1), (2, 1, 0)]:
            np.testing.assert_array_equal(grid[idx], voxel_center(spec, idx))

    def test_metric_to_grid_round_trip(self):
        spec = VoxelGridSpec((-4.0, 4.0), (-2.0, 6.0), (-1.0, 1.0), (4, 5, 2), 3)
        coords = metric_to_grid_coords(spec, voxel_centers(spec))
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in spec.counts], indexing="ij"), -1)
        np.testing.assert_allclose(coords, idx, rtol=0, atol=1e-9)


class TestValidation:
    def test_negative_focal(self):
        with pytest.raises(ValueError):
            make_calib(fx=-1.0)

    def test_non_orthonormal_extrinsic(self):
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(ValueError):
            make_calib(extrinsic=bad)

    def test_mirrored_extrinsic_allowed(self):
        mirrored = np.diag([-1.0, 1.0, 1.0, 1.0])
        make_calib(extrinsic=mirrored)  # scene flips fold a mirror into the rig

    def test_mirrored_pose_rejected(self):
        with pytest.raises(ValueError):
            EgoPose(np.diag([-1.0, 1.0, 1.0, 1.0]))

    def test_degenerate_range(self):
        with pytest.raises(ValueError):
            VoxelGridSpec((1.0, 1.0), (0.0, 1.0), (0.0, 1.0), (1, 1, 1), 1)
