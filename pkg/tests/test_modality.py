import math

import numpy as np
import pytest

from voxdet import numerics as nm
from voxdet.geometry import CameraCalibration, VoxelGridSpec, voxel_center
from voxdet.modality import (
    DepthHeadParams,
    DepthSpec,
    EncoderParams,
    MultiScaleHeadParams,
    SweepFusionParams,
    VoxelGrid,
    fuse_sweeps_image,
    lift_image_to_voxels,
    multi_scale_heads,
    predict_depth_distribution,
    voxel_encoder,
    voxelize_points,
)
from voxdet.numerics import Parameter, Tensor
from voxdet.scene.types import PointCloud

from helpers import lift_oracle, side_camera


class TestDepthDistribution:
    def _params(self, c, d, weight=None, bias=None):
        w = np.zeros((1, 1, 1, c, d)) if weight is None else weight
        b = np.zeros(d) if bias is None else bias
        return DepthHeadParams(weight=Parameter("w", w), bias=Parameter("b", b))

    def test_zero_params_uniform(self):
        feats = Tensor(np.random.default_rng(0).standard_normal((5, 6, 3)))
        dist = predict_depth_distribution(feats, self._params(3, 8), DepthSpec(8, 8.0))
        assert dist.data.shape == (8, 5, 6)
        np.testing.assert_allclose(dist.data, 1.0 / 8.0, rtol=0, atol=1e-15)

    def test_columns_normalized(self):
        rng = np.random.default_rng(1)
        feats = Tensor(rng.standard_normal((4, 4, 3)))
        params = self._params(3, 16, weight=rng.standard_normal((1, 1, 1, 3, 16)))
        dist = predict_depth_distribution(feats, params, DepthSpec(16, 32.0))
        np.testing.assert_allclose(dist.data.sum(axis=0), 1.0, rtol=0, atol=1e-12)

    def test_dominant_bias_one_hot(self):
        feats = Tensor(np.random.default_rng(2).standard_normal((3, 3, 2)))
        bias = np.zeros(10)
        bias[7] = 50.0
        dist = predict_depth_distribution(feats, self._params(2, 10, bias=bias),
                                          DepthSpec(10, 20.0))
        assert dist.data[7].min() > 1.0 - 1e-15


class TestLift:
    def test_matches_oracle_two_cameras(self):
        rng = np.random.default_rng(3)
        spec = VoxelGridSpec((-6.0, 6.0), (-6.0, 6.0), (-2.0, 2.0), (16, 16, 8), 3)
        depth = DepthSpec(bins=16, depth_limit=16.0)
        cams = [side_camera(), side_camera(yaw=math.pi)]
        total = None
        oracle_total = np.zeros(spec.counts + (3,))
        for calib in cams:
            feats = rng.standard_normal((16, 16, 3))
            dist = rng.dirichlet(np.ones(16), size=(16, 16)).transpose(2, 0, 1)
            dist = np.ascontiguousarray(dist)
            lifted = lift_image_to_voxels(Tensor(feats), Tensor(dist), calib, spec, depth)
            total = lifted if total is None else nm.add(total, lifted)
            oracle_total += lift_oracle(feats, dist, calib, spec, depth)
        assert np.abs(total.data).max() > 0
        np.testing.assert_allclose(total.data, oracle_total, rtol=0, atol=1e-12)

    def test_out_of_view_zero(self):
        spec = VoxelGridSpec((-6.0, -2.0), (-6.0, -2.0), (-1.0, 1.0), (4, 4, 2), 2)
        depth = DepthSpec(bins=8, depth_limit=16.0)
        calib = side_camera()  # looks along +x; the grid sits behind it
        feats = Tensor(np.ones((16, 16, 2)))
        dist = Tensor(np.full((8, 16, 16), 1.0 / 8.0))
        out = lift_image_to_voxels(feats, dist, calib, spec, depth)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_linearity_in_features(self):
        rng = np.random.default_rng(4)
        spec = VoxelGridSpec((1.0, 7.0), (-3.0, 3.0), (-1.0, 1.0), (6, 6, 4), 2)
        depth = DepthSpec(bins=8, depth_limit=12.0)
        calib = side_camera()
        f1 = rng.standard_normal((16, 16, 2))
        f2 = rng.standard_normal((16, 16, 2))
        dist = Tensor(np.ascontiguousarray(
            rng.dirichlet(np.ones(8), size=(16, 16)).transpose(2, 0, 1)))
        a, b = 2.0, -0.7
        lhs = lift_image_to_voxels(Tensor(a * f1 + b * f2), dist, calib, spec, depth).data
        rhs = (
            a * lift_image_to_voxels(Tensor(f1), dist, calib, spec, depth).data
            + b * lift_image_to_voxels(Tensor(f2), dist, calib, spec, depth).data
        )
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)

    def test_occupancy_bounded_by_one(self):
        # with unit features, each voxel value is its occupancy weight
        rng = np.random.default_rng(5)
        spec = VoxelGridSpec((1.0, 9.0), (-4.0, 4.0), (-1.0, 1.0), (8, 8, 4), 1)
        depth = DepthSpec(bins=8, depth_limit=12.0)
        dist = Tensor(np.ascontiguousarray(
            rng.dirichlet(np.ones(8), size=(16, 16)).transpose(2, 0, 1)))
        out = lift_image_to_voxels(Tensor(np.ones((16, 16, 1))), dist,
                                   side_camera(), spec, depth)
        assert out.data.max() <= 1.0 + 1e-12

    def test_nearest_depth_mode(self):
        spec = VoxelGridSpec((-0.5, 0.5), (-0.5, 0.5), (4.0, 5.0), (1, 1, 1), 1)
        calib = CameraCalibration(
            intrinsics=np.array([[1.0, 0, 1.0], [0, 1.0, 1.0], [0, 0, 1.0]]),
            extrinsic=np.eye(4),
        )
        depth = DepthSpec(bins=64, depth_limit=64.0)
        feats = np.zeros((3, 3, 1))
        feats[1, 1, 0] = 2.0
        dist = np.zeros((64, 3, 3))
        dist[4, 1, 1] = 1.0  # bin 4 center sits at 4.5 m, the voxel center depth
        out = lift_image_to_voxels(Tensor(feats), Tensor(dist), calib, spec, depth,
                                   depth_interpolation="nearest")
        assert out.data.ravel()[0] == 2.0

    def test_bad_interpolation_mode(self):
        spec = VoxelGridSpec((-1, 1), (-1, 1), (-1, 1), (2, 2, 2), 1)
        with pytest.raises(ValueError):
            lift_image_to_voxels(Tensor(np.zeros((2, 2, 1))),
                                 Tensor(np.full((4, 2, 2), 0.25)), side_camera(),
                                 spec, DepthSpec(4, 4.0), depth_interpolation="cubic")


class TestSweepFusion:
    def _identity_params(self, c, n):
        merge = np.zeros((1, 1, 1, c + 1, c))
        merge[0, 0, 0, :c] = np.eye(c)
        fuse = np.zeros((1, 1, 1, n * c, c))
        for s in range(n):
            fuse[0, 0, 0, s * c : (s + 1) * c] = np.eye(c) / n
        return SweepFusionParams(
            merge_weight=Parameter("m", merge), merge_bias=Parameter("mb", np.zeros(c)),
            fuse_weight=Parameter("f", fuse), fuse_bias=Parameter("fb", np.zeros(c)),
        )

    def test_single_sweep_identity(self):
        x = Tensor(np.random.default_rng(6).standard_normal((3, 3, 2, 4)))
        out = fuse_sweeps_image([x], [0.0], self._identity_params(4, 1))
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=1e-12)

    def test_two_identical_sweeps_average(self):
        x = Tensor(np.random.default_rng(7).standard_normal((3, 3, 2, 4)))
        params = self._identity_params(4, 2)
        params.merge_weight.data[0, 0, 0, 4] = 0.0  # ignore the offset channel
        out = fuse_sweeps_image([x, x], [0.0, -0.5], params)
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=1e-12)

    def test_zero_fuse_weights(self):
        x = Tensor(np.ones((2, 2, 2, 3)))
        params = self._identity_params(3, 1)
        params.fuse_weight.data[...] = 0.0
        out = fuse_sweeps_image([x], [0.0], params)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_nonzero_initial_offset_rejected(self):
        x = Tensor(np.ones((2, 2, 2, 3)))
        with pytest.raises(ValueError):
            fuse_sweeps_image([x], [-0.5], self._identity_params(3, 1))

    def test_shape_mismatch_rejected(self):
        params = self._identity_params(3, 2)
        with pytest.raises(ValueError):
            fuse_sweeps_image(
                [Tensor(np.ones((2, 2, 2, 3))), Tensor(np.ones((2, 2, 1, 3)))],
                [0.0, -0.5], params,
            )


class TestVoxelize:
    SPEC = VoxelGridSpec((-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0), (4, 4, 2), 8)

    def test_single_point_at_center(self):
        center = voxel_center(self.SPEC, (1, 2, 0))
        cloud = PointCloud(np.array([center]), np.array([0.7]), np.array([0.0]))
        grid = voxelize_points(cloud, self.SPEC)
        cell = grid.features.data[1, 2, 0]
        np.testing.assert_allclose(
            cell, [0, 0, 0, 0.7, 0, math.log(2.0), 0, 0], rtol=0, atol=1e-12)
        total = np.abs(grid.features.data).sum()
        assert total == pytest.approx(np.abs(cell).sum())

    def test_empty_cloud(self):
        grid = voxelize_points(PointCloud.empty(), self.SPEC)
        np.testing.assert_array_equal(grid.features.data, 0.0)

    def test_two_coincident_points(self):
        center = voxel_center(self.SPEC, (0, 0, 0))
        cloud = PointCloud(np.array([center, center]), np.array([0.4, 0.6]),
                           np.array([0.0, -0.5]))
        cell = voxelize_points(cloud, self.SPEC).features.data[0, 0, 0]
        np.testing.assert_allclose(cell[:6], [0, 0, 0, 0.5, -0.25, math.log(3.0)],
                                   rtol=0, atol=1e-12)

    def test_out_of_range_ignored(self):
        cloud = PointCloud(np.array([[10.0, 0.0, 0.0]]), np.array([1.0]), np.array([0.0]))
        grid = voxelize_points(cloud, self.SPEC)
        np.testing.assert_array_equal(grid.features.data, 0.0)

    def test_channel_minimum(self):
        small = VoxelGridSpec((-1, 1), (-1, 1), (-1, 1), (2, 2, 2), 4)
        with pytest.raises(ValueError):
            voxelize_points(PointCloud.empty(), small)


def identity_head(c):
    w = np.zeros((3, 3, 3, c, c))
    w[1, 1, 1] = np.eye(c)
    return w


class TestMultiScaleHeads:
    def test_identity_single_head(self):
        spec = VoxelGridSpec((-2, 2), (-2, 2), (-1, 1), (4, 4, 2), 8)
        raw = voxelize_points(PointCloud(
            np.random.default_rng(8).uniform(-1.9, 1.9, size=(30, 3)),
            np.random.default_rng(9).uniform(size=30), np.zeros(30)), spec)
        params = MultiScaleHeadParams(
            strides=(1,), weights=[Parameter("w", identity_head(8))],
            biases=[Parameter("b", np.zeros(8))])
        out = multi_scale_heads(raw, params)
        np.testing.assert_allclose(out.data, raw.features.data, rtol=0, atol=1e-12)

    def test_zero_weights(self):
        spec = VoxelGridSpec((-2, 2), (-2, 2), (-1, 1), (4, 4, 2), 8)
        raw = voxelize_points(PointCloud.empty(), spec)
        params = MultiScaleHeadParams(
            strides=(1, 2),
            weights=[Parameter("w1", np.zeros((3, 3, 3, 8, 8))),
                     Parameter("w2", np.zeros((3, 3, 3, 8, 8)))],
            biases=[Parameter("b1", np.zeros(8)), Parameter("b2", np.zeros(8))])
        out = multi_scale_heads(raw, params)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_stride2_loop_oracle(self):
        # block-constant input, summing kernel: verify against a direct loop
        c = 2
        spec = VoxelGridSpec((-2, 2), (-2, 2), (-1, 1), (4, 4, 2), c)
        rng = np.random.default_rng(10)
        blocks = rng.standard_normal((2, 2, 2, c))
        data = np.repeat(np.repeat(blocks, 2, axis=0), 2, axis=1)  # constant per 2x2x1
        grid = VoxelGrid(spec=spec, features=Tensor(data))
        w = np.zeros((3, 3, 3, c, c))
        w[1, 1, 1] = np.eye(c)
        params = MultiScaleHeadParams(strides=(2,), weights=[Parameter("w", w)],
                                      biases=[Parameter("b", np.zeros(c))])
        out = multi_scale_heads(grid, params).data

        expected = np.zeros_like(data)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    # stride-(2,2,1) conv with center-identity kernel reads the
                    # block value; nearest upsampling paints it back over 2x2x1
                    for di in range(2):
                        for dj in range(2):
                            expected[2 * i + di, 2 * j + dj, k] = data[2 * i, 2 * j, k]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_indivisible_stride(self):
        spec = VoxelGridSpec((-2, 2), (-2, 2), (-1, 1), (5, 4, 2), 8)
        raw = voxelize_points(PointCloud.empty(), spec)
        params = MultiScaleHeadParams(
            strides=(2,), weights=[Parameter("w", np.zeros((3, 3, 3, 8, 8)))],
            biases=[Parameter("b", np.zeros(8))])
        with pytest.raises(ValueError):
            multi_scale_heads(raw, params)


class TestVoxelEncoder:
    def _grid(self, c=4, negative=False):
        rng = np.random.default_rng(11)
        data = rng.standard_normal((4, 4, 2, c))
        if not negative:
            data = np.abs(data)
        spec = VoxelGridSpec((-2, 2), (-2, 2), (-1, 1), (4, 4, 2), c)
        return VoxelGrid(spec=spec, features=Tensor(data))

    def test_none_passthrough(self):
        grid = self._grid(negative=True)
        out, tap = voxel_encoder(grid, EncoderParams(op_type="none", weights=[], biases=[]))
        assert out.features is grid.features
        assert tap.features is grid.features

    def test_identity_kernels_nonnegative(self):
        grid = self._grid(negative=False)
        c = 4
        params = EncoderParams(
            op_type="conv3d",
            weights=[Parameter(f"w{i}", identity_head(c)) for i in range(3)],
            biases=[Parameter(f"b{i}", np.zeros(c)) for i in range(3)])
        out, tap = voxel_encoder(grid, params)
        np.testing.assert_allclose(out.features.data, grid.features.data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("op_type", ["conv2d", "conv3d"])
    def test_tap_relu_relation(self, op_type):
        grid = self._grid(negative=True)
        rng = np.random.default_rng(12)
        kz = 3 if op_type == "conv3d" else 1
        params = EncoderParams(
            op_type=op_type,
            weights=[Parameter(f"w{i}", 0.3 * rng.standard_normal((3, 3, kz, 4, 4)))
                     for i in range(3)],
            biases=[Parameter(f"b{i}", 0.1 * rng.standard_normal(4)) for i in range(3)])
        out, tap = voxel_encoder(grid, params)
        np.testing.assert_array_equal(out.features.data,
                                      np.maximum(tap.features.data, 0.0))

    @pytest.mark.parametrize("z", [1, 5, 11])
    def test_height_knob(self, z):
        spec = VoxelGridSpec((-2, 2), (-2, 2), (-1, 1), (4, 4, z), 8)
        grid = voxelize_points(PointCloud.empty(), spec)
        rng = np.random.default_rng(13)
        params = EncoderParams.create(rng, 8, "conv3d")
        out, tap = voxel_encoder(grid, params)
        assert out.features.shape == (4, 4, z, 8)
