"""Modality-specific voxel spaces.

Camera branch: a per-pixel depth head turns image features into a categorical
depth distribution; every voxel center is projected into each view and filled
with the pixel feature weighted by its interpolated occupancy probability.
Sweeps are fused at the space level.  LiDAR branch: points are binned into
the grid with hand-crafted per-cell statistics and refined by parallel
strided heads.  A small convolutional encoder then interacts neighboring
voxels; its pre-ReLU block-3 activation is exposed as the transfer tap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .geometry import VoxelGridSpec, project_points, voxel_centers
from .numerics import Parameter, Tensor
from .scene.types import PointCloud

__all__ = [
    "DepthSpec",
    "VoxelGrid",
    "EncoderTap",
    "DepthHeadParams",
    "SweepFusionParams",
    "MultiScaleHeadParams",
    "EncoderParams",
    "predict_depth_distribution",
    "lift_image_to_voxels",
    "fuse_sweeps_image",
    "voxelize_points",
    "multi_scale_heads",
    "voxel_encoder",
]

POINT_FEATURE_CHANNELS = 6  # mean xyz offsets, mean intensity, mean time, log count


@dataclass(frozen=True)
class DepthSpec:
    """Categorical depth bins out to a metric perception limit."""

    bins: int = 64
    depth_limit: float = 64.0

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.depth_limit <= 0:
            raise ValueError("depth_limit must be positive")

    @property
    def bin_width(self) -> float:
        return self.depth_limit / self.bins


@dataclass
class VoxelGrid:
    """A dense feature volume tied to its metric grid specification."""

    spec: VoxelGridSpec
    features: Tensor

    def __post_init__(self):
        expected = self.spec.counts + (self.spec.channels,)
        if tuple(self.features.shape) != expected:
            raise ValueError(
                f"voxel features shape {self.features.shape} != spec {expected}"
            )


@dataclass
class EncoderTap:
    """Pre-ReLU block-3 activation of a voxel encoder (teacher/student feature)."""

    features: Tensor


# ---------------------------------------------------------------------------
# parameters


@dataclass
class DepthHeadParams:
    weight: Parameter  # (1, 1, 1, C, D)
    bias: Parameter  # (D,)

    @staticmethod
    def create(rng: np.random.Generator, channels: int, bins: int, prefix: str = "depth"):
        return DepthHeadParams(
            weight=Parameter(f"{prefix}.weight",
                             0.02 * rng.standard_normal((1, 1, 1, channels, bins))),
            bias=Parameter(f"{prefix}.bias", np.zeros(bins)),
        )


@dataclass
class SweepFusionParams:
    merge_weight: Parameter  # (1, 1, 1, C + 1, C), shared across sweeps
    merge_bias: Parameter  # (C,)
    fuse_weight: Parameter  # (1, 1, 1, n * C, C)
    fuse_bias: Parameter  # (C,)

    @staticmethod
    def create(rng: np.random.Generator, channels: int, sweeps: int, prefix: str = "sweeps"):
        # Identity-on-features start: merging leaves features intact and the
        # fusion averages the sweeps, so a fresh model is sweep-count sane.
        merge = np.zeros((1, 1, 1, channels + 1, channels))
        merge[0, 0, 0, :channels] = np.eye(channels)
        merge[0, 0, 0, channels] = 0.02 * rng.standard_normal(channels)
        fuse = np.concatenate([np.eye(channels) / sweeps] * sweeps, axis=0)
        return SweepFusionParams(
            merge_weight=Parameter(f"{prefix}.merge_weight", merge),
            merge_bias=Parameter(f"{prefix}.merge_bias", np.zeros(channels)),
            fuse_weight=Parameter(f"{prefix}.fuse_weight",
                                  fuse.reshape(1, 1, 1, sweeps * channels, channels)),
            fuse_bias=Parameter(f"{prefix}.fuse_bias", np.zeros(channels)),
        )


@dataclass
class MultiScaleHeadParams:
    strides: tuple[int, ...]
    weights: list[Parameter]  # each (3, 3, 3, C, C)
    biases: list[Parameter]

    @staticmethod
    def create(rng: np.random.Generator, channels: int, strides=(1, 2), prefix: str = "heads"):
        weights, biases = [], []
        for s in strides:
            w = 0.02 * rng.standard_normal((3, 3, 3, channels, channels))
            w[1, 1, 1] += np.eye(channels)  # near-identity center tap
            weights.append(Parameter(f"{prefix}.s{s}.weight", w))
            biases.append(Parameter(f"{prefix}.s{s}.bias", np.zeros(channels)))
        return MultiScaleHeadParams(strides=tuple(strides), weights=weights, biases=biases)


@dataclass
class EncoderParams:
    op_type: str  # none | conv2d | conv3d
    weights: list[Parameter]
    biases: list[Parameter]

    @staticmethod
    def create(rng: np.random.Generator, channels: int, op_type: str, prefix: str = "encoder"):
        if op_type not in ("none", "conv2d", "conv3d"):
            raise ValueError(f"unknown encoder op_type {op_type!r}")
        weights, biases = [], []
        if op_type != "none":
            kz = 3 if op_type == "conv3d" else 1
            for b in range(3):
                w = 0.02 * rng.standard_normal((3, 3, kz, channels, channels))
                w[1, 1, kz // 2] += np.eye(channels)
                weights.append(Parameter(f"{prefix}.block{b}.weight", w))
                biases.append(Parameter(f"{prefix}.block{b}.bias", np.zeros(channels)))
        return EncoderParams(op_type=op_type, weights=weights, biases=biases)


# ---------------------------------------------------------------------------
# camera branch


def predict_depth_distribution(
    features: Tensor, params: DepthHeadParams, depth: DepthSpec
) -> Tensor:
    """Per-pixel depth distribution: 1x1 convolution then softmax over bins.

    ``features`` is (H, W, C); the result is (D, H, W) with every pixel
    column summing to one.
    """
    h, w, c = features.shape
    as_volume = nm.reshape(features, (h, w, 1, c))
    logits = nm.conv(as_volume, params.weight, params.bias)
    dist = nm.softmax(nm.reshape(logits, (h, w, depth.bins)), axis=-1)
    return nm.transpose(dist, (2, 0, 1))


def _bilinear_prep(u, v, height, width):
    """Corner indices, weights, and in-bounds flags for (u, v) pixel samples."""
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    corners = []
    for dv in (0, 1):
        wv = fv if dv else 1.0 - fv
        for du in (0, 1):
            wu = fu if du else 1.0 - fu
            uu = u0 + du
            vv = v0 + dv
            inside = (uu >= 0) & (uu < width) & (vv >= 0) & (vv < height)
            corners.append(
                (np.clip(vv, 0, height - 1), np.clip(uu, 0, width - 1), wv * wu * inside)
            )
    return corners


def lift_image_to_voxels(
    features: Tensor,
    depth_dist: Tensor,
    calib,
    spec: VoxelGridSpec,
    depth: DepthSpec,
    depth_interpolation: str = "linear",
) -> Tensor:
    """Fill the voxel grid from one camera view.

    Every voxel center projects to (u, v, d); inside the image and in front
    of the perception limit, the cell receives the bilinear pixel feature
    scaled by the occupancy probability read from the depth distribution at
    (u, v, d).  The depth axis interpolates linearly between bin centers
    (``depth_interpolation="nearest"`` snaps to the closest bin); beyond the
    first/last center it clamps to the end bin.  All other voxels are zero.
    Differentiable with respect to ``features`` and ``depth_dist``.
    """
    if depth_interpolation not in ("linear", "nearest"):
        raise ValueError(f"unknown depth interpolation {depth_interpolation!r}")
    h, w, c = features.shape
    d_bins = depth.bins
    if tuple(depth_dist.shape) != (d_bins, h, w):
        raise ValueError(
            f"depth distribution shape {depth_dist.shape} != ({d_bins}, {h}, {w})"
        )
    if spec.channels != c:
        raise ValueError(f"grid channels {spec.channels} != image channels {c}")

    centers = voxel_centers(spec).reshape(-1, 3)
    u, v, d, valid = project_points(centers, calib)
    mask = valid & (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    mask &= d < depth.depth_limit

    idx = np.nonzero(mask)[0]
    um, vm, dm = u[idx], v[idx], d[idx]
    corners = _bilinear_prep(um, vm, h, w)

    td = dm / depth.bin_width - 0.5  # continuous bin coordinate, centers at integers
    if depth_interpolation == "nearest":
        b0 = np.clip(np.floor(td + 0.5).astype(np.int64), 0, d_bins - 1)
        b1 = b0
        fb = np.zeros_like(td)
    else:
        raw = np.floor(td).astype(np.int64)
        fb = td - raw
        b0 = np.clip(raw, 0, d_bins - 1)
        b1 = np.clip(raw + 1, 0, d_bins - 1)

    f_data = features.data
    d_data = depth_dist.data
    occupancy = np.zeros(idx.shape[0])
    pixel_feat = np.zeros((idx.shape[0], c))
    for rows, cols, wgt in corners:
        occupancy += wgt * ((1.0 - fb) * d_data[b0, rows, cols] + fb * d_data[b1, rows, cols])
        pixel_feat += wgt[:, None] * f_data[rows, cols]

    out = np.zeros((centers.shape[0], c))
    out[idx] = occupancy[:, None] * pixel_feat

    def backward(g):
        g_flat = g.reshape(-1, c)[idx]
        if features.requires_grad:
            df = np.zeros_like(f_data)
            scaled = (occupancy[:, None] * g_flat)
            for rows, cols, wgt in corners:
                np.add.at(df, (rows, cols), wgt[:, None] * scaled)
            nm.accumulate_grad(features, df)
        if depth_dist.requires_grad:
            dd = np.zeros_like(d_data)
            g_occ = (g_flat * pixel_feat).sum(axis=1)
            for rows, cols, wgt in corners:
                np.add.at(dd, (b0, rows, cols), wgt * (1.0 - fb) * g_occ)
                np.add.at(dd, (b1, rows, cols), wgt * fb * g_occ)
            nm.accumulate_grad(depth_dist, dd)

    result = nm.record_op(out, (features, depth_dist), backward)
    return nm.reshape(result, spec.counts + (c,))


def fuse_sweeps_image(
    spaces: list[Tensor],
    time_offsets: list[float],
    params: SweepFusionParams,
    specs: list[VoxelGridSpec] | None = None,
) -> Tensor:
    """Space-level temporal fusion of per-sweep image voxel grids.

    Each sweep gets its scalar time offset appended as an extra channel and
    is merged back to C channels by a shared 1x1x1 convolution; the merged
    sweeps are concatenated channel-wise and fused to C by one convolution.
    """
    if not spaces:
        raise ValueError("fuse_sweeps_image needs at least one sweep")
    if len(spaces) != len(time_offsets):
        raise ValueError("one time offset per sweep required")
    if abs(time_offsets[0]) > 1e-12:
        raise ValueError(f"initial sweep offset must be 0, got {time_offsets[0]}")
    shape = tuple(spaces[0].shape)
    for s in spaces[1:]:
        if tuple(s.shape) != shape:
            raise ValueError(f"sweep grids disagree in shape: {s.shape} vs {shape}")
    if specs is not None and any(sp != specs[0] for sp in specs[1:]):
        raise ValueError("sweep grids disagree in grid spec")

    n_expected = params.fuse_weight.shape[3] // shape[-1]
    if len(spaces) != n_expected:
        raise ValueError(f"fusion weights built for {n_expected} sweeps, got {len(spaces)}")

    merged = []
    for space, offset in zip(spaces, time_offsets):
        channel = Tensor(np.full(shape[:3] + (1,), float(offset)))
        stacked = nm.concat([space, channel], axis=3)
        merged.append(nm.conv(stacked, params.merge_weight, params.merge_bias))
    fused_in = nm.concat(merged, axis=3) if len(merged) > 1 else merged[0]
    return nm.conv(fused_in, params.fuse_weight, params.fuse_bias)


# ---------------------------------------------------------------------------
# point branch


def voxelize_points(cloud: PointCloud, spec: VoxelGridSpec) -> VoxelGrid:
    """Bin points into the grid with per-cell summary features.

    Channels 0..2 hold the mean offset of the points from the cell center,
    channel 3 the mean intensity, channel 4 the mean time offset, channel 5
    log(1 + count); any remaining channels stay zero.  Empty cells are zero.
    """
    if spec.channels < POINT_FEATURE_CHANNELS:
        raise ValueError(
            f"voxelize_points needs >= {POINT_FEATURE_CHANNELS} channels, got {spec.channels}"
        )
    nx, ny, nz = spec.counts
    n_cells = nx * ny * nz
    feats = np.zeros((n_cells, spec.channels))

    if len(cloud) > 0:
        p = cloud.xyz
        ranges = np.array(spec.ranges)
        cells = np.array(spec.cell_sizes)
        inside = np.all((p >= ranges[:, 0]) & (p < ranges[:, 1]), axis=1)
        q = p[inside]
        if q.shape[0] > 0:
            ijk = np.floor((q - ranges[:, 0]) / cells).astype(np.int64)
            ijk = np.minimum(ijk, np.array(spec.counts) - 1)
            lin = (ijk[:, 0] * ny + ijk[:, 1]) * nz + ijk[:, 2]
            count = np.bincount(lin, minlength=n_cells).astype(np.float64)
            occupied = count > 0
            centers = voxel_centers(spec).reshape(-1, 3)
            safe = np.maximum(count, 1.0)
            for axis in range(3):
                off = q[:, axis] - centers[lin, axis]
                feats[:, axis] = np.bincount(lin, weights=off, minlength=n_cells) / safe
            feats[:, 3] = np.bincount(lin, weights=cloud.intensity[inside], minlength=n_cells) / safe
            feats[:, 4] = np.bincount(lin, weights=cloud.time[inside], minlength=n_cells) / safe
            feats[~occupied, :5] = 0.0
            feats[:, 5] = np.log1p(count)

    grid = Tensor(feats.reshape(nx, ny, nz, spec.channels))
    return VoxelGrid(spec=spec, features=grid)


def multi_scale_heads(raw: VoxelGrid, params: MultiScaleHeadParams) -> Tensor:
    """Parallel strided convolution heads, upsampled back and summed.

    Integer strides apply to the horizontal axes (stride 1 on height);
    explicit (sx, sy, sz) triples are honored as given.  Upsampling is
    nearest-neighbor so block-constant fields survive exactly.
    """
    if not params.strides:
        raise ValueError("multi_scale_heads needs at least one head")
    nx, ny, nz, _ = raw.features.shape
    total = None
    for stride, w, b in zip(params.strides, params.weights, params.biases):
        s = (stride, stride, 1) if isinstance(stride, (int, np.integer)) else tuple(stride)
        for extent, sv, axis in zip((nx, ny, nz), s, "xyz"):
            if extent % sv != 0:
                raise ValueError(f"stride {sv} does not divide {axis} extent {extent}")
        head = nm.conv(raw.features, w, b, stride=s, padding=1)
        if max(s) > 1:
            head = nm.nn_upsample3d(head, s)
        total = head if total is None else nm.add(total, head)
    return total


# ---------------------------------------------------------------------------
# shared encoder


def voxel_encoder(
    grid: VoxelGrid, params: EncoderParams
) -> tuple[VoxelGrid, EncoderTap]:
    """Three conv+ReLU blocks; the tap is the pre-ReLU activation of block 3.

    ``conv3d`` uses 3x3x3 kernels, ``conv2d`` per-height 3x3x1 kernels, and
    ``none`` passes the input through (tap == output == input).
    """
    if params.op_type == "none":
        return grid, EncoderTap(features=grid.features)
    pad = (1, 1, 1) if params.op_type == "conv3d" else (1, 1, 0)
    x = grid.features
    tap = None
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = nm.conv(x, w, b, stride=1, padding=pad)
        if i == len(params.weights) - 1:
            tap = pre
        x = nm.relu(pre)
    return VoxelGrid(spec=grid.spec, features=x), EncoderTap(features=tap)
