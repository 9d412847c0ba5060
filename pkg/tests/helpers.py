"""Shared oracles and fixtures for the unit and acceptance suites.

The references here are deliberately written as plain scalar/loop code,
independent of the vectorized implementations they check.
"""

import itertools
import math

import numpy as np

from voxdet import numerics as nm
from voxdet.geometry import CameraCalibration, project, voxel_center
from voxdet.modality import lift_image_to_voxels, predict_depth_distribution
from voxdet.numerics import Tensor
from voxdet.scene.types import CameraView, PointCloud, Scene


def lift_oracle(features, depth_dist, calib, spec, depth):
    """Independent per-voxel reference for the camera lift."""
    d_bins, h, w = depth_dist.shape
    c = features.shape[2]
    out = np.zeros(spec.counts + (c,))
    for i in range(spec.counts[0]):
        for j in range(spec.counts[1]):
            for k in range(spec.counts[2]):
                hit = project(voxel_center(spec, (i, j, k)), calib)
                if hit is None:
                    continue
                u, v, d = hit
                if not (0.0 <= u <= w - 1.0 and 0.0 <= v <= h - 1.0 and d < depth.depth_limit):
                    continue
                u0, v0 = int(math.floor(u)), int(math.floor(v))
                fu, fv = u - u0, v - v0
                td = d / depth.bin_width - 0.5
                b0 = int(math.floor(td))
                fb = td - b0
                b0c = min(max(b0, 0), d_bins - 1)
                b1c = min(max(b0 + 1, 0), d_bins - 1)
                occupancy = 0.0
                pixel = np.zeros(c)
                for dv in (0, 1):
                    for du in (0, 1):
                        uu, vv = u0 + du, v0 + dv
                        if not (0 <= uu < w and 0 <= vv < h):
                            continue
                        wgt = (fv if dv else 1.0 - fv) * (fu if du else 1.0 - fu)
                        occupancy += wgt * (
                            (1.0 - fb) * depth_dist[b0c, vv, uu]
                            + fb * depth_dist[b1c, vv, uu]
                        )
                        pixel += wgt * features[vv, uu]
                out[i, j, k] = occupancy * pixel
    return out


def side_camera(fx=10.0, cx=7.5, cy=7.5, yaw=0.0, position=(0.0, 0.0, 0.0)):
    """Camera at ``position`` looking along +x rotated by yaw about +z."""
    k = np.array([[fx, 0.0, cx], [0.0, fx, cy], [0.0, 0.0, 1.0]])
    c, s = math.cos(yaw), math.sin(yaw)
    ext = np.eye(4)
    ext[:3, 0] = (-s, c, 0.0)
    ext[:3, 1] = (0.0, 0.0, -1.0)
    ext[:3, 2] = (c, s, 0.0)
    ext[:3, 3] = position
    return CameraCalibration(intrinsics=k, extrinsic=ext)


def central_camera(width=24, height=24, focal=12.0, yaw=0.0):
    k = np.array([[focal, 0.0, (width - 1) / 2.0],
                  [0.0, focal, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    c, s = math.cos(yaw), math.sin(yaw)
    ext = np.eye(4)
    ext[:3, 0] = (-s, c, 0.0)
    ext[:3, 1] = (0.0, 0.0, -1.0)
    ext[:3, 2] = (c, s, 0.0)
    return CameraCalibration(intrinsics=k, extrinsic=ext)


def synthetic_camera_scene(seed=0, n_cameras=4, size=24, channels=3):
    """A camera-only scene with random smooth-ish feature maps."""
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(n_cameras):
        yaw = 2.0 * math.pi * i / n_cameras
        feats = rng.uniform(0.0, 1.0, size=(size, size, channels))
        cams.append(CameraView(name=f"cam_{i}", calibration=central_camera(yaw=yaw),
                               features=feats, time_offset=0.0))
    return Scene(scene_id="synth", seed=seed, cameras=cams, cloud=PointCloud.empty(),
                 ego_poses=[], boxes=[])


def lift_scene_cameras(scene, spec, depth, depth_params):
    """Lift every camera of a scene and sum in fixed order; returns an array."""
    total = None
    for cam in scene.cameras:
        feats = Tensor(cam.features)
        dist = predict_depth_distribution(feats, depth_params, depth)
        lifted = lift_image_to_voxels(feats, dist, cam.calibration, spec, depth)
        total = lifted if total is None else nm.add(total, lifted)
    return total.data


def brute_force_assignment_total(cost: np.ndarray) -> float:
    """Exhaustive minimum over all one-to-one assignments of min(n, m) pairs."""
    n, m = cost.shape
    best = np.inf
    if n <= m:
        rows = np.arange(n)
        for cols in itertools.permutations(range(m), n):
            best = min(best, float(cost[rows, list(cols)].sum()))
    else:
        cols = np.arange(m)
        for rows in itertools.permutations(range(n), m):
            best = min(best, float(cost[list(rows), cols].sum()))
    return best
