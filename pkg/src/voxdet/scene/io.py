"""On-disk scene format: one JSON manifest plus raw float32 array blobs.

Layout of a scene directory:

    manifest.json   declared shapes, calibrations, poses, boxes, seed
    cam_<s>_<c>.f32 per-camera feature map, (H, W, C) row-major
    points.f32      point records, (N, 5) rows of (x, y, z, intensity, time)

All multi-byte values are little-endian float32; arrays are widened to
float64 in memory.  read_scene(write_scene(s)) reproduces s bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..geometry import CameraCalibration, EgoPose
from .types import Box3D, CameraView, PointCloud, Scene, SceneManifest

__all__ = ["SceneIOError", "FORMAT_VERSION", "write_scene", "read_scene"]

FORMAT_VERSION = 1


class SceneIOError(IOError):
    """Scene directory missing, malformed, or inconsistent with its manifest."""


def _write_blob(path: Path, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_blob(path: Path, shape: tuple[int, ...], field: str) -> np.ndarray:
    if not path.is_file():
        raise SceneIOError(f"{field}: missing file {path.name}")
    raw = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise SceneIOError(
            f"{field}: file {path.name} holds {raw.size} values, "
            f"manifest declares shape {shape} ({expected})"
        )
    return raw.reshape(shape).astype(np.float64)


def _box_to_dict(box: Box3D) -> dict:
    return {
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "velocity": list(box.velocity),
        "class_id": box.class_id,
        "score": box.score,
    }


def _box_from_dict(d: dict) -> Box3D:
    return Box3D(
        center=tuple(d["center"]),
        size=tuple(d["size"]),
        yaw=float(d["yaw"]),
        velocity=tuple(d["velocity"]),
        class_id=int(d["class_id"]),
        score=float(d["score"]),
    )


def write_scene(scene: Scene, path) -> SceneManifest:
    """Persist a scene directory; returns the manifest that was written."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    cameras = []
    for cam in scene.cameras:
        h, w, c = cam.features.shape
        fname = f"{cam.name}.f32"
        _write_blob(root / fname, cam.features)
        cameras.append(
            {
                "name": cam.name,
                "file": fname,
                "height": h,
                "width": w,
                "channels": c,
                "time_offset": cam.time_offset,
                "intrinsics": cam.calibration.intrinsics.tolist(),
                "extrinsic": cam.calibration.extrinsic.tolist(),
            }
        )

    records = np.column_stack(
        [scene.cloud.xyz, scene.cloud.intensity, scene.cloud.time]
    )
    _write_blob(root / "points.f32", records)

    manifest = SceneManifest(
        scene_id=scene.scene_id,
        seed=scene.seed,
        cameras=cameras,
        points_file="points.f32",
        num_points=len(scene.cloud),
        ego_poses=[
            {"time_offset": p.timestamp, "matrix": p.matrix.tolist()}
            for p in scene.ego_poses
        ],
        boxes=[_box_to_dict(b) for b in scene.boxes],
        format_version=FORMAT_VERSION,
    )
    payload = json.dumps(manifest.__dict__, indent=1)
    tmp = root / "manifest.json.tmp"
    tmp.write_text(payload)
    os.replace(tmp, root / "manifest.json")
    return manifest


def read_scene(path) -> Scene:
    """Load a scene directory, validating shapes against the manifest."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise SceneIOError(f"manifest: missing file {mpath}")
    try:
        raw = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise SceneIOError(f"manifest: invalid JSON ({exc})") from exc

    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise SceneIOError(
            f"format_version: expected {FORMAT_VERSION}, found {version!r}"
        )

    channel_counts = {entry["channels"] for entry in raw["cameras"]}
    if len(channel_counts) > 1:
        raise SceneIOError(f"cameras: channel counts disagree ({sorted(channel_counts)})")

    cameras = []
    for entry in raw["cameras"]:
        shape = (entry["height"], entry["width"], entry["channels"])
        feats = _read_blob(root / entry["file"], shape, f"camera {entry['name']}")
        calib = CameraCalibration(
            intrinsics=np.array(entry["intrinsics"]),
            extrinsic=np.array(entry["extrinsic"]),
        )
        cameras.append(
            CameraView(
                name=entry["name"],
                calibration=calib,
                features=feats,
                time_offset=float(entry["time_offset"]),
            )
        )

    records = _read_blob(root / raw["points_file"], (raw["num_points"], 5), "points")
    cloud = PointCloud(records[:, :3], records[:, 3], records[:, 4])

    poses = [
        EgoPose(matrix=np.array(p["matrix"]), timestamp=float(p["time_offset"]))
        for p in raw["ego_poses"]
    ]
    boxes = [_box_from_dict(b) for b in raw["boxes"]]
    return Scene(
        scene_id=raw["scene_id"],
        seed=int(raw["seed"]),
        cameras=cameras,
        cloud=cloud,
        ego_poses=poses,
        boxes=boxes,
    )
