"""End-to-end orchestration: scene -> modality spaces -> fusion -> decoder ->
postprocess, for single-modality and fused settings.

Model parameters are created from per-component child seeds, so a fused run
and a LiDAR-only run with the same seed share bit-identical LiDAR, fusion,
and decoder weights.  Per-camera lifting may run on a thread pool during
inference; contributions are reduced in a fixed camera order, so results do
not depend on the worker count.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .cross_modality import FusionParams, ModalitySelection, modality_switch_fuse
from .decoder import DecodeResult, DecoderConfig, DecoderParams, decode
from .geometry import VoxelGridSpec, align_to_initial
from .modality import (
    DepthHeadParams,
    DepthSpec,
    EncoderParams,
    EncoderTap,
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
from .numerics import Parameter, Tensor
from .postprocess import PostprocessConfig, TrackerConfig, TrackerState, greedy_track_step, run_postprocess
from .scene.types import Box3D, Scene

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "ModelParams",
    "ForwardResult",
    "DetectionResult",
    "build_model",
    "forward_scene",
    "run_detection",
    "run_sequence",
]


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage label."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


def _default_grid() -> VoxelGridSpec:
    return VoxelGridSpec((-8.0, 8.0), (-8.0, 8.0), (-2.0, 2.0), (16, 16, 4), 32)


@dataclass
class PipelineConfig:
    grid: VoxelGridSpec = field(default_factory=_default_grid)
    depth: DepthSpec = field(default_factory=DepthSpec)
    use_camera: bool = True
    use_lidar: bool = True
    encoder_op: str = "conv3d"  # none | conv2d | conv3d
    head_strides: tuple = (1, 2)
    kt_enabled: bool = False
    kt_teacher: str = "lidar"  # lidar | fused
    depth_interpolation: str = "linear"
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.encoder_op not in ("none", "conv2d", "conv3d"):
            raise ValueError(f"encoder_op: unknown value {self.encoder_op!r}")
        if self.kt_teacher not in ("lidar", "fused"):
            raise ValueError(f"kt_teacher: unknown value {self.kt_teacher!r}")
        if not (self.use_camera or self.use_lidar):
            raise ValueError("use_camera/use_lidar: at least one modality required")
        if self.grid.channels != self.decoder.channels:
            raise ValueError(
                f"grid.channels: {self.grid.channels} must equal decoder channels "
                f"{self.decoder.channels}"
            )

    @property
    def grid_spec(self) -> VoxelGridSpec:
        return self.grid

    @property
    def selection(self) -> ModalitySelection:
        return ModalitySelection(use_camera=self.use_camera, use_lidar=self.use_lidar)

    def to_dict(self) -> dict:
        return {
            "grid": {
                "x_range": list(self.grid.x_range),
                "y_range": list(self.grid.y_range),
                "z_range": list(self.grid.z_range),
                "counts": list(self.grid.counts),
                "channels": self.grid.channels,
            },
            "depth": {"bins": self.depth.bins, "depth_limit": self.depth.depth_limit},
            "use_camera": self.use_camera,
            "use_lidar": self.use_lidar,
            "encoder_op": self.encoder_op,
            "head_strides": list(self.head_strides),
            "kt_enabled": self.kt_enabled,
            "kt_teacher": self.kt_teacher,
            "depth_interpolation": self.depth_interpolation,
            "decoder": {
                "num_queries": self.decoder.num_queries,
                "num_blocks": self.decoder.num_blocks,
                "num_heads": self.decoder.num_heads,
                "num_points": self.decoder.num_points,
                "channels": self.decoder.channels,
                "num_classes": self.decoder.num_classes,
                "ffn_dim": self.decoder.ffn_dim,
                "detach_references": self.decoder.detach_references,
            },
            "postprocess": {
                "max_detections": self.postprocess.max_detections,
                "xy_range": self.postprocess.xy_range,
                "z_range": self.postprocess.z_range,
                "nms_radius": self.postprocess.nms_radius,
                "nms_radius_per_class": {
                    str(k): v for k, v in self.postprocess.nms_radius_per_class.items()
                },
            },
            "tracker": {
                "score_threshold": self.tracker.score_threshold,
                "match_distance": self.tracker.match_distance,
                "max_age": self.tracker.max_age,
            },
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        try:
            grid = data["grid"]
            spec = VoxelGridSpec(
                tuple(grid["x_range"]),
                tuple(grid["y_range"]),
                tuple(grid["z_range"]),
                tuple(grid["counts"]),
                int(grid["channels"]),
            )
            depth = DepthSpec(int(data["depth"]["bins"]), float(data["depth"]["depth_limit"]))
            decoder = DecoderConfig(**data["decoder"])
            post = data.get("postprocess", {})
            postprocess = PostprocessConfig(
                max_detections=int(post.get("max_detections", 300)),
                xy_range=float(post.get("xy_range", 61.2)),
                z_range=float(post.get("z_range", 10.0)),
                nms_radius=float(post.get("nms_radius", 1.0)),
                nms_radius_per_class={
                    int(k): float(v)
                    for k, v in post.get("nms_radius_per_class", {}).items()
                },
            )
            trk = data.get("tracker", {})
            tracker = TrackerConfig(
                score_threshold=float(trk.get("score_threshold", 0.2)),
                match_distance=float(trk.get("match_distance", 2.0)),
                max_age=int(trk.get("max_age", 3)),
            )
            return PipelineConfig(
                grid=spec,
                depth=depth,
                use_camera=bool(data.get("use_camera", True)),
                use_lidar=bool(data.get("use_lidar", True)),
                encoder_op=str(data.get("encoder_op", "conv3d")),
                head_strides=tuple(data.get("head_strides", (1, 2))),
                kt_enabled=bool(data.get("kt_enabled", False)),
                kt_teacher=str(data.get("kt_teacher", "lidar")),
                depth_interpolation=str(data.get("depth_interpolation", "linear")),
                decoder=decoder,
                postprocess=postprocess,
                tracker=tracker,
                seed=int(data.get("seed", 0)),
            )
        except KeyError as exc:
            raise ValueError(f"config missing field {exc.args[0]!r}") from exc


def _component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


@dataclass
class ModelParams:
    depth_head: DepthHeadParams | None
    sweep_fusion: SweepFusionParams | None
    heads: MultiScaleHeadParams | None
    encoder_img: EncoderParams | None
    encoder_pts: EncoderParams | None
    fusion: FusionParams
    decoder: DecoderParams

    def trainable(self) -> list[Parameter]:
        out: list[Parameter] = []
        if self.depth_head is not None:
            out += [self.depth_head.weight, self.depth_head.bias]
        if self.sweep_fusion is not None:
            out += [
                self.sweep_fusion.merge_weight,
                self.sweep_fusion.merge_bias,
                self.sweep_fusion.fuse_weight,
                self.sweep_fusion.fuse_bias,
            ]
        if self.heads is not None:
            out += list(self.heads.weights) + list(self.heads.biases)
        for enc in (self.encoder_img, self.encoder_pts):
            if enc is not None:
                out += list(enc.weights) + list(enc.biases)
        out += [self.fusion.weight, self.fusion.bias]
        out += self.decoder.parameters()
        return out

    def student_parameters(self) -> list[Parameter]:
        """Camera-branch parameters: the knowledge-transfer student side."""
        out: list[Parameter] = []
        if self.depth_head is not None:
            out += [self.depth_head.weight, self.depth_head.bias]
        if self.sweep_fusion is not None:
            out += [
                self.sweep_fusion.merge_weight,
                self.sweep_fusion.merge_bias,
                self.sweep_fusion.fuse_weight,
                self.sweep_fusion.fuse_bias,
            ]
        if self.encoder_img is not None:
            out += list(self.encoder_img.weights) + list(self.encoder_img.biases)
        return out


def _needs_camera(config: PipelineConfig) -> bool:
    return config.use_camera or config.kt_enabled


def _needs_lidar(config: PipelineConfig) -> bool:
    return config.use_lidar or config.kt_enabled


def build_model(config: PipelineConfig, seed: int | None = None,
                n_camera_sweeps: int | None = None) -> ModelParams:
    """Instantiate all parameters from per-component child seeds."""
    seed = config.seed if seed is None else seed
    c = config.grid.channels
    depth_head = sweep_fusion = heads = encoder_img = encoder_pts = None
    if _needs_camera(config):
        depth_head = DepthHeadParams.create(
            _component_rng(seed, "depth_head"), c, config.depth.bins
        )
        sweeps = 1 if n_camera_sweeps is None else n_camera_sweeps
        sweep_fusion = SweepFusionParams.create(
            _component_rng(seed, "sweep_fusion"), c, sweeps
        )
        encoder_img = EncoderParams.create(
            _component_rng(seed, "encoder_img"), c, config.encoder_op, prefix="encoder_img"
        )
    if _needs_lidar(config):
        heads = MultiScaleHeadParams.create(
            _component_rng(seed, "heads"), c, config.head_strides
        )
        encoder_pts = EncoderParams.create(
            _component_rng(seed, "encoder_pts"), c, config.encoder_op, prefix="encoder_pts"
        )
    fusion = FusionParams.create(_component_rng(seed, "fusion"), c)
    decoder = DecoderParams.create(config.decoder, seed)
    return ModelParams(
        depth_head=depth_head,
        sweep_fusion=sweep_fusion,
        heads=heads,
        encoder_img=encoder_img,
        encoder_pts=encoder_pts,
        fusion=fusion,
        decoder=decoder,
    )


@dataclass
class ForwardResult:
    vu: VoxelGrid
    decode: DecodeResult
    teacher_tap: EncoderTap | None = None
    student_tap: EncoderTap | None = None
    camera_space: VoxelGrid | None = None
    lidar_space: VoxelGrid | None = None


@dataclass
class DetectionResult:
    detections: list[Box3D]
    raw: ForwardResult


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, exc) from exc
            return False

    return _Ctx()


def _lift_camera(cam, scene, config, params):
    pose_0 = scene.pose_at(0.0) if scene.ego_poses else None
    if pose_0 is not None:
        aligned = align_to_initial(cam.calibration, scene.pose_at(cam.time_offset), pose_0)
    else:
        aligned = cam.calibration
    feats = Tensor(cam.features)
    dist = predict_depth_distribution(feats, params.depth_head, config.depth)
    return lift_image_to_voxels(
        feats, dist, aligned, config.grid, config.depth,
        depth_interpolation=config.depth_interpolation,
    )


def _camera_branch(scene, config, params, threads):
    offsets = scene.sweep_offsets
    groups = {t: [c for c in scene.cameras if c.time_offset == t] for t in offsets}
    camera_list = [(t, cam) for t in offsets for cam in groups[t]]
    parallel = threads > 1 and nm.active_tape() is None and len(camera_list) > 1
    if parallel:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            lifted = list(
                pool.map(lambda item: _lift_camera(item[1], scene, config, params), camera_list)
            )
    else:
        lifted = [_lift_camera(cam, scene, config, params) for _, cam in camera_list]

    per_sweep = []
    cursor = 0
    for t in offsets:
        total = None
        for _ in groups[t]:  # fixed camera order keeps the sum deterministic
            contribution = lifted[cursor]
            cursor += 1
            total = contribution if total is None else nm.add(total, contribution)
        if total is None:
            raise ValueError(f"sweep at offset {t} has no cameras")
        per_sweep.append(total)
    fused = fuse_sweeps_image(per_sweep, offsets, params.sweep_fusion)
    grid = VoxelGrid(spec=config.grid, features=fused)
    return voxel_encoder(grid, params.encoder_img)


def forward_scene(
    scene: Scene, config: PipelineConfig, params: ModelParams, threads: int = 1
) -> ForwardResult:
    """Run lifting/voxelization, encoders, fusion, and the decoder."""
    vi = vp = None
    student = teacher = None
    if _needs_camera(config):
        if not scene.cameras:
            raise PipelineError("camera", ValueError("scene has no cameras"))
        with _stage("camera"):
            vi, img_tap = _camera_branch(scene, config, params, threads)
            student = img_tap
    if _needs_lidar(config):
        with _stage("lidar"):
            raw = voxelize_points(scene.cloud, config.grid)
            vp_features = multi_scale_heads(raw, params.heads)
            vp, pts_tap = voxel_encoder(
                VoxelGrid(spec=config.grid, features=vp_features), params.encoder_pts
            )
            teacher = pts_tap
    with _stage("fusion"):
        vu = modality_switch_fuse(vi, vp, config.selection, params.fusion)
    if config.kt_enabled and config.kt_teacher == "fused":
        teacher = EncoderTap(features=vu.features)
    with _stage("decode"):
        result = decode(params.decoder, vu, config.decoder)
    expose_taps = teacher is not None and student is not None
    return ForwardResult(
        vu=vu,
        decode=result,
        teacher_tap=teacher if expose_taps else None,
        student_tap=student if expose_taps else None,
        camera_space=vi,
        lidar_space=vp,
    )


def run_detection(
    scene: Scene,
    config: PipelineConfig,
    params: ModelParams | None = None,
    threads: int = 1,
) -> DetectionResult:
    """Full inference: forward pass plus range filter and circle NMS."""
    if params is None:
        sweeps = len({c.time_offset for c in scene.cameras}) if scene.cameras else None
        params = build_model(config, n_camera_sweeps=sweeps)
    fw = forward_scene(scene, config, params, threads=threads)
    with _stage("postprocess"):
        detections = run_postprocess(fw.decode.detections, config)
    return DetectionResult(detections=detections, raw=fw)


def run_sequence(
    scenes: list[Scene],
    config: PipelineConfig,
    params: ModelParams | None = None,
    frame_dt: float = 0.5,
    threads: int = 1,
) -> list[TrackerState]:
    """Detect every frame and chain the greedy tracker; frames must be time-ordered."""
    if params is None and scenes:
        sweeps = len({c.time_offset for c in scenes[0].cameras}) if scenes[0].cameras else None
        params = build_model(config, n_camera_sweeps=sweeps)
    state = TrackerState()
    states = []
    for scene in scenes:
        result = run_detection(scene, config, params, threads=threads)
        with _stage("tracking"):
            state = greedy_track_step(state, result.detections, frame_dt, config.tracker)
        states.append(state)
    return states
