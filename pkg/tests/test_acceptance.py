"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; the whole file completes in well under fifteen minutes on a laptop CPU.
"""

import json
import math
import time

import numpy as np
import pytest

from helpers import (
    brute_force_assignment_total,
    lift_oracle,
    lift_scene_cameras,
    side_camera,
)
from voxdet import numerics as nm
from voxdet.augmentation import GlobalTransform, apply_to_voxel_grid, transform_scene
from voxdet.cli import main
from voxdet.cross_modality import knowledge_transfer_loss
from voxdet.decoder import DecoderConfig
from voxdet.geometry import CameraCalibration, VoxelGridSpec
from voxdet.metrics import evaluate
from voxdet.modality import (
    DepthHeadParams,
    DepthSpec,
    EncoderTap,
    VoxelGrid,
    lift_image_to_voxels,
    predict_depth_distribution,
)
from voxdet.numerics import Parameter, Tensor
from voxdet.pipeline import PipelineConfig, build_model, forward_scene, run_detection
from voxdet.postprocess import TrackerConfig, TrackerState, greedy_track_step
from voxdet.scene import Box3D, PointCloud, SceneConfig, generate_scene
from voxdet.scene.types import CameraView, Scene
from voxdet.training import (
    SGDOptimizer,
    cost_matrix,
    hungarian_match,
    micro_fit,
)
from voxdet.verification import GRAD_TOLERANCE, gradient_suite


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion:02d} {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


def test_criterion_01_depth_normalization():
    rng = np.random.default_rng(101)
    depth = DepthSpec(bins=16, depth_limit=16.0)
    params = DepthHeadParams(
        weight=Parameter("w", 0.5 * rng.standard_normal((1, 1, 1, 3, 16))),
        bias=Parameter("b", 0.5 * rng.standard_normal(16)),
    )
    worst = 0.0
    for _ in range(1000):
        feats = Tensor(rng.standard_normal((5, 6, 3)))
        dist = predict_depth_distribution(feats, params, depth)
        worst = max(worst, float(np.abs(dist.data.sum(axis=0) - 1.0).max()))
    report(1, worst < 1e-9, f"1000 random maps, worst |column sum - 1| = {worst:.2e}")


def test_criterion_02_lifting_oracle():
    rng = np.random.default_rng(202)
    spec = VoxelGridSpec((-6.0, 6.0), (-6.0, 6.0), (-2.0, 2.0), (16, 16, 8), 3)
    depth = DepthSpec(bins=16, depth_limit=16.0)
    worst = 0.0
    for calib in (side_camera(), side_camera(yaw=math.pi)):
        feats = rng.standard_normal((16, 16, 3))
        dist = np.ascontiguousarray(
            rng.dirichlet(np.ones(16), size=(16, 16)).transpose(2, 0, 1))
        ours = lift_image_to_voxels(Tensor(feats), Tensor(dist), calib, spec, depth).data
        reference = lift_oracle(feats, dist, calib, spec, depth)
        worst = max(worst, float(np.abs(ours - reference).max()))

    # one-hot and uniform occupancy examples on a single-cell grid
    cell_spec = VoxelGridSpec((-0.5, 0.5), (-0.5, 0.5), (4.0, 5.0), (1, 1, 1), 1)
    calib = CameraCalibration(
        intrinsics=np.array([[1.0, 0, 1.0], [0, 1.0, 1.0], [0, 0, 1.0]]),
        extrinsic=np.eye(4))
    full = DepthSpec(bins=64, depth_limit=64.0)
    feats = np.zeros((3, 3, 1))
    feats[1, 1, 0] = 2.0
    one_hot = np.zeros((64, 3, 3))
    one_hot[4, 1, 1] = 1.0
    v_hot = lift_image_to_voxels(Tensor(feats), Tensor(one_hot), calib, cell_spec, full)
    uniform = np.full((64, 3, 3), 1.0 / 64.0)
    v_uni = lift_image_to_voxels(Tensor(feats), Tensor(uniform), calib, cell_spec, full)
    exact = v_hot.data.ravel()[0] == 2.0 and v_uni.data.ravel()[0] == 2.0 / 64.0
    report(2, worst < 1e-12 and exact,
           f"triple-loop max |diff| = {worst:.2e}; one-hot -> {v_hot.data.ravel()[0]}, "
           f"uniform -> {v_uni.data.ravel()[0]}")


def test_criterion_03_gradient_suite():
    results = gradient_suite(seed=0, points=10)
    worst = max(results, key=lambda r: r.max_error)
    ok = all(r.passed(GRAD_TOLERANCE) for r in results)
    report(3, ok,
           f"{len(results)} checks, worst {worst.name} = {worst.max_error:.2e} "
           f"(tolerance {GRAD_TOLERANCE})")


def test_criterion_04_hungarian_oracle():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.uniform(0.0, 10.0, size=(n, m))
        assign = hungarian_match(cost)
        total = sum(cost[i, j] for i, j in assign.pairs)
        worst = max(worst, abs(total - brute_force_assignment_total(cost)))
    ties = hungarian_match(np.zeros((3, 3)))
    tie_ok = ties.pairs == ((0, 0), (1, 1), (2, 2))
    report(4, worst < 1e-9 and tie_ok,
           f"1000 matrices (sizes <= 7), worst |total - brute force| = {worst:.2e}; "
           f"zero-matrix tie-break {'ok' if tie_ok else 'broken'}")


MICROFIT_CONFIG = PipelineConfig(use_camera=False)
MICROFIT_SCENE = generate_scene(SceneConfig(n_objects=2, channels=32), seed=7)


def test_criterion_05_microfit_convergence():
    start = time.time()
    result = micro_fit(MICROFIT_SCENE, MICROFIT_CONFIG, steps=500,
                       learning_rate=0.02, seed=3)
    elapsed = time.time() - start
    reduction = result.loss_reduction
    block = result.final_blocks[-1]
    assign = hungarian_match(cost_matrix(block, MICROFIT_SCENE.boxes, MICROFIT_CONFIG.grid))
    spec = MICROFIT_CONFIG.grid
    lows = np.array([lo for lo, _ in spec.ranges])
    highs = np.array([hi for _, hi in spec.ranges])
    errors = []
    for i, g in assign.pairs:
        center = lows + block.reference_out.data[i] * (highs - lows)
        gt = np.array(MICROFIT_SCENE.boxes[g].center)
        errors.append(np.hypot(center[0] - gt[0], center[1] - gt[1]) / spec.cell_sizes[0])
    worst_cells = max(errors)
    ok = reduction >= 0.9 and worst_cells < 0.5 and elapsed < 300.0
    report(5, ok,
           f"500 steps in {elapsed:.0f}s: loss {result.history[0].total:.3f} -> "
           f"{result.history[-1].total:.3f} ({reduction:.1%}), worst matched BEV "
           f"error {worst_cells:.3f} cells")


def test_criterion_06_knowledge_transfer_contract():
    # (a) identical taps give exactly zero
    rng = np.random.default_rng(606)
    tap_data = rng.standard_normal((8, 8, 4, 6))
    positions = rng.uniform(0.5, 6.5, size=(12, 3))
    zero = knowledge_transfer_loss(
        EncoderTap(features=Tensor(tap_data)),
        EncoderTap(features=Tensor(tap_data.copy())), positions).item()

    # (b) student gradient matches central differences
    teacher = EncoderTap(features=Tensor(rng.standard_normal((4, 4, 2, 3))))

    def f(x):
        return knowledge_transfer_loss(teacher,
                                       EncoderTap(features=nm.reshape(x, (4, 4, 2, 3))),
                                       positions[:4] * np.array([0.4, 0.4, 0.2]))

    grad_err = nm.grad_check(f, Tensor(rng.standard_normal(96)), eps=1e-5)

    # (c) 200 student-only steps on a fixed scene: monotone after step 10
    config = PipelineConfig(kt_enabled=True, seed=5)
    scene = generate_scene(SceneConfig(n_objects=2, channels=32), seed=9)
    params = build_model(config, n_camera_sweeps=1)
    frozen = forward_scene(scene, config, params)
    teacher_tap = EncoderTap(features=Tensor(frozen.teacher_tap.features.data.copy()))
    query_positions = frozen.decode.final_references * np.array(
        [n - 1.0 for n in config.grid.counts])
    student_params = params.student_parameters()
    optimizer = SGDOptimizer(student_params, learning_rate=0.02, momentum=0.0)
    history = []
    for _ in range(200):
        optimizer.reset_gradients()
        with nm.Tape() as tape:
            fw = forward_scene(scene, config, params)
            loss = knowledge_transfer_loss(teacher_tap, fw.student_tap, query_positions)
        history.append(loss.item())
        nm.backward(tape, loss)
        optimizer.step()
    monotone = all(history[i + 1] <= history[i] + 1e-12 for i in range(10, 199))
    ok = zero == 0.0 and grad_err < 1e-6 and monotone and history[-1] < history[10]
    report(6, ok,
           f"identity loss = {zero}; student grad err = {grad_err:.2e}; "
           f"L_KT {history[0]:.4f} -> {history[-1]:.4f}, monotone after step 10: {monotone}")


def _blob_scene(n_cameras=4, size=32, focal=20.0, radius=30.0, sigma_px=2.5):
    """Ring of inward cameras painting a compact smooth blob at the origin."""
    u = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(u ** 2) / (2 * sigma_px ** 2))
    window = np.outer(g, g)
    cams = []
    for i in range(n_cameras):
        a = 2.0 * math.pi * i / n_cameras
        ca, sa = math.cos(a), math.sin(a)
        k = np.array([[focal, 0.0, (size - 1) / 2.0],
                      [0.0, focal, (size - 1) / 2.0], [0.0, 0.0, 1.0]])
        ext = np.eye(4)
        ext[:3, 0] = (-sa, ca, 0.0)
        ext[:3, 1] = (0.0, 0.0, -1.0)
        ext[:3, 2] = (-ca, -sa, 0.0)
        ext[:3, 3] = (radius * ca, radius * sa, 0.0)
        feats = np.stack([window, 1.3 * window], axis=-1)
        cams.append(CameraView(name=f"cam_{i}",
                               calibration=CameraCalibration(intrinsics=k, extrinsic=ext),
                               features=feats, time_offset=0.0))
    return Scene(scene_id="blob", seed=0, cameras=cams, cloud=PointCloud.empty(),
                 ego_poses=[], boxes=[])


def test_criterion_07_augmentation_synchronization():
    spec = VoxelGridSpec((-6.4, 6.4), (-6.4, 6.4), (-2.0, 2.0), (16, 16, 4), 3)
    depth = DepthSpec(bins=16, depth_limit=16.0)
    rng = np.random.default_rng(707)
    params = DepthHeadParams(
        weight=Parameter("w", 0.1 * rng.standard_normal((1, 1, 1, 3, 16))),
        bias=Parameter("b", np.zeros(16)))
    cams = []
    for i in range(4):
        yaw = 2.0 * math.pi * i / 4
        feats = rng.uniform(0.0, 1.0, size=(24, 24, 3))
        k = np.array([[12.0, 0.0, 11.5], [0.0, 12.0, 11.5], [0.0, 0.0, 1.0]])
        c, s = math.cos(yaw), math.sin(yaw)
        ext = np.eye(4)
        ext[:3, 0] = (-s, c, 0.0)
        ext[:3, 1] = (0.0, 0.0, -1.0)
        ext[:3, 2] = (c, s, 0.0)
        cams.append(CameraView(name=f"cam_{i}",
                               calibration=CameraCalibration(intrinsics=k, extrinsic=ext),
                               features=feats, time_offset=0.0))
    scene = Scene(scene_id="sync", seed=0, cameras=cams, cloud=PointCloud.empty(),
                  ego_poses=[], boxes=[])
    lifted = lift_scene_cameras(scene, spec, depth, params)

    exact_failures = []
    for fx in (False, True):
        for fy in (False, True):
            for quarter in (0, 1):
                t = GlobalTransform(flip_x=fx, flip_y=fy,
                                    rotation=quarter * math.pi / 2)
                via_grid = apply_to_voxel_grid(
                    t, VoxelGrid(spec=spec, features=Tensor(lifted))).features.data
                via_scene = lift_scene_cameras(transform_scene(scene, t), spec,
                                               depth, params)
                if not np.array_equal(via_grid, via_scene):
                    exact_failures.append((fx, fy, quarter))

    # general 30-degree rotation on a smooth compact field
    big_spec = VoxelGridSpec((-8.0, 8.0), (-8.0, 8.0), (-2.0, 2.0), (64, 64, 8), 2)
    smooth_depth = DepthSpec(bins=16, depth_limit=64.0)
    bias = -((np.arange(16) - 7.0) ** 2) / (2 * 0.7 ** 2)
    smooth_params = DepthHeadParams(
        weight=Parameter("w", np.zeros((1, 1, 1, 2, 16))), bias=Parameter("b", bias))
    blob = _blob_scene()
    t = GlobalTransform(rotation=math.radians(30.0))
    base = lift_scene_cameras(blob, big_spec, smooth_depth, smooth_params)
    via_grid = apply_to_voxel_grid(
        t, VoxelGrid(spec=big_spec, features=Tensor(base))).features.data
    via_scene = lift_scene_cameras(transform_scene(blob, t), big_spec,
                                   smooth_depth, smooth_params)
    inner = (slice(1, -1), slice(1, -1), slice(1, -1))
    rel = (np.linalg.norm((via_grid - via_scene)[inner])
           / np.linalg.norm(via_scene[inner]))
    ok = not exact_failures and rel < 0.05
    report(7, ok,
           f"8/8 flip+quarter-turn combinations exact ({len(exact_failures)} failures); "
           f"30-degree smooth-field interior rel L2 = {rel:.4f} (< 0.05)")


def test_criterion_08_metrics_identity():
    rng = np.random.default_rng(808)
    gts = []
    for _ in range(3):
        frame = [
            Box3D(center=(float(rng.uniform(-20, 20)), float(rng.uniform(-20, 20)), 0.0),
                  size=tuple(rng.uniform(0.5, 3.0, size=3)),
                  yaw=float(rng.uniform(-3, 3)),
                  velocity=tuple(rng.uniform(-2, 2, size=2)),
                  class_id=int(rng.integers(0, 3)), score=1.0)
            for _ in range(4)
        ]
        gts.append(frame)
    perfect = evaluate([list(f) for f in gts], gts)
    shifted = [
        [Box3D(center=(b.center[0] + 0.5, b.center[1], b.center[2]), size=b.size,
               yaw=b.yaw, velocity=b.velocity, class_id=b.class_id, score=1.0)
         for b in frame]
        for frame in gts
    ]
    moved = evaluate(shifted, gts)
    ok = (
        abs(perfect.mean_ap - 1.0) < 5e-7
        and abs(perfect.nds - 1.0) < 5e-7
        and all(v == pytest.approx(0.0, abs=1e-12) for v in perfect.tp_errors.values())
        and moved.tp_errors["ate"] == pytest.approx(0.5, abs=1e-9)
    )
    report(8, ok,
           f"perfect: mAP = {perfect.mean_ap:.6f}, NDS = {perfect.nds:.6f}; "
           f"0.5 m shift: mATE = {moved.tp_errors['ate']:.9f}")


def test_criterion_09_tracking_invariant():
    rng = np.random.default_rng(909)
    centers = rng.uniform(-20, 20, size=(5, 2))
    velocities = rng.uniform(-2, 2, size=(5, 2))
    dt = 0.5
    config = TrackerConfig()
    state = TrackerState()
    ids_per_object = [set() for _ in range(5)]
    low_score_seen = False
    for frame in range(10):
        dets = []
        for i in range(5):
            x = centers[i, 0] + velocities[i, 0] * dt * frame
            y = centers[i, 1] + velocities[i, 1] * dt * frame
            dets.append(Box3D(center=(x, y, 0.0), size=(2.0, 1.0, 1.0), yaw=0.0,
                              velocity=tuple(velocities[i]), class_id=i % 3, score=0.9))
        # a sub-threshold detection must never enter the tracks
        dets.append(Box3D(center=(50.0, 50.0, 0.0), size=(1.0, 1.0, 1.0), yaw=0.0,
                          velocity=(0.0, 0.0), class_id=0, score=0.1))
        state = greedy_track_step(state, dets, dt, config)
        for track in state.tracks:
            if track.box.center[0] == 50.0:
                low_score_seen = True
            nearest = int(np.argmin([
                np.hypot(track.box.center[0] - (centers[i, 0] + velocities[i, 0] * dt * frame),
                         track.box.center[1] - (centers[i, 1] + velocities[i, 1] * dt * frame))
                for i in range(5)
            ]))
            ids_per_object[nearest].add(track.track_id)
    switches = sum(len(ids) - 1 for ids in ids_per_object)
    ok = state.next_id == 5 and switches == 0 and not low_score_seen
    report(9, ok,
           f"{state.next_id} ids issued over 10 frames, {switches} switches, "
           f"sub-threshold detections tracked: {low_score_seen}")


def test_criterion_10_determinism(tmp_path):
    scene_cfg = tmp_path / "scene.json"
    scene_cfg.write_text(json.dumps(SceneConfig(n_objects=2, channels=32).to_dict()))
    pipe_cfg = tmp_path / "pipe.json"
    pipe_cfg.write_text(json.dumps(PipelineConfig(seed=4).to_dict()))
    seq = tmp_path / "seq"
    assert main(["generate", "--config", str(scene_cfg), "--out", str(seq),
                 "--seed", "7"]) == 0

    detect_outputs = set()
    for run in range(2):
        for threads in ("1", "2", "8"):
            out = tmp_path / f"det_{run}_{threads}"
            assert main(["detect", "--scene", str(seq / "frame_000"), "--config",
                         str(pipe_cfg), "--out", str(out), "--threads", threads]) == 0
            detect_outputs.add((out / "detections.jsonl").read_bytes())

    fit_outputs = set()
    for run in range(2):
        for threads in ("1", "2", "8"):
            out = tmp_path / f"fit_{run}_{threads}"
            main(["microfit", "--scene", str(seq / "frame_000"), "--config",
                  str(pipe_cfg), "--out", str(out), "--steps", "10",
                  "--learning-rate", "0.02", "--threads", threads])
            fit_outputs.add((out / "history.csv").read_bytes()
                            + (out / "detections.jsonl").read_bytes())
    ok = len(detect_outputs) == 1 and len(fit_outputs) == 1
    report(10, ok,
           f"detect outputs distinct across 2 runs x threads 1/2/8: {len(detect_outputs)}; "
           f"microfit outputs distinct: {len(fit_outputs)} (1 means bit-identical)")


def test_criterion_11_paper_shape():
    grid = VoxelGridSpec((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), (128, 128, 11), 256)
    decoder = DecoderConfig(num_queries=900, num_blocks=6, num_heads=8, num_points=4,
                            channels=256, num_classes=10, ffn_dim=512)
    config = PipelineConfig(grid=grid, depth=DepthSpec(64, 64.0), use_camera=True,
                            use_lidar=False, encoder_op="none", decoder=decoder, seed=0)
    scene = generate_scene(
        SceneConfig(n_objects=3, n_cameras=1, channels=256, placement_range=20.0,
                    ground_extent=30.0), seed=1)
    start = time.time()
    result = run_detection(scene, config)
    blocks = result.raw.decode.blocks
    ok = (
        len(blocks) == 6
        and all(b.class_logits.data.shape == (900, 10) for b in blocks)
        and all(b.box_params.data.shape == (900, 10) for b in blocks)
        and all(b.reference_out.data.shape == (900, 3) for b in blocks)
    )
    report(11, ok,
           f"paper-scale forward (900 queries, 6 blocks, C=256, 128x128x11, D=64) "
           f"in {time.time() - start:.0f}s; per-block prediction counts "
           f"{[b.class_logits.data.shape[0] for b in blocks]}")
