"""Cross-modality interaction: knowledge transfer and modality fusion.

Knowledge transfer samples the teacher and student encoder taps at object
query positions and penalizes their partial L2 distance; only the student
receives gradients.  Modality fusion sums the processed spaces and mixes
them with a single 1x1x1 convolution to the unified volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .modality import EncoderTap, VoxelGrid
from .numerics import Parameter, Tensor

__all__ = [
    "ModalitySelection",
    "FusionParams",
    "partial_l2",
    "knowledge_transfer_loss",
    "modality_switch_fuse",
]


@dataclass(frozen=True)
class ModalitySelection:
    """Which modality-specific spaces feed the final prediction."""

    use_camera: bool = True
    use_lidar: bool = True

    def __post_init__(self):
        if not (self.use_camera or self.use_lidar):
            raise ValueError("at least one modality must be selected")


@dataclass
class FusionParams:
    weight: Parameter  # (1, 1, 1, C, C)
    bias: Parameter  # (C,)

    @staticmethod
    def create(rng: np.random.Generator, channels: int, prefix: str = "fusion"):
        w = 0.02 * rng.standard_normal((1, 1, 1, channels, channels))
        w[0, 0, 0] += np.eye(channels)
        return FusionParams(
            weight=Parameter(f"{prefix}.weight", w),
            bias=Parameter(f"{prefix}.bias", np.zeros(channels)),
        )


def partial_l2(teacher, student) -> Tensor:
    """Squared distance that waives channels the teacher deems inactive.

    Per channel: zero when t <= 0 and s <= t, otherwise (t - s)^2; summed
    over the trailing channel axis (leading axes are preserved).  The
    student side is differentiable; the teacher is treated as data.
    """
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    s = student if isinstance(student, Tensor) else Tensor(student)
    if t.shape != s.shape:
        raise ValueError(f"teacher/student shapes differ: {t.shape} vs {s.shape}")
    active = ~((t <= 0.0) & (s.data <= t))
    diff = (t - s.data) * active
    out = (diff * diff).sum(axis=-1)

    def backward(g):
        nm.accumulate_grad(s, np.expand_dims(g, -1) * (2.0 * (s.data - t) * active))

    return nm.record_op(out, (s,), backward)


def knowledge_transfer_loss(
    teacher: EncoderTap, student: EncoderTap, query_positions: np.ndarray
) -> Tensor:
    """Mean partial-L2 distance between taps sampled at query grid positions.

    ``query_positions`` is (N, 3) in continuous grid index coordinates.
    Gradients flow to the student tap only.
    """
    positions = np.asarray(query_positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
        raise ValueError(f"query positions must be (N, 3) with N >= 1, got {positions.shape}")
    if tuple(teacher.features.shape) != tuple(student.features.shape):
        raise ValueError("teacher and student taps must share a shape")
    t_samples = nm.trilinear_sample(Tensor(teacher.features.data), Tensor(positions))
    s_samples = nm.trilinear_sample(student.features, Tensor(positions))
    return nm.tmean(partial_l2(t_samples, s_samples))


def modality_switch_fuse(
    vi: VoxelGrid | None,
    vp: VoxelGrid | None,
    selection: ModalitySelection,
    params: FusionParams,
) -> VoxelGrid:
    """Select the active spaces, sum them, and fuse with one convolution."""
    chosen = []
    if selection.use_camera:
        if vi is None:
            raise ValueError("selection requests the camera space but it is absent")
        chosen.append(vi)
    if selection.use_lidar:
        if vp is None:
            raise ValueError("selection requests the LiDAR space but it is absent")
        chosen.append(vp)
    if len(chosen) == 2 and chosen[0].spec != chosen[1].spec:
        raise ValueError("fused spaces must share a grid spec")
    combined = chosen[0].features
    for other in chosen[1:]:
        combined = nm.add(combined, other.features)
    fused = nm.conv(combined, params.weight, params.bias)
    return VoxelGrid(spec=chosen[0].spec, features=fused)
