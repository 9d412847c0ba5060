"""On-disk interchange: JSON-lines boxes, JSON metric reports, CSV tables.

Every writer goes through a temp-file + rename so partially written outputs
never appear under the final name.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .metrics import MetricsReport
from .postprocess import TrackerState
from .scene.types import Box3D

__all__ = [
    "METRICS_SCHEMA_VERSION",
    "atomic_write_text",
    "write_boxes_jsonl",
    "read_boxes_jsonl",
    "write_tracks_jsonl",
    "write_metrics_json",
    "read_metrics_json",
]

METRICS_SCHEMA_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _box_record(frame: int, box: Box3D, track_id: int | None = None) -> dict:
    record = {
        "frame": frame,
        "class_id": box.class_id,
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "velocity": list(box.velocity),
        "score": box.score,
    }
    if track_id is not None:
        record["id"] = track_id
    return record


def write_boxes_jsonl(path, frames: list[list[Box3D]]) -> None:
    """One detection per line, tagged with its frame index."""
    lines = [
        json.dumps(_box_record(f, box))
        for f, frame in enumerate(frames)
        for box in frame
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_boxes_jsonl(path) -> list[list[Box3D]]:
    """Frames of boxes, indexed by the ``frame`` field (gaps become empty)."""
    path = Path(path)
    if not path.is_file():
        raise IOError(f"missing detections file {path}")
    frames: dict[int, list[Box3D]] = {}
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IOError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
        box = Box3D(
            center=tuple(rec["center"]),
            size=tuple(rec["size"]),
            yaw=float(rec["yaw"]),
            velocity=tuple(rec["velocity"]),
            class_id=int(rec["class_id"]),
            score=float(rec["score"]),
        )
        frames.setdefault(int(rec["frame"]), []).append(box)
    if not frames:
        return []
    return [frames.get(i, []) for i in range(max(frames) + 1)]


def write_tracks_jsonl(path, states: list[TrackerState]) -> None:
    """Tracks updated in each frame, one box per line with its track id."""
    lines = []
    for f, state in enumerate(states):
        updated = set(state.updated_ids)
        for track in state.tracks:
            if track.track_id in updated:
                lines.append(json.dumps(_box_record(f, track.box, track.track_id)))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def write_metrics_json(path, report: MetricsReport) -> None:
    payload = {"schema_version": METRICS_SCHEMA_VERSION}
    payload.update(report.as_dict())
    atomic_write_text(path, json.dumps(payload, indent=1))


def read_metrics_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IOError(f"missing metrics file {path}")
    data = json.loads(path.read_text())
    version = data.get("schema_version")
    if version != METRICS_SCHEMA_VERSION:
        raise ValueError(
            f"metrics schema_version: expected {METRICS_SCHEMA_VERSION}, found {version!r}"
        )
    return data
