"""Joint-centred clip extraction and the (J, T, 3) positional tensor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError, ShapeError
from .ingestion import N_JOINTS, FrameSource, KeypointTrack
from .segmenter import SegmentSpec

CROP_SIZE = 120


@dataclass
class JointClipSet:
    """Per-joint clips of one segment.

    ``clips`` is (J, T, h, w, 3) uint8, ``coords`` (J, T, 2) holds the crop
    centres in original-frame pixels after temporal hold-filling, and
    ``present`` (J, T) the detector presence flags before filling.
    """

    clips: np.ndarray
    coords: np.ndarray
    present: np.ndarray
    frame_height: int
    frame_width: int

    @property
    def n_joints(self) -> int:
        return self.clips.shape[0]

    @property
    def n_frames(self) -> int:
        return self.clips.shape[1]


@dataclass
class PositionalTensor:
    """(J, T, 3): x / W, y / H and joint identity j / (J - 1)."""

    values: np.ndarray
    fully_missing: tuple = field(default_factory=tuple)

    @property
    def flagged(self) -> bool:
        return bool(self.fully_missing)


def round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def crop_window(frame: np.ndarray, cx: int, cy: int, size: int = CROP_SIZE) -> np.ndarray:
    """``size x size`` window with columns ``[cx - size//2, cx + size - size//2)``.

    Parts falling outside the frame are zero.
    """
    H, W = frame.shape[:2]
    x0, y0 = cx - size // 2, cy - size // 2
    out = np.zeros((size, size) + frame.shape[2:], dtype=frame.dtype)
    fx0, fx1 = max(x0, 0), min(x0 + size, W)
    fy0, fy1 = max(y0, 0), min(y0 + size, H)
    if fx0 < fx1 and fy0 < fy1:
        out[fy0 - y0:fy1 - y0, fx0 - x0:fx1 - x0] = frame[fy0:fy1, fx0:fx1]
    return out


def hold_fill(xy: np.ndarray, present: np.ndarray, fallback) -> tuple[np.ndarray, bool]:
    """Fill absent steps with the most recent present coordinate.

    Leading gaps take the first present coordinate. If nothing is present
    every step gets ``fallback`` and the second return value is True.
    """
    xy = np.array(xy, dtype=np.float64)
    idx = np.flatnonzero(present)
    if idx.size == 0:
        xy[:] = fallback
        return xy, True
    last = xy[idx[0]].copy()
    for t in range(xy.shape[0]):
        if present[t]:
            last = xy[t].copy()
        else:
            xy[t] = last
    return xy, False


def _segment_keypoints(track: KeypointTrack, seg: SegmentSpec):
    idx = np.asarray(seg.frame_indices)
    if idx.size and idx.max() >= len(track):
        raise DataError(
            f"{seg.video_id}: keypoints cover {len(track)} frames, segment needs frame {idx.max()}"
        )
    return track.xy[idx], track.present[idx]


def _load_frames(source: FrameSource, seg: SegmentSpec) -> list[np.ndarray]:
    n = len(source)
    frames = []
    for i in seg.frame_indices:
        if i >= n:
            raise DataError(f"{seg.video_id}: frame {i} beyond source length {n}")
        frames.append(source[i])
    return frames


def extract_joint_clip(source: FrameSource, seg: SegmentSpec, keypoints: KeypointTrack, joint_id: int,
                       crop_size: int = CROP_SIZE, frames=None):
    """Crop one joint across the segment.

    Returns ``(clip, coords, present)`` with shapes (T, h, w, 3), (T, 2), (T,).
    """
    if frames is None:
        frames = _load_frames(source, seg)
    xy, present = _segment_keypoints(keypoints, seg)
    centre = (source.width / 2.0, source.height / 2.0)
    coords, _ = hold_fill(xy[:, joint_id], present[:, joint_id], centre)
    cxy = round_half_up(coords)
    clip = np.stack([crop_window(f, cx, cy, crop_size) for f, (cx, cy) in zip(frames, cxy)])
    return clip, coords, present[:, joint_id].copy()


def crop_segment(source: FrameSource, seg: SegmentSpec, keypoints: KeypointTrack,
                 crop_size: int = CROP_SIZE) -> JointClipSet:
    """Crop all joints of a segment, reading each frame once."""
    frames = _load_frames(source, seg)
    clips, coords, present = [], [], []
    for j in range(keypoints.xy.shape[1]):
        c, xy, p = extract_joint_clip(source, seg, keypoints, j, crop_size, frames=frames)
        clips.append(c)
        coords.append(xy)
        present.append(p)
    return JointClipSet(np.stack(clips), np.stack(coords), np.stack(present),
                        int(source.height), int(source.width))


def build_positional_tensor(clipset: JointClipSet, H: int | None = None, W: int | None = None) -> PositionalTensor:
    """Normalised joint coordinates plus identity channel, shape (J, T, 3).

    Joints never detected in the segment are placed at (0.5, 0.5) and listed
    in ``fully_missing``.
    """
    H = clipset.frame_height if H is None else H
    W = clipset.frame_width if W is None else W
    J, T = clipset.coords.shape[:2]
    values = np.zeros((J, T, 3))
    missing = []
    for j in range(J):
        filled, empty = hold_fill(clipset.coords[j], clipset.present[j], (W / 2.0, H / 2.0))
        if empty:
            missing.append(j)
        values[j, :, 0] = filled[:, 0] / W
        values[j, :, 1] = filled[:, 1] / H
        values[j, :, 2] = j / (J - 1) if J > 1 else 0.0
    np.clip(values[..., :2], 0.0, 1.0, out=values[..., :2])
    return PositionalTensor(values, tuple(missing))


class ClipArchive:
    """Directory of per-segment ``.npz`` records plus an ``index.json``.

    Each record holds ``clips``, ``coords``, ``present``, ``positions`` and
    the segment metadata (``video_id``, ``subject_id``, ``start_s``,
    ``label``).
    """

    INDEX = "index.json"

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / self.INDEX
        self.records = json.loads(index_path.read_text()) if index_path.exists() else []

    def __len__(self):
        return len(self.records)

    @staticmethod
    def record_name(video_id: str, start_s: float) -> str:
        return f"{video_id}__{start_s:010.3f}.npz"

    def add(self, clipset: JointClipSet, positions: PositionalTensor, *, video_id, subject_id, start_s, label):
        self.root.mkdir(parents=True, exist_ok=True)
        name = self.record_name(video_id, start_s)
        np.savez_compressed(
            self.root / name,
            clips=clipset.clips, coords=clipset.coords, present=clipset.present,
            positions=positions.values,
            frame_shape=np.array([clipset.frame_height, clipset.frame_width]),
        )
        meta = {"file": name, "video_id": video_id, "subject_id": subject_id,
                "start_s": float(start_s), "label": str(label),
                "fully_missing": list(positions.fully_missing)}
        self.records = [r for r in self.records if r["file"] != name] + [meta]
        return meta

    def flush(self):
        self.root.mkdir(parents=True, exist_ok=True)
        ordered = sorted(self.records, key=lambda r: (r["video_id"], r["start_s"]))
        (self.root / self.INDEX).write_text(json.dumps(ordered, indent=1))
        self.records = ordered

    def load(self, i: int):
        meta = self.records[i]
        with np.load(self.root / meta["file"]) as z:
            h, w = (int(v) for v in z["frame_shape"])
            clipset = JointClipSet(z["clips"], z["coords"], z["present"], h, w)
            positions = PositionalTensor(z["positions"], tuple(meta.get("fully_missing", ())))
        return clipset, positions, meta


def check_clipset(clipset: JointClipSet, n_joints: int = N_JOINTS):
    if clipset.clips.ndim != 5 or clipset.clips.shape[0] != n_joints or clipset.clips.shape[-1] != 3:
        raise ShapeError(f"expected ({n_joints}, T, h, w, 3) clips, got {clipset.clips.shape}")
