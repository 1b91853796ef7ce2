"""Readers for pose keypoints, onset annotations and raw frames.

Keypoint files are line-delimited JSON, one frame per line::

    {"frame": 0, "joints": [{"id": 0, "x": 961.2, "y": 402.0, "c": 0.93}, ...]}

Annotation files are a JSON array of objects with the keys ``video_id``,
``subject_id``, ``fps``, ``eeg_onset_s``, ``clinical_onset_s`` and
``duration_s``.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .exceptions import DataError, OrderingError, ParseError, SchemaError, ValidationError

N_JOINTS = 14
JOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
DEFAULT_CONFIDENCE_THRESHOLD = 0.3
NATIVE_FPS = 30


@dataclass(frozen=True)
class KeypointFrame:
    """Pose of one frame, indexed by joint id.

    ``xy`` has shape (14, 2) in pixels, ``confidence`` and ``present`` have
    shape (14,). Coordinates of low-confidence joints are kept; only the
    ``present`` flag is cleared.
    """

    frame_index: int
    xy: np.ndarray
    confidence: np.ndarray
    present: np.ndarray

    @property
    def joint_ids(self) -> np.ndarray:
        return np.arange(N_JOINTS)


@dataclass(frozen=True)
class OnsetAnnotation:
    video_id: str
    subject_id: str
    eeg_onset_s: float
    clinical_onset_s: float
    duration_s: float
    fps_native: float = NATIVE_FPS

    def __post_init__(self):
        if not 0 <= self.eeg_onset_s <= self.clinical_onset_s <= self.duration_s:
            raise ValidationError(
                f"{self.video_id}: expected 0 <= eeg_onset_s ({self.eeg_onset_s}) <= "
                f"clinical_onset_s ({self.clinical_onset_s}) <= duration_s ({self.duration_s})"
            )
        if self.fps_native <= 0:
            raise ValidationError(f"{self.video_id}: fps must be positive")

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "subject_id": self.subject_id,
            "fps": self.fps_native,
            "eeg_onset_s": self.eeg_onset_s,
            "clinical_onset_s": self.clinical_onset_s,
            "duration_s": self.duration_s,
        }


@dataclass(frozen=True)
class KeypointTrack:
    """Dense per-video keypoint arrays, convenient for cropping.

    Shapes: ``xy`` (N, 14, 2), ``confidence`` (N, 14), ``present`` (N, 14).
    """

    xy: np.ndarray
    confidence: np.ndarray
    present: np.ndarray

    def __len__(self):
        return self.xy.shape[0]

    @classmethod
    def from_frames(cls, frames: Sequence[KeypointFrame]) -> "KeypointTrack":
        if not frames:
            return cls(np.zeros((0, N_JOINTS, 2)), np.zeros((0, N_JOINTS)),
                       np.zeros((0, N_JOINTS), dtype=bool))
        return cls(
            xy=np.stack([f.xy for f in frames]),
            confidence=np.stack([f.confidence for f in frames]),
            present=np.stack([f.present for f in frames]),
        )

    def frames(self) -> list[KeypointFrame]:
        return [
            KeypointFrame(i, self.xy[i], self.confidence[i], self.present[i])
            for i in range(len(self))
        ]


def _parse_keypoint_line(raw: str, lineno: int, confidence_threshold: float) -> KeypointFrame:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
    if not isinstance(record, dict) or "frame" not in record or "joints" not in record:
        raise ParseError("expected an object with 'frame' and 'joints'", line=lineno)
    frame = record["frame"]
    if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
        raise ParseError(f"'frame' must be a non-negative integer, got {frame!r}", line=lineno)
    joints = record["joints"]
    if not isinstance(joints, list):
        raise ParseError("'joints' must be a list", line=lineno)
    if len(joints) != N_JOINTS:
        raise SchemaError(f"line {lineno}: frame {frame} has {len(joints)} joints, expected {N_JOINTS}")

    xy = np.zeros((N_JOINTS, 2))
    conf = np.zeros(N_JOINTS)
    seen = np.zeros(N_JOINTS, dtype=bool)
    for entry in joints:
        try:
            jid = entry["id"]
            x, y, c = float(entry["x"]), float(entry["y"]), float(entry["c"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"malformed joint entry {entry!r}", line=lineno) from None
        if not isinstance(jid, int) or not 0 <= jid < N_JOINTS:
            raise SchemaError(f"line {lineno}: joint id {jid!r} outside [0, {N_JOINTS})")
        if seen[jid]:
            raise SchemaError(f"line {lineno}: joint id {jid} repeated")
        if not 0.0 <= c <= 1.0:
            raise SchemaError(f"line {lineno}: confidence {c} outside [0, 1]")
        seen[jid] = True
        xy[jid] = (x, y)
        conf[jid] = c
    return KeypointFrame(frame, xy, conf, conf >= confidence_threshold)


def read_keypoints(path, confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> list[KeypointFrame]:
    """Read a keypoint file into frames ordered by frame index.

    Frame indices must start at 0 and increase by exactly one per line.
    Joints below ``confidence_threshold`` are flagged ``present=False``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"keypoint file not found: {path}")
    frames: list[KeypointFrame] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            kf = _parse_keypoint_line(raw, lineno, confidence_threshold)
            expected = frames[-1].frame_index + 1 if frames else 0
            if kf.frame_index != expected:
                if frames and kf.frame_index <= frames[-1].frame_index:
                    raise OrderingError(
                        f"line {lineno}: frame {kf.frame_index} does not follow frame "
                        f"{frames[-1].frame_index}"
                    )
                raise OrderingError(f"line {lineno}: expected frame {expected}, got {kf.frame_index}")
            frames.append(kf)
    return frames


def write_keypoints(path, track: KeypointTrack) -> None:
    """Write a keypoint file; coordinates are rounded to 1e-3 pixel."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(track)):
            joints = [
                {
                    "id": j,
                    "x": round(float(track.xy[i, j, 0]), 3),
                    "y": round(float(track.xy[i, j, 1]), 3),
                    "c": round(float(track.confidence[i, j]), 3),
                }
                for j in range(N_JOINTS)
            ]
            fh.write(json.dumps({"frame": i, "joints": joints}) + "\n")


_ANNOTATION_KEYS = {"video_id", "subject_id", "fps", "eeg_onset_s", "clinical_onset_s", "duration_s"}


def read_annotations(path) -> list[OnsetAnnotation]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=exc.lineno) from None
    if not isinstance(records, list):
        raise SchemaError("annotation file must contain a JSON array")
    out, seen = [], set()
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise SchemaError(f"annotation #{i} is not an object")
        missing = _ANNOTATION_KEYS - rec.keys()
        if missing:
            raise SchemaError(f"annotation #{i} is missing keys {sorted(missing)}")
        ann = OnsetAnnotation(
            video_id=str(rec["video_id"]),
            subject_id=str(rec["subject_id"]),
            eeg_onset_s=float(rec["eeg_onset_s"]),
            clinical_onset_s=float(rec["clinical_onset_s"]),
            duration_s=float(rec["duration_s"]),
            fps_native=float(rec["fps"]),
        )
        if ann.video_id in seen:
            raise ValidationError(f"duplicate annotation for video {ann.video_id}")
        seen.add(ann.video_id)
        out.append(ann)
    return out


def write_annotations(path, annotations: Iterable[OnsetAnnotation]) -> None:
    Path(path).write_text(json.dumps([a.to_dict() for a in annotations], indent=2), encoding="utf-8")


@runtime_checkable
class FrameSource(Protocol):
    """Random access to the frames of one video.

    Implementations return ``H x W x 3`` uint8 RGB arrays for indices
    ``0 .. len(source) - 1`` and must tolerate concurrent reads of distinct
    indices.
    """

    video_id: str
    height: int
    width: int

    def __len__(self) -> int: ...

    def __getitem__(self, index: int) -> np.ndarray: ...


class ArrayFrameSource:
    """Frames held in an array (or a ``np.memmap``) of shape (N, H, W, 3)."""

    def __init__(self, frames: np.ndarray, video_id: str = "video"):
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) frames, got {frames.shape}")
        self.frames = frames
        self.video_id = video_id
        self.height, self.width = int(frames.shape[1]), int(frames.shape[2])

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, index):
        if not 0 <= index < len(self):
            raise DataError(f"{self.video_id}: frame {index} outside [0, {len(self)})")
        return np.asarray(self.frames[index], dtype=np.uint8)

    @classmethod
    def from_npy(cls, path, video_id=None):
        path = Path(path)
        return cls(np.load(path, mmap_mode="r"), video_id or path.stem)


_NUMBERED = re.compile(r"(\d+)\.(png|jpg|jpeg|bmp)$", re.IGNORECASE)


class ImageDirectorySource:
    """Numbered image files (``000000.png``, ``000001.png``, ...) read lazily."""

    def __init__(self, directory, video_id: str | None = None):
        import cv2

        self._cv2 = cv2
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DataError(f"frame directory not found: {self.directory}")
        numbered = {}
        for p in self.directory.iterdir():
            m = _NUMBERED.search(p.name)
            if m:
                numbered[int(m.group(1))] = p
        if not numbered:
            raise DataError(f"no numbered frames in {self.directory}")
        n = len(numbered)
        if sorted(numbered) != list(range(n)):
            raise OrderingError(f"{self.directory}: frame numbers are not dense 0..{n - 1}")
        self._paths = [numbered[i] for i in range(n)]
        self.video_id = video_id or self.directory.name
        first = self[0]
        self.height, self.width = first.shape[:2]

    def __len__(self):
        return len(self._paths)

    def __getitem__(self, index):
        if not 0 <= index < len(self._paths):
            raise DataError(f"{self.video_id}: frame {index} outside [0, {len(self._paths)})")
        img = self._cv2.imread(str(self._paths[index]), self._cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"could not decode {self._paths[index]}")
        return self._cv2.cvtColor(img, self._cv2.COLOR_BGR2RGB)


class VideoFileSource:
    """Frames decoded from a video container through OpenCV.

    Decoding is serialized with a lock since a capture handle keeps a
    single read position.
    """

    def __init__(self, path, video_id: str | None = None):
        import cv2

        self._cv2 = cv2
        self.path = Path(path)
        if not self.path.is_file():
            raise DataError(f"video file not found: {self.path}")
        self._cap = cv2.VideoCapture(str(self.path))
        if not self._cap.isOpened():
            raise DataError(f"could not open {self.path}")
        self._lock = threading.Lock()
        self._n = int(self._cap.get(cv2.CAP_PROP_FRAME_COUNT))
        self.height = int(self._cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
        self.width = int(self._cap.get(cv2.CAP_PROP_FRAME_WIDTH))
        self.video_id = video_id or self.path.stem

    def __len__(self):
        return self._n

    def __getitem__(self, index):
        if not 0 <= index < self._n:
            raise DataError(f"{self.video_id}: frame {index} outside [0, {self._n})")
        with self._lock:
            self._cap.set(self._cv2.CAP_PROP_POS_FRAMES, index)
            ok, img = self._cap.read()
        if not ok:
            raise DataError(f"{self.video_id}: failed to decode frame {index}")
        return self._cv2.cvtColor(img, self._cv2.COLOR_BGR2RGB)


def open_frame_source(path, video_id: str | None = None) -> FrameSource:
    """Pick a frame-source adapter from what ``path`` points at."""
    path = Path(path)
    if path.is_dir():
        return ImageDirectorySource(path, video_id)
    if path.suffix == ".npy":
        return ArrayFrameSource.from_npy(path, video_id)
    return VideoFileSource(path, video_id)
