"""Fixed-length segments, onset-based labels and subject-wise splits."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ValidationError
from .ingestion import NATIVE_FPS, OnsetAnnotation

SEGMENT_LENGTH_S = 5.0
TARGET_FPS = 6
ICTAL_WINDOW_S = 40.0
# Tolerance for float start times produced by repeated stride addition.
_EPS = 1e-9


class SegmentLabel(str, enum.Enum):
    INTERICTAL = "interictal"
    ICTAL = "ictal"
    EXCLUDED = "excluded"

    @property
    def target(self) -> int | None:
        """Binary training target, ``None`` for excluded segments."""
        return {"interictal": 0, "ictal": 1}.get(self.value)


@dataclass(frozen=True)
class SegmentSpec:
    video_id: str
    start_s: float
    length_s: float = SEGMENT_LENGTH_S
    native_fps: float = NATIVE_FPS
    target_fps: float = TARGET_FPS
    frame_indices: tuple = ()

    @property
    def end_s(self) -> float:
        return self.start_s + self.length_s

    @property
    def n_frames(self) -> int:
        return len(self.frame_indices)


def downsample_stride(native_fps: float, target_fps: float) -> int:
    ratio = native_fps / target_fps
    if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
        raise ConfigurationError(
            f"native fps {native_fps} is not an integer multiple of target fps {target_fps}"
        )
    return int(round(ratio))


def segment_frame_indices(start_s, length_s=SEGMENT_LENGTH_S, native_fps=NATIVE_FPS,
                          target_fps=TARGET_FPS) -> tuple:
    """Native frame indices kept after downsampling, starting at the first frame."""
    step = downsample_stride(native_fps, target_fps)
    n = length_s * target_fps
    if abs(n - round(n)) > 1e-9:
        raise ConfigurationError(f"{length_s} s at {target_fps} fps is not a whole number of frames")
    first = int(round(start_s * native_fps))
    return tuple(first + step * k for k in range(int(round(n))))


def build_segments(annotation: OnsetAnnotation, stride_s: float, length_s: float = SEGMENT_LENGTH_S,
                   target_fps: float = TARGET_FPS) -> list[SegmentSpec]:
    """Tile ``[0, duration - length]`` with segment starts every ``stride_s`` seconds.

    Videos shorter than one segment yield an empty list.
    """
    if stride_s <= 0:
        raise ConfigurationError(f"stride_s must be positive, got {stride_s}")
    last = annotation.duration_s - length_s
    if last < -_EPS:
        return []
    n = int(np.floor(last / stride_s + _EPS)) + 1
    segments = []
    for k in range(n):
        start = round(k * stride_s, 9)
        segments.append(SegmentSpec(
            video_id=annotation.video_id,
            start_s=start,
            length_s=length_s,
            native_fps=annotation.fps_native,
            target_fps=target_fps,
            frame_indices=segment_frame_indices(start, length_s, annotation.fps_native, target_fps),
        ))
    return segments


def label_segment(seg: SegmentSpec, ann: OnsetAnnotation, ictal_window_s: float = ICTAL_WINDOW_S) -> SegmentLabel:
    """Interictal if the segment ends by EEG onset; ictal if it starts within
    ``ictal_window_s`` after clinical onset; excluded otherwise."""
    if seg.video_id != ann.video_id:
        raise ValidationError(f"segment of {seg.video_id} labeled with annotation of {ann.video_id}")
    if seg.end_s <= ann.eeg_onset_s + _EPS:
        return SegmentLabel.INTERICTAL
    if ann.clinical_onset_s - _EPS <= seg.start_s < ann.clinical_onset_s + ictal_window_s - _EPS:
        return SegmentLabel.ICTAL
    return SegmentLabel.EXCLUDED


@dataclass
class SplitManifest:
    """Subject-wise partition.

    ``train_subjects`` is the training-and-validation pool; ``val_subjects``
    is the subset of it held out for model selection.
    """

    train_subjects: list
    test_subjects: list
    seed: int
    val_subjects: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ValidationError(f"subjects in both train and test: {sorted(overlap)}")
        if not set(self.val_subjects) <= set(self.train_subjects):
            raise ValidationError("validation subjects must come from the training pool")

    @property
    def fit_subjects(self) -> list:
        return [s for s in self.train_subjects if s not in set(self.val_subjects)]

    def role_of(self, subject_id) -> str:
        if subject_id in self.test_subjects:
            return "test"
        if subject_id in self.val_subjects:
            return "val"
        if subject_id in self.train_subjects:
            return "train"
        raise KeyError(subject_id)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_subjects": list(self.train_subjects),
            "val_subjects": list(self.val_subjects),
            "test_subjects": list(self.test_subjects),
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            train_subjects=list(d["train_subjects"]),
            test_subjects=list(d["test_subjects"]),
            seed=int(d["seed"]),
            val_subjects=list(d.get("val_subjects", [])),
            counts=dict(d.get("counts", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def count_labels(subject_labels: Iterable[tuple], manifest: SplitManifest) -> dict:
    """Per-split label counts from ``(subject_id, SegmentLabel)`` pairs."""
    counts = {role: Counter() for role in ("train", "val", "test")}
    for subject, label in subject_labels:
        counts[manifest.role_of(subject)][SegmentLabel(label).value] += 1
    return {role: dict(sorted(c.items())) for role, c in counts.items()}


def make_split(subjects: Sequence, n_test: int, seed: int, n_val: int = 1,
               subject_labels: Iterable[tuple] | None = None) -> SplitManifest:
    """Shuffle subjects with ``seed`` and hold out ``n_test`` of them for testing.

    ``n_val`` of the remaining subjects are marked for validation. When
    ``subject_labels`` is given the manifest carries per-split label counts.
    """
    unique = sorted(set(subjects))
    if n_test < 1 or n_test >= len(unique):
        raise ConfigurationError(f"n_test={n_test} must be in [1, {len(unique)}) for {len(unique)} subjects")
    if n_val < 0 or n_val >= len(unique) - n_test:
        raise ConfigurationError(f"n_val={n_val} leaves no subjects for fitting")
    order = np.random.default_rng(seed).permutation(len(unique))
    shuffled = [unique[i] for i in order]
    test = sorted(shuffled[:n_test])
    val = sorted(shuffled[n_test:n_test + n_val])
    train = sorted(shuffled[n_test:])
    manifest = SplitManifest(train_subjects=train, test_subjects=test, seed=seed, val_subjects=val)
    if subject_labels is not None:
        manifest.counts = count_labels(subject_labels, manifest)
    return manifest
