"""Glue from videos (source + keypoints + annotation) to labeled segment batches."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cropper import CROP_SIZE, build_positional_tensor, crop_segment
from .exceptions import DataError
from .ingestion import (DEFAULT_CONFIDENCE_THRESHOLD, FrameSource, KeypointTrack, OnsetAnnotation,
                        open_frame_source, read_annotations, read_keypoints)
from .model import SegmentBatch, resize_clips
from .segmenter import SegmentLabel, build_segments, label_segment

logger = logging.getLogger(__name__)

EXCLUDED = -1


@dataclass
class VideoRecord:
    video_id: str
    subject_id: str
    annotation: OnsetAnnotation
    source: FrameSource
    track: KeypointTrack


def segment_video(video: VideoRecord, stride_s: float = 5.0, crop_size: int = CROP_SIZE,
                  store_size: int | None = None, keep_excluded: bool = False,
                  on_segment=None) -> tuple[SegmentBatch, Counter]:
    """Segment, label and crop one video.

    Excluded segments are dropped unless ``keep_excluded``, in which case
    their label is -1. ``store_size`` downsizes clips right after cropping.
    ``on_segment(seg, label, clipset, positions)`` is called for every kept
    segment before resizing, e.g. to fill a clip archive.
    """
    ann = video.annotation
    if len(video.track) < len(video.source):
        raise DataError(f"{video.video_id}: keypoints cover {len(video.track)} of {len(video.source)} frames")
    counts = Counter()
    clips, positions, labels, starts = [], [], [], []
    for seg in build_segments(ann, stride_s):
        label = label_segment(seg, ann)
        counts[label.value] += 1
        if label is SegmentLabel.EXCLUDED and not keep_excluded:
            continue
        clipset = crop_segment(video.source, seg, video.track, crop_size)
        pos = build_positional_tensor(clipset)
        if pos.flagged:
            logger.warning("%s @ %.1fs: joints %s never detected", video.video_id, seg.start_s,
                           list(pos.fully_missing))
            counts["quality_flagged"] += 1
        if on_segment is not None:
            on_segment(seg, label, clipset, pos)
        c = clipset.clips if store_size is None else resize_clips(clipset.clips, store_size)
        clips.append(c)
        positions.append(pos.values)
        labels.append(EXCLUDED if label.target is None else label.target)
        starts.append(seg.start_s)
    n = len(clips)
    if n == 0:
        size = store_size or crop_size
        batch = SegmentBatch(np.zeros((0, 14, 30, size, size, 3), np.uint8), np.zeros((0, 14, 30, 3)),
                             np.zeros(0, np.int64))
    else:
        batch = SegmentBatch(np.stack(clips), np.stack(positions), np.asarray(labels, np.int64),
                             [video.subject_id] * n, [video.video_id] * n, starts)
    return batch, counts


def segment_videos(videos, **kwargs) -> tuple[SegmentBatch, Counter]:
    batches, total = [], Counter()
    for v in videos:
        b, c = segment_video(v, **kwargs)
        batches.append(b)
        total.update(c)
    return SegmentBatch.concat(batches), total


def load_video_records(root, annotations_path=None, frames_dir="frames", keypoints_dir="keypoints",
                       confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> list[VideoRecord]:
    """Open every annotated video under a dataset directory.

    Expects ``annotations.json``, ``keypoints/<video_id>.jsonl`` and frames at
    ``frames/<video_id>`` (image directory), ``frames/<video_id>.npy`` or a
    video file ``frames/<video_id>.<ext>``.
    """
    root = Path(root)
    anns = read_annotations(annotations_path or root / "annotations.json")
    records = []
    for ann in anns:
        kp_path = root / keypoints_dir / f"{ann.video_id}.jsonl"
        if not kp_path.exists():
            raise DataError(f"missing keypoints for video {ann.video_id} ({kp_path})")
        frame_path = root / frames_dir / ann.video_id
        if not frame_path.exists():
            candidates = sorted((root / frames_dir).glob(f"{ann.video_id}.*"))
            if not candidates:
                raise DataError(f"missing frames for video {ann.video_id}")
            frame_path = candidates[0]
        track = KeypointTrack.from_frames(read_keypoints(kp_path, confidence_threshold))
        source = open_frame_source(frame_path, ann.video_id)
        records.append(VideoRecord(ann.video_id, ann.subject_id, ann, source, track))
    return records


def records_from_synthetic(subjects) -> list[VideoRecord]:
    return [
        VideoRecord(v.video_id, v.subject_id, v.annotation, v.source, v.track)
        for s in subjects for v in s.videos
    ]
