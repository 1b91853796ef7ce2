"""Full-frame ablation: the same encoder and head, fed the whole frame.

Each segment becomes a single "joint" whose clip is the downsized full
frame, so the model can use background and distractor motion as well as the
figure. Positions are constant zeros. The acceptance suite pairs this with
a reference encoder at 96 px input and (5, 16, 16) tubelets.
"""

from __future__ import annotations

import numpy as np

from jointseize.model import SegmentBatch, resize_clips
from jointseize.segmenter import build_segments, label_segment


def full_frame_batch(records, stride_s: float = 5.0, size: int = 96) -> SegmentBatch:
    clips, labels, subjects, vids, starts = [], [], [], [], []
    for rec in records:
        for seg in build_segments(rec.annotation, stride_s):
            target = label_segment(seg, rec.annotation).target
            if target is None:
                continue
            frames = np.stack([rec.source[int(i)] for i in seg.frame_indices])
            clips.append(resize_clips(frames, size)[None])
            labels.append(target)
            subjects.append(rec.subject_id)
            vids.append(rec.video_id)
            starts.append(seg.start_s)
    clips = np.stack(clips)
    positions = np.zeros(clips.shape[:3] + (3,))
    return SegmentBatch(clips, positions, np.asarray(labels, np.int64), subjects, vids, starts)
