"""Segment batches and the end-to-end joint-attention network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import EncoderAdapter
from .exceptions import ShapeError
from .fusion import FusionHead


@dataclass
class SegmentBatch:
    """Model input for ``n`` segments.

    ``clips`` is (n, J, T, h, w, 3) uint8 and ``positions`` (n, J, T, 3).
    The metadata lists are optional but, when present, have length ``n``.
    """

    clips: np.ndarray
    positions: np.ndarray
    labels: np.ndarray | None = None
    subjects: list = field(default_factory=list)
    video_ids: list = field(default_factory=list)
    starts: list = field(default_factory=list)

    def __len__(self):
        return self.clips.shape[0]

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])

        def pick(seq):
            return [seq[i] for i in idx] if seq else []

        return SegmentBatch(
            self.clips[idx], self.positions[idx],
            None if self.labels is None else self.labels[idx],
            pick(self.subjects), pick(self.video_ids), pick(self.starts),
        )

    @classmethod
    def concat(cls, batches):
        batches = [b for b in batches if len(b)]
        labels = None
        if batches and all(b.labels is not None for b in batches):
            labels = np.concatenate([b.labels for b in batches])
        return cls(
            np.concatenate([b.clips for b in batches]),
            np.concatenate([b.positions for b in batches]),
            labels,
            sum((b.subjects for b in batches), []),
            sum((b.video_ids for b in batches), []),
            sum((b.starts for b in batches), []),
        )

    def where_subjects(self, subjects) -> "SegmentBatch":
        keep = set(subjects)
        return self[[i for i, s in enumerate(self.subjects) if s in keep]]


def resize_clips(clips: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (antialiased) spatial resize of uint8 clips (..., h, w, 3)."""
    lead = clips.shape[:-3]
    h, w = clips.shape[-3:-1]
    if (h, w) == (size, size):
        return clips
    x = torch.from_numpy(np.ascontiguousarray(clips).reshape(-1, h, w, 3)).permute(0, 3, 1, 2).float()
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=min(h, w) > size)
    x = x.round_().clamp_(0, 255).to(torch.uint8).permute(0, 2, 3, 1).numpy()
    return x.reshape(*lead, size, size, 3)


class JointAttentionModel(nn.Module):
    """Shared clip encoder over all joints followed by the fusion head."""

    def __init__(self, encoder: EncoderAdapter, head: FusionHead):
        super().__init__()
        if encoder.d != head.d:
            raise ShapeError(f"encoder width {encoder.d} != head width {head.d}")
        self.encoder = encoder
        self.head = head

    def encode(self, clips) -> torch.Tensor:
        """(B, J, T, h, w, 3) clips -> (B, J, d) motion tokens."""
        clips = torch.as_tensor(clips) if not torch.is_tensor(clips) else clips
        if clips.ndim != 6:
            raise ShapeError(f"expected (B, J, T, h, w, 3) clips, got {tuple(clips.shape)}")
        B, J = clips.shape[:2]
        flat = clips.reshape(B * J, *clips.shape[2:])
        return self.encoder(self.encoder.preprocess(flat)).reshape(B, J, -1)

    def forward(self, clips, positions, return_weights: bool = False):
        positions = torch.as_tensor(positions, dtype=self.head.positional.linear.weight.dtype)
        return self.head(self.encode(clips), positions, return_weights=return_weights)
