"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError, ShapeError
from .ingestion import N_JOINTS
from .model import SegmentBatch


def check_segment_batch(X, y=None, *, n_joints: int = N_JOINTS) -> tuple[SegmentBatch, np.ndarray | None]:
    """Coerce ``X`` (and optional ``y``) into a validated :class:`SegmentBatch`.

    ``X`` may be a SegmentBatch, a ``(clips, positions)`` pair or a mapping
    with ``clips`` and ``positions`` keys. Labels in ``y`` override any held
    by the batch and must be 0/1.
    """
    if isinstance(X, SegmentBatch):
        batch = X
    elif isinstance(X, dict):
        try:
            batch = SegmentBatch(np.asarray(X["clips"]), np.asarray(X["positions"]))
        except KeyError as exc:
            raise ShapeError(f"X mapping is missing {exc.args[0]!r}") from None
    elif isinstance(X, (tuple, list)) and len(X) == 2:
        batch = SegmentBatch(np.asarray(X[0]), np.asarray(X[1]))
    else:
        raise ShapeError(f"cannot interpret X of type {type(X).__name__} as segments")

    clips, pos = batch.clips, batch.positions
    if clips.ndim != 6 or clips.shape[-1] != 3:
        raise ShapeError(f"clips must be (n, J, T, h, w, 3), got {clips.shape}")
    if clips.dtype != np.uint8:
        raise ShapeError(f"clips must be uint8, got {clips.dtype}")
    if clips.shape[1] != n_joints:
        raise ShapeError(f"expected {n_joints} joints, got {clips.shape[1]}")
    if pos.shape != (clips.shape[0], n_joints, clips.shape[2], 3):
        raise ShapeError(f"positions must be {(clips.shape[0], n_joints, clips.shape[2], 3)}, got {pos.shape}")
    if not np.isfinite(pos).all():
        raise DataError("positions contain non-finite values")

    labels = None
    if y is not None:
        labels = np.asarray(y)
        if labels.ndim != 1 or labels.shape[0] != len(batch):
            raise ShapeError(f"y must be 1-d with {len(batch)} entries, got {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 (interictal) or 1 (ictal)")
        labels = labels.astype(np.int64)
        batch = SegmentBatch(batch.clips, batch.positions, labels, batch.subjects, batch.video_ids, batch.starts)
    elif batch.labels is not None:
        labels = np.asarray(batch.labels)
    return batch, labels
