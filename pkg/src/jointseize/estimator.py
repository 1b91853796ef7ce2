"""scikit-learn style wrapper around the joint-attention model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_segment_batch
from .encoder import EncoderAdapter, build_encoder
from .lora import LoraConfig
from .trainer import HeadConfig, TrainConfig, predict_logits, sigmoid, train


class JointAttentionClassifier(ClassifierMixin, BaseEstimator):
    """Segment classifier: shared clip encoder, cross-joint attention, linear logit.

    ``X`` is a :class:`~jointseize.model.SegmentBatch` (or a
    ``(clips, positions)`` pair); ``y`` holds 0 for interictal and 1 for
    ictal segments.

    Parameters
    ----------
    encoder : str or EncoderAdapter
        Backend name for :func:`build_encoder` or a ready adapter. An adapter
        is copied at fit time and never modified.
    encoder_params : dict, optional
        Keyword arguments for :func:`build_encoder`.
    mode : {"frozen", "lora", "full"}
    threshold : float
        Probability at or above which :meth:`predict` returns 1.
    """

    def __init__(self, encoder="reference", encoder_params=None, heads=4, depth=1, pooling="mean",
                 head_dropout=0.0, mode="frozen", epochs=30, batch_size=16, lr=1e-4, lr_lora=5e-5,
                 weight_decay=1e-2, patience=5, class_weighting=True, lora_rank=8, lora_alpha=16.0,
                 lora_dropout=0.05, threshold=0.5, random_state=0):
        self.encoder = encoder
        self.encoder_params = encoder_params
        self.heads = heads
        self.depth = depth
        self.pooling = pooling
        self.head_dropout = head_dropout
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_lora = lr_lora
        self.weight_decay = weight_decay
        self.patience = patience
        self.class_weighting = class_weighting
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lora_dropout = lora_dropout
        self.threshold = threshold
        self.random_state = random_state

    def _make_encoder(self) -> EncoderAdapter:
        if isinstance(self.encoder, EncoderAdapter):
            return self.encoder
        return build_encoder(self.encoder, **(self.encoder_params or {}))

    def _configs(self):
        cfg = TrainConfig(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          lr_lora=self.lr_lora, weight_decay=self.weight_decay,
                          seed=int(self.random_state or 0), patience=self.patience,
                          class_weighting=self.class_weighting)
        head = HeadConfig(self.heads, self.depth, self.pooling, self.head_dropout)
        lora = LoraConfig(rank=self.lora_rank, alpha=self.lora_alpha, dropout=self.lora_dropout)
        return cfg, head, lora

    def fit(self, X, y=None, eval_set=None):
        """Train on ``X``; ``eval_set=(X_val, y_val)`` drives early stopping.

        Subject ids carried by the batches are checked for train/validation
        overlap.
        """
        batch, _ = check_segment_batch(X, y)
        val = None
        if eval_set is not None:
            val, _ = check_segment_batch(*eval_set) if isinstance(eval_set, tuple) else check_segment_batch(eval_set)
        cfg, head_cfg, lora_cfg = self._configs()
        result = train(batch, val, self._make_encoder(), cfg, head_cfg, lora_cfg)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(batch.clips.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw logits, one per segment."""
        check_is_fitted(self, "model_")
        batch, _ = check_segment_batch(X)
        return predict_logits(self.model_, batch)

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def score(self, X, y, sample_weight=None):
        batch, labels = check_segment_batch(X, y)
        return super().score(batch, labels, sample_weight)
