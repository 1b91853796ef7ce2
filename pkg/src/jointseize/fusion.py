"""Positional projection, cross-joint attention, pooling and classification."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError, ShapeError


class PositionalProjection(nn.Module):
    """Affine map from a flattened per-joint (T, 3) positional slice to R^d."""

    def __init__(self, n_frames: int, d: int):
        super().__init__()
        self.n_frames = n_frames
        self.linear = nn.Linear(n_frames * 3, d)

    def forward(self, pos: torch.Tensor) -> torch.Tensor:
        if pos.shape[-2:] != (self.n_frames, 3):
            raise ShapeError(f"positional slices must be ({self.n_frames}, 3), got {tuple(pos.shape[-2:])}")
        return self.linear(pos.flatten(-2))


class AttentionBlock(nn.Module):
    """Multi-head self-attention over joint tokens, without residual or norm."""

    def __init__(self, d: int, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigurationError(f"d={d} must be divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def attention_weights(self, z: torch.Tensor) -> torch.Tensor:
        """Row-stochastic weights of shape (..., heads, J, J)."""
        q, k = self._split(self.q_proj(z)), self._split(self.k_proj(z))
        scale = math.sqrt(self.d // self.heads)
        return torch.softmax(q @ k.transpose(-2, -1) / scale, dim=-1)

    def _split(self, t):
        *lead, J, d = t.shape
        return t.reshape(*lead, J, self.heads, d // self.heads).transpose(-3, -2)

    def forward(self, z: torch.Tensor, return_weights: bool = False):
        weights = self.attention_weights(z)
        v = self._split(self.v_proj(z))
        out = self.dropout(weights) @ v
        out = out.transpose(-3, -2).reshape(z.shape)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class ClassifierHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(d, 1)

    def forward(self, u):
        return self.linear(u).squeeze(-1)


def pool(attended: torch.Tensor, method: str = "mean") -> torch.Tensor:
    if attended.shape[-2] < 1:
        raise ShapeError("cannot pool zero joints")
    if method == "mean":
        return attended.mean(dim=-2)
    if method == "max":
        return attended.amax(dim=-2)
    raise ConfigurationError(f"unknown pooling {method!r}")


class FusionHead(nn.Module):
    """Everything after the clip encoder: tokens + positions -> logit."""

    def __init__(self, d: int, n_frames: int = 30, heads: int = 4, depth: int = 1,
                 pooling: str = "mean", dropout: float = 0.0):
        super().__init__()
        pool(torch.zeros(1, 1), pooling)  # validates the name
        self.d, self.n_frames, self.heads, self.depth, self.pooling = d, n_frames, heads, depth, pooling
        self.positional = PositionalProjection(n_frames, d)
        self.attention = nn.ModuleList(AttentionBlock(d, heads, dropout) for _ in range(depth))
        self.classifier = ClassifierHead(d)

    def config(self) -> dict:
        return {"d": self.d, "n_frames": self.n_frames, "heads": self.heads,
                "depth": self.depth, "pooling": self.pooling}

    def forward(self, tokens: torch.Tensor, positions: torch.Tensor, return_weights: bool = False):
        if tokens.shape[:-1] != positions.shape[:-2]:
            raise ShapeError(f"tokens {tuple(tokens.shape)} and positions {tuple(positions.shape)} disagree")
        z = augment_tokens(tokens, self.positional(positions))
        weights = []
        for blk in self.attention:
            z, w = blk(z, return_weights=True)
            weights.append(w)
        logit = self.classifier(pool(z, self.pooling))
        return (logit, weights) if return_weights else logit


def project_positional(pos, proj: PositionalProjection) -> torch.Tensor:
    pos = torch.as_tensor(np.asarray(pos) if not torch.is_tensor(pos) else pos,
                          dtype=proj.linear.weight.dtype)
    if pos.ndim < 3 or pos.shape[-1] != 3:
        raise ShapeError(f"expected (J, T, 3) positions, got {tuple(pos.shape)}")
    return proj(pos)


def augment_tokens(z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    if z.shape != p.shape:
        raise ShapeError(f"token shape {tuple(z.shape)} != positional shape {tuple(p.shape)}")
    return z + p


def cross_joint_attention(z_aug: torch.Tensor, block: AttentionBlock, train_mode: bool = False) -> torch.Tensor:
    if z_aug.shape[-2] < 1:
        raise ShapeError("need at least one joint token")
    was = block.training
    block.train(train_mode)
    try:
        return block(z_aug)
    finally:
        block.train(was)


def pool_and_classify(attended: torch.Tensor, head: ClassifierHead, pooling: str = "mean") -> torch.Tensor:
    return head(pool(attended, pooling))


def bce_with_logit(logit, y):
    """Binary cross-entropy on a logit, stable for large magnitudes.

    Works elementwise on scalars or arrays; ``y`` is 0 or 1.
    """
    logit = np.asarray(logit, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.maximum(logit, 0.0) - logit * y + np.log1p(np.exp(-np.abs(logit)))
    return float(out) if out.ndim == 0 else out
