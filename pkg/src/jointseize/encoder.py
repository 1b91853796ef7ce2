"""Clip encoders that turn one joint clip into a motion token.

Two backends share the :class:`EncoderAdapter` interface:

* :class:`ReferenceEncoder`, a small tubelet-embedding transformer that
  trains on a CPU in minutes;
* :class:`VivitAdapter`, a wrapper around a Hugging Face ViViT backbone whose
  weights are supplied by the caller.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ShapeError

LAYER_KINDS = ("query", "key", "value", "ff")


@dataclass
class LinearSlot:
    """A linear layer inside an encoder block that LoRA may wrap."""

    name: str
    kind: str
    parent: nn.Module
    attr: str

    @property
    def module(self) -> nn.Module:
        return getattr(self.parent, self.attr)


def token_from_encoder_output(outputs: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Collapse per-position encoder outputs (..., P, d) to one (..., d) token.

    ``reduction`` is ``"cls"`` (take position 0) or ``"mean"``.
    """
    if outputs.ndim < 2 or outputs.shape[-2] == 0:
        raise ShapeError(f"encoder produced no output positions (shape {tuple(outputs.shape)})")
    if reduction == "cls":
        return outputs[..., 0, :]
    if reduction == "mean":
        return outputs.mean(dim=-2)
    raise ConfigurationError(f"unknown token reduction {reduction!r}")


class EncoderAdapter(nn.Module):
    """Common surface of clip encoders.

    Subclasses set ``name``, ``d``, ``input_size``, ``num_frames``,
    ``mean``/``std`` and implement :meth:`encode_positions` and
    :meth:`block_modules`.
    """

    name = "encoder"
    d: int
    input_size: int
    num_frames: int | None = None
    mean = (0.5, 0.5, 0.5)
    std = (0.5, 0.5, 0.5)
    has_cls_token = False

    def __init__(self, reduction: str | None = None):
        super().__init__()
        self._reduction = reduction

    @property
    def reduction(self) -> str:
        if self._reduction is not None:
            return self._reduction
        return "cls" if self.has_cls_token else "mean"

    # ------------------------------------------------------------------
    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for n, p in self.named_parameters() if "lora_" not in n)

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        for n, p in self.named_parameters():
            if "lora_" not in n:
                p.requires_grad_(flag)

    def config(self) -> dict:
        """Constructor arguments needed to rebuild this adapter's structure."""
        return {}

    def base_state_dict(self) -> dict:
        """Weights excluding LoRA adapters, keyed as in the un-injected module."""
        out = {}
        for k, v in self.state_dict().items():
            if "lora_" in k:
                continue
            out[k.replace(".base.", ".")] = v.detach().clone()
        return out

    def base_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if "lora_" not in n]

    # ------------------------------------------------------------------
    def preprocess(self, clips) -> torch.Tensor:
        """uint8 clips (N, T, h, w, 3) -> normalised float (N, T, 3, S, S)."""
        x = torch.as_tensor(np.asarray(clips)) if not torch.is_tensor(clips) else clips
        if x.ndim != 5 or x.shape[-1] != 3:
            raise ShapeError(f"expected clips of shape (N, T, h, w, 3), got {tuple(x.shape)}")
        dtype = next(self.parameters()).dtype
        x = x.to(dtype)
        if clips_are_uint8(clips):
            x = x / 255.0
        N, T, h, w, _ = x.shape
        x = x.permute(0, 1, 4, 2, 3).reshape(N * T, 3, h, w)
        if (h, w) != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False, antialias=min(h, w) > self.input_size)
        x = x.reshape(N, T, 3, self.input_size, self.input_size)
        if self.num_frames is not None and T != self.num_frames:
            idx = torch.linspace(0, T - 1, self.num_frames).round().long()
            x = x[:, idx]
        mean = torch.tensor(self.mean, dtype=dtype).view(1, 1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=dtype).view(1, 1, 3, 1, 1)
        return (x - mean) / std

    def encode_positions(self, x: torch.Tensor) -> torch.Tensor:
        """Preprocessed (N, T, 3, S, S) -> per-position outputs (N, P, d)."""
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return token_from_encoder_output(self.encode_positions(x), self.reduction)

    def encode_clips(self, clips) -> torch.Tensor:
        return self(self.preprocess(clips))

    # ------------------------------------------------------------------
    def block_modules(self) -> list[nn.Module]:
        raise NotImplementedError

    def linear_slots(self, block_index: int) -> list[LinearSlot]:
        """Query/key/value/feed-forward linears of one block, in that order."""
        blocks = self.block_modules()
        block = blocks[block_index]
        prefix = f"block{block_index % len(blocks)}"
        found = []
        for qual, module in block.named_modules():
            for attr, child in module.named_children():
                leaf = f"{qual}.{attr}" if qual else attr
                kind = _classify_linear(leaf, child)
                if kind is not None:
                    found.append(LinearSlot(f"{prefix}.{leaf}", kind, module, attr))
        found.sort(key=lambda s: LAYER_KINDS.index(s.kind))
        return found


_KIND_PATTERNS = (
    ("query", re.compile(r"(^|\.)(query|q_proj|q)$")),
    ("key", re.compile(r"(^|\.)(key|k_proj|k)$")),
    ("value", re.compile(r"(^|\.)(value|v_proj|v)$")),
    ("ff", re.compile(r"(^|\.)(fc1|fc2|intermediate\.dense|output\.dense)$")),
)


def _classify_linear(qualified: str, module: nn.Module) -> str | None:
    if not isinstance(module, nn.Linear) and not hasattr(module, "base"):
        return None
    if "attention.output" in qualified:
        return None
    for kind, pat in _KIND_PATTERNS:
        if pat.search(qualified):
            return kind
    return None


def clips_are_uint8(clips) -> bool:
    if torch.is_tensor(clips):
        return clips.dtype == torch.uint8
    return np.asarray(clips).dtype == np.uint8


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.proj = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        B, P, d = x.shape
        dh = d // self.heads

        def split(t):
            return t.view(B, P, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(B, P, d)
        return self.proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int = 2, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads, dropout)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d * mlp_ratio)
        self.fc2 = nn.Linear(d * mlp_ratio, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.norm2(x)))))


class ReferenceEncoder(EncoderAdapter):
    """Tubelet embedding followed by a short pre-norm transformer.

    Clips are resized to ``input_size`` and cut into non-overlapping
    ``tubelet`` = (frames, pixels, pixels) patches. The token is the mean of
    the final-layer outputs.

    With ``motion_channels`` the embedding also sees the absolute difference
    between consecutive frames (zero for the first frame). An untrained
    encoder has no other way to expose motion magnitude through a mean over
    positions, since a linear embedding of signed pixels averages it out.
    """

    name = "reference"

    def __init__(self, d: int = 32, depth: int = 2, heads: int = 4, num_frames: int = 30,
                 input_size: int = 24, tubelet=(5, 8, 8), mlp_ratio: int = 2, dropout: float = 0.0,
                 reduction: str | None = None, motion_channels: bool = True, seed: int | None = 0):
        super().__init__(reduction)
        self._config = dict(d=d, depth=depth, heads=heads, num_frames=num_frames, input_size=input_size,
                            tubelet=list(tubelet), mlp_ratio=mlp_ratio, dropout=dropout,
                            reduction=reduction, motion_channels=motion_channels, seed=seed)
        self.motion_channels = motion_channels
        tt, th, tw = tubelet
        if num_frames % tt or input_size % th or input_size % tw:
            raise ConfigurationError(
                f"tubelet {tubelet} does not tile {num_frames} frames of {input_size}x{input_size}"
            )
        self.d, self.num_frames, self.input_size, self.tubelet = d, num_frames, input_size, tuple(tubelet)
        self.mean, self.std = (0.45, 0.45, 0.45), (0.25, 0.25, 0.25)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.patch = nn.Conv3d(6 if motion_channels else 3, d, kernel_size=tubelet, stride=tubelet)
        n_pos = (num_frames // tt) * (input_size // th) * (input_size // tw)
        self.pos = nn.Parameter(torch.zeros(1, n_pos, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, heads, mlp_ratio, dropout) for _ in range(depth))
        self.norm = nn.LayerNorm(d)
        if gen is not None:
            _seeded_init(self, gen)

    def config(self):
        return dict(self._config)

    def encode_positions(self, x):
        if x.ndim != 5 or tuple(x.shape[1:]) != (self.num_frames, 3, self.input_size, self.input_size):
            raise ShapeError(
                f"expected ({self.num_frames}, 3, {self.input_size}, {self.input_size}) per clip, "
                f"got {tuple(x.shape[1:])}"
            )
        if self.motion_channels:
            diff = torch.zeros_like(x)
            diff[:, 1:] = (x[:, 1:] - x[:, :-1]).abs()
            x = torch.cat([x, diff], dim=2)
        tokens = self.patch(x.transpose(1, 2)).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)

    def block_modules(self):
        return list(self.blocks)


def _seeded_init(module: nn.Module, gen: torch.Generator):
    """Re-initialise parameters from ``gen`` so construction is reproducible."""
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)
            elif name == "pos":
                p.normal_(0.0, 0.02, generator=gen)
            else:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)


class VivitAdapter(EncoderAdapter):
    """Wrap a Hugging Face ``VivitModel``.

    ``backbone`` is either a constructed model or a path / hub id passed to
    ``VivitModel.from_pretrained``. Clips are resized to the backbone's
    ``image_size`` and temporally resampled to its ``num_frames``.
    """

    name = "vivit"
    has_cls_token = True
    mean = (0.5, 0.5, 0.5)
    std = (0.5, 0.5, 0.5)

    def __init__(self, backbone, reduction: str | None = None):
        super().__init__(reduction)
        from transformers import VivitModel

        if isinstance(backbone, (str, bytes)) or hasattr(backbone, "__fspath__"):
            backbone = VivitModel.from_pretrained(backbone, add_pooling_layer=False)
        self.backbone = backbone
        cfg = backbone.config
        self.d = cfg.hidden_size
        self.input_size = cfg.image_size
        self.num_frames = cfg.num_frames

    def config(self):
        return {"backbone_config": self.backbone.config.to_dict(), "reduction": self._reduction}

    @classmethod
    def from_config(cls, backbone_config: dict, reduction=None):
        from transformers import VivitConfig, VivitModel

        cfg = VivitConfig(**{k: v for k, v in backbone_config.items() if k not in ("architectures",)})
        return cls(VivitModel(cfg, add_pooling_layer=False), reduction=reduction)

    def encode_positions(self, x):
        return self.backbone(pixel_values=x).last_hidden_state

    def block_modules(self):
        bb = self.backbone
        if hasattr(bb, "layers"):
            return list(bb.layers)
        return list(bb.encoder.layer)


def encode_joint_clip(adapter: EncoderAdapter, clip) -> np.ndarray:
    """Encode a single (T, h, w, 3) clip in inference mode."""
    was_training = adapter.training
    adapter.eval()
    try:
        with torch.no_grad():
            token = adapter.encode_clips(np.asarray(clip)[None] if not torch.is_tensor(clip) else clip[None])
    finally:
        adapter.train(was_training)
    return token[0].cpu().numpy()


def build_encoder(backend: str = "reference", **kwargs) -> EncoderAdapter:
    if backend == "reference":
        return ReferenceEncoder(**kwargs)
    if backend == "vivit":
        if "backbone_config" in kwargs:
            return VivitAdapter.from_config(**kwargs)
        return VivitAdapter(**kwargs)
    raise ConfigurationError(f"unknown encoder backend {backend!r}")
