"""Low-rank adaptation of the encoder's last transformer blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .encoder import LAYER_KINDS, EncoderAdapter
from .exceptions import ConfigurationError, ShapeError


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    target_kinds: tuple = LAYER_KINDS
    n_last_blocks: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ConfigurationError(f"LoRA rank must be a positive integer, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        unknown = set(self.target_kinds) - set(LAYER_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown LoRA target kinds {sorted(unknown)}")
        self.target_kinds = tuple(self.target_kinds)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self):
        d = asdict(self)
        d["target_kinds"] = list(self.target_kinds)
        return d


class LoRALinear(nn.Module):
    """``base(x) + (alpha / r) * B A drop(x)`` around a frozen linear layer."""

    def __init__(self, base: nn.Linear, cfg: LoraConfig, name: str = "", generator=None):
        super().__init__()
        self.base = base
        self.name = name
        self.rank = cfg.rank
        self.scaling = cfg.scaling
        ref = base.weight
        self.lora_A = nn.Parameter(torch.empty(cfg.rank, base.in_features, dtype=ref.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, cfg.rank, dtype=ref.dtype))
        with torch.no_grad():
            self.lora_A.normal_(0.0, cfg.init_std, generator=generator)
        self.dropout = nn.Dropout(cfg.dropout) if cfg.dropout > 0 else nn.Identity()
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    @property
    def weight(self):
        return self.base.weight

    @property
    def bias(self):
        return self.base.bias

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def forward(self, x):
        update = self.dropout(x) @ self.lora_A.t() @ self.lora_B.t()
        return self.base(x) + self.scaling * update

    def merged(self) -> nn.Linear:
        """A plain linear layer with the update folded into its weight."""
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None,
                        dtype=self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.delta_weight())
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        out.requires_grad_(False)
        return out


def lora_forward(x, base: nn.Linear, A, B, cfg: LoraConfig, training: bool = False):
    """Functional form of :class:`LoRALinear` on a single vector or batch."""
    x = torch.as_tensor(x, dtype=base.weight.dtype)
    A = torch.as_tensor(A, dtype=base.weight.dtype)
    B = torch.as_tensor(B, dtype=base.weight.dtype)
    if A.shape != (cfg.rank, base.in_features) or B.shape != (base.out_features, cfg.rank):
        raise ShapeError(
            f"A {tuple(A.shape)} / B {tuple(B.shape)} inconsistent with rank {cfg.rank} and "
            f"layer {base.in_features}->{base.out_features}"
        )
    if x.shape[-1] != base.in_features:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {base.in_features}")
    h = nn.functional.dropout(x, cfg.dropout, training=training)
    return base(x) + cfg.scaling * (h @ A.t() @ B.t())


def inject_lora(adapter: EncoderAdapter, cfg: LoraConfig, seed: int = 0) -> int:
    """Wrap the targeted linears of the last ``cfg.n_last_blocks`` blocks.

    Base encoder parameters are frozen. Returns the number of adapters added.
    """
    blocks = adapter.block_modules()
    if len(blocks) < cfg.n_last_blocks:
        raise ConfigurationError(
            f"encoder has {len(blocks)} blocks, LoRA needs at least {cfg.n_last_blocks}"
        )
    adapter.trainable = False
    gen = torch.Generator().manual_seed(seed)
    count = 0
    for bi in range(len(blocks) - cfg.n_last_blocks, len(blocks)):
        slots = [s for s in adapter.linear_slots(bi) if s.kind in cfg.target_kinds]
        kinds = {s.kind for s in slots}
        if not {"query", "key", "value"} & set(cfg.target_kinds) <= kinds:
            raise ConfigurationError(f"block {bi} lacks one of the query/key/value layers")
        for slot in slots:
            layer = slot.module
            if isinstance(layer, LoRALinear):
                raise ConfigurationError(f"{slot.name} already carries a LoRA adapter")
            setattr(slot.parent, slot.attr, LoRALinear(layer, cfg, name=slot.name, generator=gen))
            count += 1
    adapter.lora_config = cfg
    return count


def lora_modules(module: nn.Module) -> dict[str, LoRALinear]:
    return {m.name or n: m for n, m in module.named_modules() if isinstance(m, LoRALinear)}


def merge_lora(module: nn.Module) -> int:
    """Fold every adapter into its base weight and remove it. Returns count."""
    merged = 0
    for parent in list(module.modules()):
        for attr, child in list(parent.named_children()):
            if isinstance(child, LoRALinear):
                setattr(parent, attr, child.merged())
                merged += 1
    return merged


def lora_state_dict(module: nn.Module) -> dict:
    """Adapter-only checkpoint payload: A, B, config and layer ids."""
    mods = lora_modules(module)
    cfg = getattr(module, "lora_config", None)
    if cfg is None:
        cfg = next((getattr(m, "lora_config") for m in module.modules() if hasattr(m, "lora_config")), None)
    return {
        "config": cfg.to_dict() if cfg is not None else None,
        "layers": {
            name: {"A": m.lora_A.detach().cpu().clone(), "B": m.lora_B.detach().cpu().clone()}
            for name, m in mods.items()
        },
    }


def load_lora_state_dict(module: nn.Module, state: dict) -> None:
    mods = lora_modules(module)
    missing = set(state["layers"]) ^ set(mods)
    if missing:
        raise ConfigurationError(f"LoRA layer ids do not match: {sorted(missing)}")
    with torch.no_grad():
        for name, tensors in state["layers"].items():
            mods[name].lora_A.copy_(tensors["A"])
            mods[name].lora_B.copy_(tensors["B"])


def count_trainable(module: nn.Module) -> int:
    return int(sum(np.prod(p.shape) for p in module.parameters() if p.requires_grad))
