"""Run configuration files.

A config is a YAML (or JSON) mapping with the sections below; every section
and key is optional and falls back to :data:`DEFAULTS`. Unknown keys are
rejected. Example::

    seed: 0
    segmenter: {stride_s: 5.0, n_test: 2}
    model: {backend: reference, d: 32, heads: 4}
    train: {mode: lora, epochs: 20, runs: 5}
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from pathlib import Path

import yaml

from .exceptions import ConfigurationError
from .lora import LoraConfig
from .synthgen import SynthConfig
from .trainer import HeadConfig, TrainConfig

CACHE_ENV = "JOINTSEIZE_CACHE_DIR"

DEFAULTS = {
    "seed": 0,
    "paths": {"data_root": None, "out_dir": None, "cache_dir": None},
    "segmenter": {
        "stride_s": 5.0,
        "timeline_stride_s": 1.0,
        "n_test": 2,
        "n_val": 1,
        "crop_size": 120,
        "store_size": 24,
        "confidence_threshold": 0.3,
        "write_archive": True,
    },
    "model": {
        "backend": "reference",
        "d": 32,
        "depth": 2,
        "encoder_heads": 4,
        "input_size": 24,
        "motion_channels": True,
        "reduction": None,
        "pretrained": None,
        "heads": 4,
        "head_depth": 1,
        "pooling": "mean",
        "head_dropout": 0.0,
    },
    "train": {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"} | {"runs": 5},
    "lora": {"rank": 8, "alpha": 16.0, "dropout": 0.05, "n_last_blocks": 2, "init_std": 0.02},
    "eval": {"threshold": 0.5},
    "synth": {k: v for k, v in SynthConfig().to_dict().items() if k != "seed"},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {name!r} must be a mapping")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides`` (flags win)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg = _merge(cfg, overrides or {})
    # Build the typed configs once so bad values fail before any work starts.
    train_config(cfg), lora_config(cfg), synth_config(cfg)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "runs"}
    return TrainConfig(seed=int(cfg["seed"]), **t)


def head_config(cfg: dict) -> HeadConfig:
    m = cfg["model"]
    return HeadConfig(heads=m["heads"], depth=m["head_depth"], pooling=m["pooling"], dropout=m["head_dropout"])


def lora_config(cfg: dict) -> LoraConfig:
    return LoraConfig(**cfg["lora"])


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(seed=int(cfg["seed"]), **cfg["synth"])


def encoder_kwargs(cfg: dict) -> tuple[str, dict]:
    m = cfg["model"]
    if m["backend"] == "reference":
        return "reference", dict(d=m["d"], depth=m["depth"], heads=m["encoder_heads"],
                                 input_size=m["input_size"], motion_channels=m["motion_channels"],
                                 reduction=m["reduction"], seed=int(cfg["seed"]))
    if m["backend"] == "vivit":
        if not m["pretrained"]:
            raise ConfigurationError("model.pretrained must name the ViViT weights for backend 'vivit'")
        return "vivit", dict(backbone=m["pretrained"], reduction=m["reduction"])
    raise ConfigurationError(f"unknown encoder backend {m['backend']!r}")


def cache_dir(cfg: dict) -> Path:
    root = cfg["paths"]["cache_dir"] or os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "jointseize"
    return Path(root)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_resolved(cfg: dict, out_dir, command: str) -> Path:
    """Echo the fully resolved config next to a command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True), encoding="utf-8")
    return path
