"""Training loop, checkpoints and multi-run experiments."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoder import EncoderAdapter, build_encoder
from .evaluator import MetricsReport, ScoredSegment, aggregate_reports, compute_metrics
from .exceptions import ConfigurationError, DataError, LeakageError, TrainingError
from .fusion import FusionHead
from .lora import LoraConfig, inject_lora, load_lora_state_dict, lora_state_dict
from .model import JointAttentionModel, SegmentBatch

logger = logging.getLogger(__name__)

MODES = ("frozen", "lora", "full")
CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``mode`` is ``frozen`` (encoder fixed, tokens cached), ``lora`` (adapters
    on the last encoder blocks) or ``full`` (every encoder weight trained).
    """

    mode: str = "frozen"
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lr_lora: float = 5e-5
    weight_decay: float = 1e-2
    seed: int = 0
    patience: int = 5
    class_weighting: bool = True
    grad_clip: float | None = 1.0
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.lr_lora <= 0:
            raise ConfigurationError("learning rates must be positive")


@dataclass
class HeadConfig:
    heads: int = 4
    depth: int = 1
    pooling: str = "mean"
    dropout: float = 0.0


@dataclass
class TrainResult:
    model: JointAttentionModel
    checkpoint: dict
    log: list = field(default_factory=list)
    best_epoch: int = 0


def parameter_hash(params) -> str:
    """SHA-256 over the raw bytes of named tensors, order-independent."""
    h = hashlib.sha256()
    for name, p in sorted(params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def check_no_leakage(*pools) -> None:
    """Raise if any subject id occurs in more than one pool."""
    seen = {}
    for i, pool in enumerate(pools):
        for s in set(pool or ()):
            if s in seen and seen[s] != i:
                raise LeakageError(f"subject {s!r} appears in more than one of train/validation/test")
            seen[s] = i


def _check_training_labels(batch: SegmentBatch):
    if batch.labels is None or len(batch) == 0:
        raise DataError("training pool is empty or unlabeled")
    labels = np.asarray(batch.labels)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("training labels must be interictal (0) or ictal (1)")
    if labels.min() == labels.max():
        missing = "ictal" if labels.max() == 0 else "interictal"
        raise DataError(f"training pool has no {missing} segments")


@torch.no_grad()
def encode_tokens(model: JointAttentionModel, clips, batch_size: int = 32) -> torch.Tensor:
    """Motion tokens (n, J, d) for every segment, encoder in inference mode."""
    was = model.encoder.training
    model.encoder.eval()
    try:
        out = [model.encode(torch.as_tensor(clips[i:i + batch_size])) for i in range(0, len(clips), batch_size)]
    finally:
        model.encoder.train(was)
    return torch.cat(out) if out else torch.zeros(0)


@torch.no_grad()
def predict_logits(model: JointAttentionModel, batch: SegmentBatch, tokens=None, batch_size: int = 32) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        pos = torch.as_tensor(batch.positions, dtype=model.head.positional.linear.weight.dtype)
        out = []
        for i in range(0, len(batch), batch_size):
            sl = slice(i, i + batch_size)
            if tokens is not None:
                out.append(model.head(tokens[sl], pos[sl]))
            else:
                out.append(model(torch.as_tensor(batch.clips[sl]), pos[sl]))
    finally:
        model.train(was)
    return torch.cat(out).cpu().numpy().astype(np.float64) if out else np.zeros(0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


def _validation_snapshot(logits, labels) -> dict:
    labels = np.asarray(labels)
    loss = float(nn.functional.binary_cross_entropy_with_logits(
        torch.as_tensor(logits), torch.as_tensor(labels, dtype=torch.float64)))
    snap = {"val_loss": loss}
    if labels.min() != labels.max():
        rep = compute_metrics(scores=sigmoid(logits), labels=labels)
        snap.update(val_auroc=rep.auroc, val_auprc=rep.auprc, val_accuracy=rep.accuracy)
    return snap


def _build_model(encoder: EncoderAdapter, n_frames: int, head_cfg: HeadConfig) -> JointAttentionModel:
    head = FusionHead(encoder.d, n_frames, head_cfg.heads, head_cfg.depth, head_cfg.pooling, head_cfg.dropout)
    head.to(next(encoder.parameters()).dtype)
    return JointAttentionModel(encoder, head)


def train(train_data: SegmentBatch, val_data: SegmentBatch | None, encoder: EncoderAdapter,
          cfg: TrainConfig, head_cfg: HeadConfig | None = None, lora_cfg: LoraConfig | None = None,
          test_subjects=None) -> TrainResult:
    """Fit the fusion head (and LoRA adapters or the encoder, per ``cfg.mode``).

    The encoder passed in is copied, never modified. The returned model holds
    the weights of the epoch with the best validation AUROC (the last epoch
    when there is no usable validation set).
    """
    head_cfg = head_cfg or HeadConfig()
    lora_cfg = lora_cfg or LoraConfig()
    _check_training_labels(train_data)
    check_no_leakage(train_data.subjects, val_data.subjects if val_data is not None else (), test_subjects)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    encoder = copy.deepcopy(encoder)
    encoder_state = encoder.base_state_dict()
    n_frames = train_data.positions.shape[2]

    if cfg.mode == "frozen":
        encoder.trainable = False
    elif cfg.mode == "lora":
        inject_lora(encoder, lora_cfg, seed=cfg.seed)
    else:
        encoder.trainable = True
    model = _build_model(encoder, n_frames, head_cfg)
    dtype = model.head.positional.linear.weight.dtype

    groups = [{"params": list(model.head.parameters()), "lr": cfg.lr}]
    enc_params = [p for p in model.encoder.parameters() if p.requires_grad]
    if enc_params:
        groups.append({"params": enc_params, "lr": cfg.lr_lora if cfg.mode == "lora" else cfg.lr})
    optimizer = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)

    labels = torch.as_tensor(np.asarray(train_data.labels), dtype=dtype)
    n_pos = float(labels.sum())
    pos_weight = torch.tensor((len(labels) - n_pos) / n_pos, dtype=dtype) if cfg.class_weighting else None
    criterion = nn.BCEWithLogitsLoss(pos_weight=pos_weight)
    positions = torch.as_tensor(train_data.positions, dtype=dtype)

    cached = val_cached = None
    if cfg.mode == "frozen":
        cached = encode_tokens(model, train_data.clips, cfg.eval_batch_size)
        if val_data is not None and len(val_data):
            val_cached = encode_tokens(model, val_data.clips, cfg.eval_batch_size)

    use_val = val_data is not None and len(val_data) > 0
    best_score, best_epoch, best_state, since_best = (-math.inf,), 0, None, 0
    log = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        if cfg.mode == "frozen":
            model.encoder.eval()
        order = rng.permutation(len(train_data))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            if cached is not None:
                logits = model.head(cached[idx], positions[idx])
            else:
                logits = model(torch.as_tensor(train_data.clips[idx]), positions[idx])
            loss = criterion(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_([p for g in groups for p in g["params"]], cfg.grad_clip)
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        record = {"epoch": epoch, "train_loss": total / seen, "lr": lr}

        if use_val:
            record.update(_validation_snapshot(
                predict_logits(model, val_data, val_cached, cfg.eval_batch_size), val_data.labels))
            # AUROC saturates on easy validation sets; loss breaks ties.
            auc = record.get("val_auroc")
            score = (-math.inf if auc is None else auc, -record["val_loss"])
        else:
            score = (epoch,)  # keep the last epoch
        log.append(record)
        logger.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in record.items() if isinstance(v, float)})

        if score > best_score:
            best_score, best_epoch, since_best = score, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if use_val and since_best >= cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    snapshot = next(r for r in log if r["epoch"] == best_epoch)
    ckpt = make_checkpoint(model, cfg, head_cfg, lora_cfg if cfg.mode == "lora" else None,
                           encoder_state, epoch=best_epoch, val_metrics=snapshot)
    return TrainResult(model, ckpt, log, best_epoch)


# ----------------------------------------------------------------------
# checkpoints

def make_checkpoint(model: JointAttentionModel, cfg: TrainConfig, head_cfg: HeadConfig,
                    lora_cfg: LoraConfig | None, encoder_state: dict | None = None, epoch: int = 0,
                    val_metrics: dict | None = None) -> dict:
    """Serializable training state.

    Encoder base weights are stored for the reference backend and in
    ``full`` mode; for external backbones in frozen/LoRA mode they are left
    out and must be supplied when loading.
    """
    enc = model.encoder
    store_encoder = enc.name == "reference" or cfg.mode == "full"
    if store_encoder:
        encoder_state = enc.base_state_dict() if cfg.mode == "full" or encoder_state is None else encoder_state
    return {
        "format": CHECKPOINT_FORMAT,
        "head_config": model.head.config() | {"dropout": head_cfg.dropout},
        "head_state": {k: v.detach().clone() for k, v in model.head.state_dict().items()},
        "encoder": {
            "backend": enc.name,
            "config": enc.config(),
            "state": encoder_state if store_encoder else None,
            "dtype": str(next(enc.parameters()).dtype).replace("torch.", ""),
        },
        "lora": lora_state_dict(enc) if lora_cfg is not None else None,
        "train_config": asdict(cfg),
        "seed": cfg.seed,
        "epoch": epoch,
        "val_metrics": val_metrics or {},
    }


def save_checkpoint(path, ckpt: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)


def model_from_checkpoint(ckpt: dict, encoder: EncoderAdapter | None = None) -> JointAttentionModel:
    """Rebuild a model; ``encoder`` is required when the checkpoint omits its weights."""
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"unsupported checkpoint format {ckpt.get('format')!r}")
    desc = ckpt["encoder"]
    dtype = getattr(torch, desc.get("dtype", "float32"))
    if desc["state"] is not None:
        enc = build_encoder(desc["backend"], **desc["config"]).to(dtype)
        enc.load_state_dict(desc["state"])
    elif encoder is not None:
        enc = copy.deepcopy(encoder)
    else:
        raise ConfigurationError("checkpoint holds no encoder weights; pass the pretrained encoder")
    enc.trainable = False
    if ckpt["lora"] is not None:
        inject_lora(enc, LoraConfig(**ckpt["lora"]["config"]))
        load_lora_state_dict(enc, ckpt["lora"])
    hc = ckpt["head_config"]
    head = FusionHead(hc["d"], hc["n_frames"], hc["heads"], hc["depth"], hc["pooling"], hc.get("dropout", 0.0))
    head.to(dtype)
    head.load_state_dict(ckpt["head_state"])
    model = JointAttentionModel(enc, head)
    model.eval()
    return model


# ----------------------------------------------------------------------
# experiments

def score_segments(model: JointAttentionModel, batch: SegmentBatch, batch_size: int = 32) -> list[ScoredSegment]:
    probs = sigmoid(predict_logits(model, batch, batch_size=batch_size))
    labels = batch.labels if batch.labels is not None else [None] * len(batch)
    return [
        ScoredSegment(vid, float(st), float(p), None if lab is None or lab < 0 else int(lab))
        for vid, st, p, lab in zip(batch.video_ids, batch.starts, probs, labels)
    ]


@dataclass
class ExperimentResult:
    reports: list
    aggregate: dict
    results: list
    scored: list


def run_experiment(train_data: SegmentBatch, val_data: SegmentBatch | None, test_data: SegmentBatch,
                   encoder: EncoderAdapter, cfg: TrainConfig, n_runs: int = 5,
                   head_cfg: HeadConfig | None = None, lora_cfg: LoraConfig | None = None) -> ExperimentResult:
    """Train ``n_runs`` times with seeds ``cfg.seed + i`` and score the test pool."""
    if n_runs < 1:
        raise ConfigurationError("n_runs must be >= 1")
    check_no_leakage(train_data.subjects, val_data.subjects if val_data is not None else (), test_data.subjects)
    reports, results, scored = [], [], []
    for i in range(n_runs):
        run_cfg = replace(cfg, seed=cfg.seed + i)
        res = train(train_data, val_data, encoder, run_cfg, head_cfg, lora_cfg, test_subjects=test_data.subjects)
        segs = score_segments(res.model, test_data, cfg.eval_batch_size)
        reports.append(compute_metrics(segs))
        results.append(res)
        scored.append(segs)
        logger.info("run %d (seed %d): %s", i, run_cfg.seed, reports[-1])
    return ExperimentResult(reports, aggregate_reports(reports), results, scored)


def metrics_from_dict(d) -> MetricsReport:
    return MetricsReport.from_dict(d)
