import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from jointseize.encoder import ReferenceEncoder
from jointseize.exceptions import ConfigurationError, DataError, LeakageError, TrainingError
from jointseize.lora import LoraConfig, LoRALinear
from jointseize.trainer import (HeadConfig, TrainConfig, load_checkpoint, model_from_checkpoint,
                                parameter_hash, predict_logits, run_experiment, save_checkpoint,
                                score_segments, train)

FAST = TrainConfig(mode="frozen", epochs=4, lr=1e-3, batch_size=8, seed=0)
HEAD = HeadConfig(heads=2)


def _base_params(enc):
    return list(enc.base_state_dict().items())


def test_same_seed_same_validation_loss(tiny_pools, small_encoder):
    a = train(tiny_pools["train"], tiny_pools["val"], small_encoder, FAST, HEAD)
    b = train(tiny_pools["train"], tiny_pools["val"], small_encoder, FAST, HEAD)
    assert [r["val_loss"] for r in a.log] == [r["val_loss"] for r in b.log]
    c = train(tiny_pools["train"], tiny_pools["val"], small_encoder, replace(FAST, seed=1), HEAD)
    assert [r["val_loss"] for r in a.log] != [r["val_loss"] for r in c.log]


def test_training_loss_decreases(tiny_pools, small_encoder):
    cfg = replace(FAST, epochs=5, batch_size=40)
    res = train(tiny_pools["train"], None, small_encoder, cfg, HEAD)
    losses = [r["train_loss"] for r in res.log]
    assert losses[0] > losses[1] > losses[2]
    assert res.best_epoch == 5


def test_frozen_mode_leaves_encoder_untouched(tiny_pools, small_encoder):
    before = parameter_hash(small_encoder.named_parameters())
    res = train(tiny_pools["train"], tiny_pools["val"], small_encoder, FAST, HEAD)
    assert parameter_hash(res.model.encoder.named_parameters()) == before
    assert parameter_hash(small_encoder.named_parameters()) == before
    assert not any(p.requires_grad for p in res.model.encoder.parameters())


def test_lora_mode_trains_only_adapters_and_head(tiny_pools, small_encoder):
    before = parameter_hash(_base_params(small_encoder))
    cfg = replace(FAST, mode="lora", epochs=2, lr_lora=1e-3)
    res = train(tiny_pools["train"], tiny_pools["val"], small_encoder, cfg, HEAD)
    enc = res.model.encoder
    assert parameter_hash(_base_params(enc)) == before
    trainable = {n for n, p in enc.named_parameters() if p.requires_grad}
    assert trainable and all("lora_" in n for n in trainable)
    assert sum(isinstance(m, LoRALinear) for m in enc.modules()) == 10
    assert res.checkpoint["lora"] is not None


def test_full_mode_updates_encoder(tiny_pools, small_encoder):
    before = parameter_hash(small_encoder.named_parameters())
    res = train(tiny_pools["train"], None, small_encoder, replace(FAST, mode="full", epochs=1), HEAD)
    assert parameter_hash(res.model.encoder.named_parameters()) != before
    assert parameter_hash(small_encoder.named_parameters()) == before


def test_early_stopping_restores_best_epoch(tiny_pools, small_encoder):
    cfg = replace(FAST, epochs=30, patience=2)
    res = train(tiny_pools["train"], tiny_pools["val"], small_encoder, cfg, HEAD)
    assert len(res.log) <= 30
    best = max(res.log, key=lambda r: (r.get("val_auroc", -math.inf), -r["val_loss"]))
    assert res.best_epoch == best["epoch"]
    logits = predict_logits(res.model, tiny_pools["val"])
    loss = torch.nn.functional.binary_cross_entropy_with_logits(
        torch.as_tensor(logits), torch.as_tensor(tiny_pools["val"].labels, dtype=torch.float64))
    assert float(loss) == pytest.approx(best["val_loss"], abs=1e-6)


def test_subject_leakage_rejected(tiny_pools, small_encoder):
    with pytest.raises(LeakageError):
        train(tiny_pools["train"], tiny_pools["train"][:3], small_encoder, FAST, HEAD)
    with pytest.raises(LeakageError):
        train(tiny_pools["train"], None, small_encoder, FAST, HEAD, test_subjects=["S01"])


def test_single_class_pool_rejected(tiny_pools, small_encoder):
    tr = tiny_pools["train"]
    only_ictal = tr[np.flatnonzero(tr.labels == 1)]
    with pytest.raises(DataError, match="no interictal"):
        train(only_ictal, None, small_encoder, FAST, HEAD)


def test_nonfinite_loss_raises(tiny_pools, small_encoder):
    tr = tiny_pools["train"]
    bad = replace(tr, positions=np.full_like(tr.positions, np.nan))
    with pytest.raises(TrainingError, match="non-finite"):
        train(bad, None, small_encoder, FAST, HEAD)


def test_invalid_config():
    with pytest.raises(ConfigurationError):
        TrainConfig(mode="partial")
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)


@pytest.mark.parametrize("mode", ["frozen", "lora", "full"])
def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_pools, small_encoder, mode):
    res = train(tiny_pools["train"], None, small_encoder, replace(FAST, mode=mode, epochs=1), HEAD)
    path = tmp_path / "model.pt"
    save_checkpoint(path, res.checkpoint)
    restored = model_from_checkpoint(load_checkpoint(path))
    a = predict_logits(res.model, tiny_pools["test"])
    b = predict_logits(restored, tiny_pools["test"])
    np.testing.assert_array_equal(a, b)


def test_checkpoint_without_encoder_needs_one(tiny_pools, small_encoder):
    res = train(tiny_pools["train"], None, small_encoder, replace(FAST, epochs=1), HEAD)
    ckpt = dict(res.checkpoint, encoder=dict(res.checkpoint["encoder"], state=None))
    with pytest.raises(ConfigurationError):
        model_from_checkpoint(ckpt)
    model = model_from_checkpoint(ckpt, encoder=small_encoder)
    np.testing.assert_array_equal(predict_logits(model, tiny_pools["test"]),
                                  predict_logits(res.model, tiny_pools["test"]))


def test_score_segments_carry_metadata(tiny_pools, small_encoder):
    res = train(tiny_pools["train"], None, small_encoder, replace(FAST, epochs=1), HEAD)
    te = tiny_pools["test"]
    scored = score_segments(res.model, te)
    assert [s.video_id for s in scored] == te.video_ids
    assert [s.label for s in scored] == te.labels.tolist()
    assert all(0.0 <= s.score <= 1.0 for s in scored)


def test_experiment_runs_use_consecutive_seeds(tiny_pools, small_encoder):
    cfg = replace(FAST, epochs=2, seed=3)
    exp = run_experiment(tiny_pools["train"], tiny_pools["val"], tiny_pools["test"], small_encoder, cfg,
                         n_runs=2, head_cfg=HEAD)
    assert [r.checkpoint["seed"] for r in exp.results] == [3, 4]
    assert exp.aggregate["n_runs"] == 2
    single = run_experiment(tiny_pools["train"], tiny_pools["val"], tiny_pools["test"], small_encoder, cfg,
                            n_runs=1, head_cfg=HEAD)
    assert single.aggregate["accuracy"]["std"] == 0.0
    with pytest.raises(LeakageError):
        run_experiment(tiny_pools["train"], tiny_pools["val"], tiny_pools["train"], small_encoder, cfg, n_runs=1)
