"""One test per acceptance criterion, each at its stated tolerance.

Every test records a verdict line; the lines are printed together at the end
of the pytest run (see ``pytest_terminal_summary`` in conftest.py).
"""

import copy
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from fullframe import full_frame_batch
from oracles import (attention_2x2, exhaustive_average_precision, finite_difference_check, pairwise_auroc,
                     per_second_label, window_mask)

from jointseize.cropper import build_positional_tensor, crop_segment
from jointseize.encoder import ReferenceEncoder
from jointseize.evaluator import auroc, average_precision, baseline_rows
from jointseize.fusion import AttentionBlock, FusionHead
from jointseize.ingestion import ArrayFrameSource, KeypointTrack, OnsetAnnotation
from jointseize.lora import LoraConfig, inject_lora, lora_modules, merge_lora
from jointseize.model import JointAttentionModel
from jointseize.pipeline import records_from_synthetic, segment_videos
from jointseize.segmenter import (SegmentLabel, SegmentSpec, build_segments, label_segment, make_split,
                                  segment_frame_indices)
from jointseize.synthgen import SynthConfig, generate_dataset
from jointseize.trainer import (HeadConfig, TrainConfig, load_checkpoint, model_from_checkpoint, predict_logits,
                                run_experiment, save_checkpoint)


def verdict(n, ok, detail):
    ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
    assert ok, f"criterion {n}: {detail}"


def test_criterion_01_baseline_rows():
    t0 = time.perf_counter()
    rows = baseline_rows(565, 387)
    elapsed = time.perf_counter() - t0
    pos, neg = rows["all_positive"], rows["all_negative"]
    expected = {"precision": 0.407, "recall": 1.000, "f1": 0.578, "auprc": 0.407}
    got = {k: getattr(pos, k) for k in expected}
    errs = {k: abs(got[k] - v) for k, v in expected.items()}
    errs["accuracy(all-negative)"] = abs(neg.accuracy - 0.593)
    ok = max(errs.values()) <= 5e-4 and elapsed < 1.0
    verdict(1, ok, f"max |diff| vs reference {max(errs.values()):.5f} (tol 0.0005), {elapsed * 1e3:.1f} ms")


def test_criterion_02_not_desk_reproducible():
    ACCEPTANCE[2] = ("SKIP", "clinical dataset and pretrained backbone required; substituted by criteria 3-9")
    pytest.skip("not reproducible at desk scale; criteria 3-9 stand in for it")


def _clips(n, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 10, 3, 16, 16, generator=g)


def test_criterion_03_lora_zero_init_and_merge():
    base = ReferenceEncoder(d=16, heads=2, num_frames=10, input_size=16, tubelet=(5, 8, 8), seed=0).eval()
    adapted = copy.deepcopy(base)
    inject_lora(adapted, LoraConfig(), seed=0)
    adapted.eval()
    x = _clips(100, 0)
    with torch.no_grad():
        zero_err = (adapted(x) - base(x)).abs().max().item()
        for m in lora_modules(adapted).values():
            m.lora_B.normal_(0, 0.1)
        before = adapted(x)
        merge_lora(adapted)
        merge_err = (adapted(x) - before).abs().max().item()
    ok = zero_err <= 1e-6 and merge_err <= 1e-5
    verdict(3, ok, f"zero-init max diff {zero_err:.2e} (tol 1e-6), merge max diff {merge_err:.2e} (tol 1e-5)")


def test_criterion_04_attention():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    worst_row = 0.0
    for i in range(1000):
        J, heads = int(rng.integers(1, 15)), int(rng.choice([1, 2, 4]))
        blk = AttentionBlock(8, heads)
        tokens = torch.randn(J, 8) * float(10 ** rng.uniform(-2, 2))
        w = blk.attention_weights(tokens)
        worst_row = max(worst_row, (w.sum(-1) - 1).abs().max().item())

    tokens = rng.normal(size=(2, 2))
    mats = [rng.normal(size=(2, 2)) for _ in range(4)]
    biases = [rng.normal(size=2) for _ in range(4)]
    blk = AttentionBlock(2, heads=1).double()
    with torch.no_grad():
        for lin, m, b in zip((blk.q_proj, blk.k_proj, blk.v_proj, blk.out_proj), mats, biases):
            lin.weight.copy_(torch.as_tensor(m))
            lin.bias.copy_(torch.as_tensor(b))
        out, w = blk(torch.as_tensor(tokens), return_weights=True)
    ref_out, ref_w = attention_2x2(tokens, *mats, *biases)
    oracle_err = max(np.abs(out.numpy() - ref_out).max(), np.abs(w[0].numpy() - ref_w).max())

    head = FusionHead(16, n_frames=4, heads=4).eval()
    tok = torch.randn(14, 16)
    pos = torch.rand(14, 4, 3)
    with torch.no_grad():
        base = head(tok, pos).item()
        perm_err = max(abs(head(tok[p], pos[p]).item() - base)
                       for p in (torch.randperm(14) for _ in range(100)))
    ok = worst_row <= 1e-6 and oracle_err <= 1e-6 and perm_err <= 1e-6
    verdict(4, ok, f"row-sum err {worst_row:.1e}, 2x2 oracle err {oracle_err:.1e}, "
                   f"permutation err {perm_err:.1e} (tol 1e-6 each)")


def test_criterion_05_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    head = FusionHead(8, n_frames=3, heads=2).double()
    tokens = torch.randn(5, 4, 8, dtype=torch.float64)
    pos = torch.rand(5, 4, 3, 3, dtype=torch.float64)
    y = torch.tensor([0.0, 1.0, 1.0, 0.0, 1.0], dtype=torch.float64)
    head_err = finite_difference_check(
        lambda: torch.nn.functional.binary_cross_entropy_with_logits(head(tokens, pos), y), list(head.parameters()))

    enc = ReferenceEncoder(d=16, depth=2, heads=2, num_frames=4, input_size=16, tubelet=(2, 8, 8), seed=1).double()
    x = torch.randn(2, 4, 3, 16, 16, dtype=torch.float64)
    r = torch.randn(2, 16, dtype=torch.float64)
    enc_err = finite_difference_check(lambda: (enc(x) * r).sum(), list(enc.parameters()), n_entries=40)
    elapsed = time.perf_counter() - t0
    ok = head_err < 1e-4 and enc_err < 1e-4 and elapsed < 60
    verdict(5, ok, f"head rel err {head_err:.1e}, encoder rel err {enc_err:.1e} (tol 1e-4), {elapsed:.1f} s")


def test_criterion_06_background_invariance():
    rng = np.random.default_rng(0)
    n = 150
    frames = rng.integers(0, 256, (n, 360, 640, 3), dtype=np.uint8)
    xy = rng.uniform([100, 80], [540, 280], (n, 14, 2))
    track = KeypointTrack(xy, np.full((n, 14), 0.9), np.ones((n, 14), bool))
    seg = SegmentSpec("v", 0.0, frame_indices=segment_frame_indices(0.0))
    before = crop_segment(ArrayFrameSource(frames), seg, track)

    perturbed = frames.copy()
    changed = 0
    for t in seg.frame_indices:
        ys, xs = np.nonzero(~window_mask(xy[t], 360, 640))
        pick = rng.choice(ys.size, size=min(2000, ys.size), replace=False)
        perturbed[t, ys[pick], xs[pick]] ^= 0xFF
        changed += pick.size
    after = crop_segment(ArrayFrameSource(perturbed), seg, track)

    model = JointAttentionModel(ReferenceEncoder(d=16, heads=2, input_size=24, seed=0),
                                FusionHead(16, 30, heads=2)).eval()

    def logit(cs):
        pos = torch.as_tensor(build_positional_tensor(cs, 360, 640).values, dtype=torch.float32)
        with torch.no_grad():
            return model(torch.as_tensor(cs.clips[None]), pos[None]).item()

    same_clips = all(np.array_equal(getattr(before, f), getattr(after, f)) for f in ("clips", "coords", "present"))
    same_logit = logit(before) == logit(after)
    ok = changed >= 10_000 and same_clips and same_logit
    verdict(6, ok, f"{changed} background pixels changed; clip sets identical={same_clips}, "
                   f"logits identical={same_logit}")


def test_criterion_07_label_oracle():
    rng = np.random.default_rng(7)
    checked = mismatches = both = 0
    for _ in range(1000):
        duration = int(rng.integers(5, 200))
        eeg = int(rng.integers(0, duration + 1))
        clinical = int(rng.integers(eeg, duration + 1))
        ann = OnsetAnnotation("v", "s", eeg, clinical, duration)
        for seg in build_segments(ann, 1):
            label = label_segment(seg, ann)
            mismatches += label.value != per_second_label(int(seg.start_s), eeg, clinical)
            interictal_rule = seg.end_s <= eeg
            ictal_rule = clinical <= seg.start_s < clinical + 40
            both += interictal_rule and ictal_rule
            checked += 1
    ok = mismatches == 0 and both == 0
    verdict(7, ok, f"{checked} segments over 1000 annotations: {mismatches} mismatches, "
                   f"{both} satisfying both rules")


def test_criterion_08_metric_oracles():
    rng = np.random.default_rng(3)
    worst = 0.0
    instances = 0
    for n in range(2, 51):
        for _ in range(20):
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
            worst = max(worst, abs(auroc(scores, labels) - pairwise_auroc(scores, labels)),
                        abs(average_precision(scores, labels) - exhaustive_average_precision(scores, labels)))
            instances += 1

    # Strictly increasing and free of saturation over the score range, so no new ties.
    maps = [np.exp, np.arcsinh, np.cbrt, lambda s: s ** 3, lambda s: s + 0.1 * s ** 5]
    scores = rng.normal(size=40)
    labels = np.r_[np.zeros(20, int), np.ones(20, int)]
    ref = auroc(scores, labels)
    worst_mono = 0.0
    for i in range(100):
        a, b = rng.uniform(0.1, 5), rng.normal()
        mapped = maps[i % len(maps)](a * scores + b)
        worst_mono = max(worst_mono, abs(auroc(mapped, labels) - ref))
    ok = worst <= 1e-9 and worst_mono <= 1e-9
    verdict(8, ok, f"{instances} instances n<=50: max oracle diff {worst:.1e}; "
                   f"100 monotone maps: max AUROC change {worst_mono:.1e} (tol 1e-9)")


E2E_TRAIN = TrainConfig(mode="full", epochs=30, lr=1e-3, batch_size=16, patience=5, seed=0)


@pytest.mark.slow
def test_criterion_09_synthetic_generalization():
    t0 = time.perf_counter()
    subjects = generate_dataset(SynthConfig(seed=0))
    records = records_from_synthetic(subjects)
    split = make_split([s.subject_id for s in subjects], n_test=2, seed=0, n_val=1)

    def pools(batch):
        return tuple(batch.where_subjects(s) for s in (split.fit_subjects, split.val_subjects, split.test_subjects))

    joint, _ = segment_videos(records, stride_s=5.0, store_size=24)
    joint = joint[np.flatnonzero(joint.labels >= 0)]
    tr, va, te = pools(joint)
    main = run_experiment(tr, va, te, ReferenceEncoder(seed=0), E2E_TRAIN, n_runs=3)
    t_main = time.perf_counter() - t0
    del joint, tr, va

    full = full_frame_batch(records, stride_s=5.0, size=96)
    ftr, fva, fte = pools(full)
    ablation = run_experiment(ftr, fva, fte, ReferenceEncoder(input_size=96, tubelet=(5, 16, 16), seed=0),
                              E2E_TRAIN, n_runs=3)
    elapsed = time.perf_counter() - t0

    roc = main.aggregate["auroc"]["mean"]
    prc = main.aggregate["auprc"]["mean"]
    roc_full = ablation.aggregate["auroc"]["mean"]
    ok = roc >= 0.95 and prc >= 0.90 and roc - roc_full >= 0.10 and elapsed <= 600
    verdict(9, ok, f"joint-centric AUROC {roc:.3f} AUPRC {prc:.3f} (3 seeds, {len(te)} test segments); "
                   f"full-frame AUROC {roc_full:.3f} (gap {roc - roc_full:.3f}); "
                   f"{elapsed:.0f} s total ({t_main:.0f} s joint-centric) on {torch.get_num_threads()} thread(s)")


def test_criterion_10_determinism(tmp_path, tiny_pools, small_encoder):
    cfg = TrainConfig(mode="lora", epochs=3, lr=1e-3, lr_lora=1e-3, batch_size=8, seed=5)
    head = HeadConfig(heads=2)
    runs = []
    for i in range(2):
        exp = run_experiment(tiny_pools["train"], tiny_pools["val"], tiny_pools["test"], small_encoder, cfg,
                             n_runs=1, head_cfg=head)
        path = tmp_path / f"run{i}.pt"
        save_checkpoint(path, exp.results[0].checkpoint)
        logits = predict_logits(model_from_checkpoint(load_checkpoint(path)), tiny_pools["test"])
        runs.append((exp.reports[0].to_dict(), logits))
    same_metrics = runs[0][0] == runs[1][0]
    same_outputs = np.array_equal(runs[0][1], runs[1][1])
    verdict(10, same_metrics and same_outputs,
            f"metrics identical={same_metrics}, checkpoint forward outputs identical={same_outputs}")
