"""Command-line entry point: ``jointseize {synth,preprocess,train,eval,timeline}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .cropper import ClipArchive
from .encoder import build_encoder
from .evaluator import (baseline_rows, compute_metrics, read_scored, timeline, write_scored)
from .exceptions import ConfigurationError, DataError, JointSeizeError, TrainingError
from .model import SegmentBatch
from .pipeline import EXCLUDED, load_video_records, segment_video
from .segmenter import SplitManifest, make_split
from .synthgen import generate_dataset, write_dataset
from .trainer import (load_checkpoint, model_from_checkpoint, run_experiment, save_checkpoint,
                      score_segments)

logger = logging.getLogger("jointseize")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
SEGMENTS_FILE = "segments.npz"


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        o.setdefault("train", {})["runs"] = args.runs
    if getattr(args, "mode", None) is not None:
        o.setdefault("train", {})["mode"] = args.mode
    if getattr(args, "stride_s", None) is not None:
        key = "timeline_stride_s" if args.command == "timeline" else "stride_s"
        o.setdefault("segmenter", {})[key] = args.stride_s
    if getattr(args, "data", None) is not None:
        o.setdefault("paths", {})["data_root"] = str(args.data)
    if args.out is not None:
        o.setdefault("paths", {})["out_dir"] = str(args.out)
    return o


def _out_dir(cfg) -> Path:
    if not cfg["paths"]["out_dir"]:
        raise ConfigurationError("an output directory is required (--out or paths.out_dir)")
    return Path(cfg["paths"]["out_dir"])


# ----------------------------------------------------------------------
# synth

def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    scfg = C.synth_config(cfg)
    manifest = write_dataset(generate_dataset(scfg), out, scfg)
    C.write_resolved(cfg, out, "synth")
    print(f"wrote {len(manifest['videos'])} videos to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# preprocess

def preprocess(cfg: dict, data_root, out) -> Path:
    """Segment, label, crop and split every video under ``data_root``."""
    seg_cfg = cfg["segmenter"]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_video_records(data_root, confidence_threshold=seg_cfg["confidence_threshold"])
    if not records:
        raise DataError(f"no annotated videos under {data_root}")
    archive = ClipArchive(out / "archive") if seg_cfg["write_archive"] else None
    batches, rows, totals = [], [], Counter()
    for rec in records:
        def on_segment(seg, label, clipset, pos, rec=rec):
            if archive is not None:
                archive.add(clipset, pos, video_id=rec.video_id, subject_id=rec.subject_id,
                            start_s=seg.start_s, label=label.value)

        batch, counts = segment_video(rec, seg_cfg["stride_s"], seg_cfg["crop_size"], seg_cfg["store_size"],
                                      keep_excluded=True, on_segment=on_segment)
        totals.update(counts)
        batches.append(batch)
        for start, lab in zip(batch.starts, batch.labels):
            rows.append({"video_id": rec.video_id, "subject_id": rec.subject_id, "start_s": float(start),
                         "end_s": float(start) + 5.0,
                         "label": {0: "interictal", 1: "ictal", EXCLUDED: "excluded"}[int(lab)]})
    if archive is not None:
        archive.flush()
    data = SegmentBatch.concat(batches)
    split = make_split(sorted({r.subject_id for r in records}), seg_cfg["n_test"], int(cfg["seed"]),
                       seg_cfg["n_val"], subject_labels=[(r["subject_id"], r["label"]) for r in rows])
    for r in rows:
        r["split"] = split.role_of(r["subject_id"])
    split.save(out / "split.json")
    np.savez(out / SEGMENTS_FILE, clips=data.clips, positions=data.positions, labels=data.labels,
             subjects=np.asarray(data.subjects), video_ids=np.asarray(data.video_ids),
             starts=np.asarray(data.starts, dtype=np.float64))
    counts = {k: totals[k] for k in sorted(totals)}
    _dump(out / "manifest.json", {"data_root": str(data_root), "counts": counts, "segments": rows})
    return out


def load_segments(pre_dir) -> tuple[SegmentBatch, SplitManifest]:
    pre_dir = Path(pre_dir)
    path = pre_dir / SEGMENTS_FILE
    if not path.exists():
        raise DataError(f"{pre_dir} holds no preprocessed segments; run 'preprocess' first")
    with np.load(path) as z:
        batch = SegmentBatch(z["clips"], z["positions"], z["labels"], [str(s) for s in z["subjects"]],
                             [str(v) for v in z["video_ids"]], [float(s) for s in z["starts"]])
    return batch, SplitManifest.load(pre_dir / "split.json")


def resolve_preprocessed(cfg: dict, data) -> Path:
    """A preprocessed directory for ``data``, building it in the cache when needed."""
    data = Path(data)
    if (data / SEGMENTS_FILE).exists():
        return data
    key = C.config_hash({"root": str(data.resolve()), "segmenter": cfg["segmenter"], "seed": cfg["seed"]})
    target = C.cache_dir(cfg) / f"pre-{key}"
    if not (target / SEGMENTS_FILE).exists():
        logger.info("preprocessing %s into cache %s", data, target)
        preprocess(cfg, data, target)
    return target


def cmd_preprocess(cfg: dict) -> int:
    if not cfg["paths"]["data_root"]:
        raise ConfigurationError("a dataset directory is required (--data or paths.data_root)")
    out = _out_dir(cfg)
    preprocess(cfg, cfg["paths"]["data_root"], out)
    C.write_resolved(cfg, out, "preprocess")
    counts = json.loads((out / "manifest.json").read_text())["counts"]
    print(f"segments: {counts}")
    return EXIT_OK


# ----------------------------------------------------------------------
# train / eval

def _pools(batch: SegmentBatch, split: SplitManifest):
    labeled = batch[np.flatnonzero(batch.labels != EXCLUDED)]
    return (labeled.where_subjects(split.fit_subjects), labeled.where_subjects(split.val_subjects),
            labeled.where_subjects(split.test_subjects))


def cmd_train(cfg: dict) -> int:
    if not cfg["paths"]["data_root"]:
        raise ConfigurationError("a dataset or preprocessed directory is required (--data)")
    out = _out_dir(cfg)
    C.write_resolved(cfg, out, "train")
    batch, split = load_segments(resolve_preprocessed(cfg, cfg["paths"]["data_root"]))
    train_pool, val_pool, test_pool = _pools(batch, split)
    backend, kwargs = C.encoder_kwargs(cfg)
    torch.manual_seed(int(cfg["seed"]))
    exp = run_experiment(train_pool, val_pool if len(val_pool) else None, test_pool,
                         build_encoder(backend, **kwargs), C.train_config(cfg), int(cfg["train"]["runs"]),
                         C.head_config(cfg), C.lora_config(cfg))
    for i, (res, rep, scored) in enumerate(zip(exp.results, exp.reports, exp.scored)):
        run_dir = out / f"run_{i}"
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "model.pt", res.checkpoint)
        (run_dir / "log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in res.log))
        _dump(run_dir / "metrics.json", rep.to_dict())
        write_scored(run_dir / "scores.json", scored)
    _dump(out / "metrics.json", {"aggregate": exp.aggregate, "runs": [r.to_dict() for r in exp.reports],
                                 "split": split.to_dict()})
    auroc = exp.aggregate.get("auroc")
    print("test auroc: " + ("n/a" if not auroc else f"{auroc['mean']:.3f} +/- {auroc['std']:.3f}"))
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    C.write_resolved(cfg, out, "eval")
    threshold = float(cfg["eval"]["threshold"])
    if args.scores:
        scored = read_scored(args.scores)
    else:
        if not args.checkpoint or not cfg["paths"]["data_root"]:
            raise ConfigurationError("eval needs --scores, or --checkpoint with --data")
        batch, split = load_segments(resolve_preprocessed(cfg, cfg["paths"]["data_root"]))
        _, _, test_pool = _pools(batch, split)
        model = model_from_checkpoint(load_checkpoint(args.checkpoint), _pretrained_encoder(cfg))
        scored = score_segments(model, test_pool)
        write_scored(out / "scores.json", scored)
    labeled = [s for s in scored if s.label is not None]
    if not labeled:
        raise DataError("no labeled segments to evaluate")
    report = compute_metrics(labeled, threshold)
    n_pos = sum(s.label for s in labeled)
    baselines = baseline_rows(len(labeled) - n_pos, n_pos) if 0 < n_pos < len(labeled) else {}
    _dump(out / "metrics.json", {"report": report.to_dict(),
                                 "baselines": {k: v.to_dict() for k, v in baselines.items()}})
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def _pretrained_encoder(cfg):
    if cfg["model"]["backend"] == "reference":
        return None
    backend, kwargs = C.encoder_kwargs(cfg)
    return build_encoder(backend, **kwargs)


# ----------------------------------------------------------------------
# timeline

def cmd_timeline(cfg: dict, args) -> int:
    if not args.checkpoint or not cfg["paths"]["data_root"]:
        raise ConfigurationError("timeline needs --checkpoint and --data (raw dataset directory)")
    out = _out_dir(cfg)
    C.write_resolved(cfg, out, "timeline")
    seg_cfg = cfg["segmenter"]
    records = load_video_records(cfg["paths"]["data_root"], confidence_threshold=seg_cfg["confidence_threshold"])
    if args.video:
        wanted = set(args.video)
        missing = wanted - {r.video_id for r in records}
        if missing:
            raise DataError(f"unknown video ids: {sorted(missing)}")
        records = [r for r in records if r.video_id in wanted]
    model = model_from_checkpoint(load_checkpoint(args.checkpoint), _pretrained_encoder(cfg))
    written = []
    for rec in records:
        batch, _ = segment_video(rec, seg_cfg["timeline_stride_s"], seg_cfg["crop_size"], seg_cfg["store_size"],
                                 keep_excluded=True)
        tl = timeline(score_segments(model, batch), rec.annotation)
        tl.save(out / f"timeline_{rec.video_id}.json")
        if not args.no_plot:
            tl.plot(out / f"timeline_{rec.video_id}.png", float(cfg["eval"]["threshold"]))
        written.append(rec.video_id)
    print(f"timelines for {len(written)} videos in {out}")
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointseize", description="Joint-centric video seizure detection.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", type=Path, help="YAML/JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        if data:
            p.add_argument("--data", type=Path, help="dataset (or preprocessed) directory")
        return p

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    common(sub.add_parser("preprocess", help="segment, label and crop a dataset"), data=True)
    p = common(sub.add_parser("train", help="train and test over several seeds"), data=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--mode", choices=("frozen", "lora", "full"))
    for name in ("preprocess", "train"):
        sub.choices[name].add_argument("--stride-s", type=float)
    p = common(sub.add_parser("eval", help="metrics for a checkpoint or a scored-segment file"), data=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--scores", type=Path, help="scored-segment JSON file")
    p = common(sub.add_parser("timeline", help="per-second predictions aligned to clinical onset"), data=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--video", action="append", help="restrict to this video id (repeatable)")
    p.add_argument("--stride-s", type=float)
    p.add_argument("--no-plot", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, _overrides(args))
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        return cmd_timeline(cfg, args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (JointSeizeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
