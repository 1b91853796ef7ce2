import json

import numpy as np
import pytest
import torch

from jointseize.ingestion import N_JOINTS


def keypoint_line(frame, xy=None, conf=0.9):
    xy = np.full((N_JOINTS, 2), 100.0) if xy is None else np.asarray(xy, dtype=float)
    conf = np.broadcast_to(np.asarray(conf, dtype=float), (N_JOINTS,))
    joints = [{"id": j, "x": float(xy[j, 0]), "y": float(xy[j, 1]), "c": float(conf[j])} for j in range(N_JOINTS)]
    return json.dumps({"frame": frame, "joints": joints})


@pytest.fixture
def write_lines(tmp_path):
    def _write(lines, name="kp.jsonl"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n")
        return path
    return _write


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_pools():
    """Four synthetic subjects segmented at 5 s, clips stored at 24 px.

    Returns train (S00, S01), val (S02) and test (S03) batches.
    """
    from jointseize.pipeline import records_from_synthetic, segment_videos
    from jointseize.synthgen import SynthConfig, generate_dataset

    cfg = SynthConfig(n_subjects=4, videos_per_subject=1, duration_s=60.0)
    batch, _ = segment_videos(records_from_synthetic(generate_dataset(cfg)), stride_s=5.0, store_size=24)
    return {
        "train": batch.where_subjects(["S00", "S01"]),
        "val": batch.where_subjects(["S02"]),
        "test": batch.where_subjects(["S03"]),
    }


@pytest.fixture(scope="session")
def small_encoder():
    from jointseize.encoder import ReferenceEncoder

    return ReferenceEncoder(d=16, depth=2, heads=2, input_size=24, seed=0)


# Criterion number -> (status, detail), filled by test_acceptance.py.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n}: {detail}")
