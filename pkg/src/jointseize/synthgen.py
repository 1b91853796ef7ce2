"""Synthetic patients: stick-figure videos with rhythmic ictal motion.

Each subject gets a body scale, colour palette, background texture and a set
of joints that oscillate together once the seizure starts. Frames are
rendered on demand, so a generated video costs only its keypoints and one
background image until frames are requested or written to disk.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .exceptions import ConfigurationError, DataError
from .ingestion import (JOINT_NAMES, N_JOINTS, KeypointTrack, OnsetAnnotation, write_annotations,
                        write_keypoints)

# Upright body template, units of half body height, origin at mid-hip.
TEMPLATE = np.array([
    [0.00, -1.00],   # head
    [0.00, -0.78],   # neck
    [-0.24, -0.72],  # r_shoulder
    [-0.34, -0.42],  # r_elbow
    [-0.40, -0.12],  # r_wrist
    [0.24, -0.72],   # l_shoulder
    [0.34, -0.42],   # l_elbow
    [0.40, -0.12],   # l_wrist
    [-0.14, 0.00],   # r_hip
    [-0.16, 0.45],   # r_knee
    [-0.18, 0.90],   # r_ankle
    [0.14, 0.00],    # l_hip
    [0.16, 0.45],    # l_knee
    [0.18, 0.90],    # l_ankle
])
LIMBS = ((0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
         (1, 11), (11, 12), (12, 13), (8, 11), (2, 5))
ICTAL_RAMP_S = 1.0
PRECURSOR_FRACTION = 0.3
# Relative amplitude of joints outside the coupled subset.
SYMPATHETIC_GAIN = 0.25


@dataclass
class SynthConfig:
    n_subjects: int = 8
    videos_per_subject: int = 2
    duration_s: float = 60.0
    frame_height: int = 360
    frame_width: int = 640
    fps: int = 30
    ictal_band_hz: tuple = (2.0, 5.0)
    ictal_amplitude_px: float = 10.0
    interictal_jitter_px: float = 2.0
    min_coupled_joints: int = 3
    distractor_amplitude_px: float = 40.0
    in_bounds: bool = True
    crop_size: int = 120
    confidence: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.ictal_band_hz = tuple(float(f) for f in self.ictal_band_hz)
        lo, hi = self.ictal_band_hz
        if not 0 < lo < hi:
            raise ConfigurationError(f"invalid ictal band {self.ictal_band_hz}")
        if self.ictal_amplitude_px <= self.interictal_jitter_px:
            raise ConfigurationError("ictal amplitude must exceed interictal jitter amplitude")
        if self.interictal_jitter_px < 0:
            raise ConfigurationError("jitter amplitude must be non-negative")
        if self.duration_s < 20:
            raise ConfigurationError(f"duration_s must be >= 20, got {self.duration_s}")
        if self.n_subjects < 1 or self.videos_per_subject < 1:
            raise ConfigurationError("need at least one subject and one video per subject")
        if not 3 <= self.min_coupled_joints <= N_JOINTS:
            raise ConfigurationError("min_coupled_joints must be in [3, 14]")
        if min(self.frame_height, self.frame_width) < 2 * self.crop_size:
            raise ConfigurationError("frame must be at least twice the crop size in each dimension")

    def to_dict(self):
        d = asdict(self)
        d["ictal_band_hz"] = list(self.ictal_band_hz)
        return d


def subject_id(index: int) -> str:
    return f"S{index:02d}"


@dataclass
class SyntheticVideo:
    video_id: str
    subject_id: str
    annotation: OnsetAnnotation
    track: KeypointTrack
    source: "SyntheticFrameSource"
    coupled_joints: tuple
    frequency_hz: float
    envelope: np.ndarray = field(repr=False, default=None)

    def intended_label(self, start_s: float, end_s: float) -> str | None:
        """Generator-side class of a time span.

        ``"ictal"`` when the oscillation envelope stays at or above the
        precursor level for the whole span, ``"interictal"`` when it is zero
        throughout, ``None`` otherwise.
        """
        fps = self.annotation.fps_native
        a = int(round(start_s * fps))
        b = min(int(round(end_s * fps)), self.envelope.size)
        env = self.envelope[a:b]
        if env.size == 0:
            return None
        if np.all(env == 0):
            return "interictal"
        if np.all(env >= PRECURSOR_FRACTION - 1e-9):
            return "ictal"
        return None


@dataclass
class SyntheticSubject:
    subject_id: str
    videos: list


class SyntheticFrameSource:
    """Renders frame ``i`` of a synthetic video from its keypoints."""

    def __init__(self, video_id, background, track: KeypointTrack, style: dict, distractor: dict):
        self.video_id = video_id
        self.background = background
        self.height, self.width = background.shape[:2]
        self.track = track
        self.style = style
        self.distractor = distractor

    def __len__(self):
        return len(self.track)

    def __getitem__(self, index):
        if not 0 <= index < len(self):
            raise DataError(f"{self.video_id}: frame {index} outside [0, {len(self)})")
        frame = self.background.copy()
        self._draw_distractor(frame, index)
        self._draw_figure(frame, self.track.xy[index])
        return frame

    def _draw_distractor(self, frame, index):
        d = self.distractor
        if d is None:
            return
        t = index / d["fps"]
        dx = d["amplitude"] * np.sin(2 * np.pi * d["freq"] * t + d["phase"])
        x0 = int(round(d["x"] + dx))
        y0 = int(d["y"])
        patch = d["patch"]
        h, w = patch.shape[:2]
        x0c, x1c = max(x0, 0), min(x0 + w, self.width)
        if x0c < x1c:
            frame[y0:y0 + h, x0c:x1c] = patch[:, x0c - x0:x1c - x0]

    def _draw_figure(self, frame, xy):
        s = self.style
        pts = np.floor(xy + 0.5).astype(np.int32)
        for a, b in LIMBS:
            cv2.line(frame, tuple(int(v) for v in pts[a]), tuple(int(v) for v in pts[b]),
                     s["limb_color"], s["limb_width"], lineType=cv2.LINE_8)
        for j, p in enumerate(pts):
            radius = s["head_radius"] if j == 0 else s["joint_radius"]
            cv2.circle(frame, (int(p[0]), int(p[1])), radius, s["joint_colors"][j], -1, lineType=cv2.LINE_8)
            cv2.circle(frame, (int(p[0]), int(p[1])), max(radius // 3, 1), s["marker_color"], -1,
                       lineType=cv2.LINE_8)


def _texture(rng, H, W, base_color, contrast, blur):
    noise = rng.normal(0.0, 1.0, size=(H // 4 + 1, W // 4 + 1, 3)).astype(np.float32)
    noise = cv2.resize(noise, (W, H), interpolation=cv2.INTER_CUBIC)
    if blur > 0:
        noise = cv2.GaussianBlur(noise, (0, 0), blur)
    noise /= noise.std() + 1e-6
    img = np.asarray(base_color, np.float32) + contrast * noise
    return np.clip(img, 0, 255).astype(np.uint8)


def _smooth_motion(rng, n, fps, amplitude, n_terms=4, f_max=0.8):
    """Sum of slow sinusoids with peak magnitude at most ``amplitude``."""
    t = np.arange(n) / fps
    out = np.zeros((n, 2))
    if amplitude == 0:
        return out
    weights = rng.dirichlet(np.ones(n_terms))
    for k in range(n_terms):
        f = rng.uniform(0.05, f_max)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        out += amplitude * weights[k] * np.sin(2 * np.pi * f * t[:, None] + phase)
    return out


def _envelope(n, fps, eeg_s, clinical_s):
    t = np.arange(n) / fps
    env = np.zeros(n)
    pre = (t >= eeg_s) & (t < clinical_s)
    if clinical_s > eeg_s:
        env[pre] = PRECURSOR_FRACTION * (t[pre] - eeg_s) / (clinical_s - eeg_s)
    post = t >= clinical_s
    env[post] = np.minimum(1.0, PRECURSOR_FRACTION + (1 - PRECURSOR_FRACTION) * (t[post] - clinical_s) / ICTAL_RAMP_S)
    return env


def _subject_traits(cfg: SynthConfig, rng):
    H = cfg.frame_height
    n_coupled = int(rng.integers(cfg.min_coupled_joints, min(cfg.min_coupled_joints + 4, N_JOINTS) + 1))
    palette = rng.uniform(40, 215, size=3)
    return {
        "coupled": tuple(sorted(rng.choice(N_JOINTS, size=n_coupled, replace=False).tolist())),
        "scale": H * rng.uniform(0.22, 0.28),
        "palette": palette,
        "contrast": rng.uniform(15, 45),
        "blur": rng.uniform(0.0, 3.0),
        "limb_color": tuple(int(c) for c in rng.integers(30, 256, size=3)),
        "limb_width": int(rng.integers(3, 7)),
        "joint_radius": int(rng.integers(4, 8)),
        "distractor_level": rng.uniform(0.0, 1.0),
    }


def _video(cfg: SynthConfig, traits: dict, sid: str, vindex: int, rng) -> SyntheticVideo:
    H, W, fps = cfg.frame_height, cfg.frame_width, cfg.fps
    n = int(round(cfg.duration_s * fps))
    video_id = f"{sid}_v{vindex:02d}"

    clinical = float(np.round(rng.uniform(0.35, 0.5) * cfg.duration_s, 1))
    eeg = float(np.round(clinical - rng.uniform(2.0, min(8.0, clinical)), 1))
    eeg = max(eeg, 0.0)
    ann = OnsetAnnotation(video_id, sid, eeg, clinical, float(cfg.duration_s), float(fps))

    scale = traits["scale"] * rng.uniform(0.95, 1.05)
    body = TEMPLATE * scale
    disp_bound = cfg.ictal_amplitude_px + 2 * cfg.interictal_jitter_px
    margin = cfg.crop_size // 2 if cfg.in_bounds else 0
    lo = -body.min(axis=0) + margin + disp_bound + 1
    hi = np.array([W, H]) - body.max(axis=0) - margin - disp_bound - 1
    if np.any(hi < lo):
        raise ConfigurationError("frame too small for the figure at this crop size")
    centre = rng.uniform(lo, hi)

    t = np.arange(n) / fps
    drift = _smooth_motion(rng, n, fps, cfg.interictal_jitter_px, f_max=0.3)
    xy = np.repeat((body + centre)[None], n, axis=0) + drift[:, None, :]
    for j in range(N_JOINTS):
        xy[:, j] += _smooth_motion(rng, n, fps, cfg.interictal_jitter_px, f_max=0.8)

    lo_f, hi_f = cfg.ictal_band_hz
    freq = float(rng.uniform(lo_f, hi_f))
    env = _envelope(n, fps, eeg, clinical)
    phase = rng.uniform(0, 2 * np.pi)
    osc = np.sin(2 * np.pi * freq * t + phase)
    for j in range(N_JOINTS):
        angle = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.cos(angle), np.sin(angle)])
        if j in traits["coupled"]:
            wave = osc
            gain = 1.0
        else:
            wave = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            gain = SYMPATHETIC_GAIN
        xy[:, j] += gain * cfg.ictal_amplitude_px * (env * wave)[:, None] * direction

    track = KeypointTrack(xy=xy, confidence=np.full((n, N_JOINTS), cfg.confidence),
                          present=np.ones((n, N_JOINTS), dtype=bool))

    bg_color = np.clip(traits["palette"] + rng.normal(0, 6, size=3), 0, 255)
    background = _texture(rng, H, W, bg_color, traits["contrast"], traits["blur"])
    style = {
        "limb_color": traits["limb_color"],
        "limb_width": traits["limb_width"],
        "joint_radius": traits["joint_radius"],
        "head_radius": traits["joint_radius"] * 2,
        "joint_colors": [tuple(int(c) for c in col) for col in rng.integers(60, 256, size=(N_JOINTS, 3))],
        "marker_color": (20, 20, 20),
    }

    distractor = None
    level = traits["distractor_level"] * rng.uniform(0.7, 1.3)
    if level > 0.15 and cfg.distractor_amplitude_px > 0:
        # Stay clear of every crop window the figure can produce.
        fig_x0 = centre[0] + body[:, 0].min() - disp_bound - cfg.crop_size // 2
        fig_x1 = centre[0] + body[:, 0].max() + disp_bound + cfg.crop_size // 2
        amp = cfg.distractor_amplitude_px * min(level, 1.0)
        pw = int(min(60, W // 10))
        ph = int(min(80, H // 4))
        left_room = fig_x0 - 2 * amp - pw
        right_room = W - fig_x1 - 2 * amp - pw
        if max(left_room, right_room) > 0:
            if left_room >= right_room:
                x = rng.uniform(amp, amp + left_room)
            else:
                x = rng.uniform(fig_x1 + amp, fig_x1 + amp + right_room)
            patch = _texture(rng, ph, pw, rng.uniform(30, 225, size=3), 50.0, 0.0)
            distractor = {
                "x": float(x), "y": int(rng.integers(0, H - ph)), "amplitude": float(amp),
                "freq": float(rng.uniform(0.5, 5.0)), "phase": float(rng.uniform(0, 2 * np.pi)),
                "patch": patch, "fps": fps,
            }

    source = SyntheticFrameSource(video_id, background, track, style, distractor)
    return SyntheticVideo(video_id, sid, ann, track, source, traits["coupled"], freq, env)


def generate_subject(cfg: SynthConfig, subject_index: int) -> SyntheticSubject:
    """All videos of one synthetic subject, seeded by ``(cfg.seed, subject_index)``."""
    rng = np.random.default_rng([cfg.seed, subject_index])
    sid = subject_id(subject_index)
    traits = _subject_traits(cfg, rng)
    videos = [_video(cfg, traits, sid, v, rng) for v in range(cfg.videos_per_subject)]
    return SyntheticSubject(sid, videos)


def generate_dataset(cfg: SynthConfig) -> list[SyntheticSubject]:
    return [generate_subject(cfg, i) for i in range(cfg.n_subjects)]


def write_dataset(subjects, out_dir, cfg: SynthConfig | None = None, frame_format: str = "jpg",
                  write_frames: bool = True) -> dict:
    """Write frames, keypoints and annotations in the ingestion formats.

    Layout: ``frames/<video_id>/NNNNNN.<ext>``, ``keypoints/<video_id>.jsonl``,
    ``annotations.json`` and ``manifest.json``.
    """
    out = Path(out_dir)
    (out / "keypoints").mkdir(parents=True, exist_ok=True)
    params = [cv2.IMWRITE_JPEG_QUALITY, 95] if frame_format == "jpg" else []
    anns, videos = [], []
    for subj in subjects:
        for v in subj.videos:
            write_keypoints(out / "keypoints" / f"{v.video_id}.jsonl", v.track)
            if write_frames:
                fdir = out / "frames" / v.video_id
                fdir.mkdir(parents=True, exist_ok=True)
                for i in range(len(v.source)):
                    bgr = cv2.cvtColor(v.source[i], cv2.COLOR_RGB2BGR)
                    cv2.imwrite(str(fdir / f"{i:06d}.{frame_format}"), bgr, params)
            anns.append(v.annotation)
            videos.append({
                "video_id": v.video_id, "subject_id": v.subject_id,
                "frames": f"frames/{v.video_id}", "keypoints": f"keypoints/{v.video_id}.jsonl",
                "n_frames": len(v.track), "coupled_joints": [JOINT_NAMES[j] for j in v.coupled_joints],
                "frequency_hz": round(v.frequency_hz, 6),
            })
    write_annotations(out / "annotations.json", anns)
    manifest = {"config": cfg.to_dict() if cfg else None, "videos": videos}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
