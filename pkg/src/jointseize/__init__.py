"""Joint-centric video seizure detection with cross-joint attention."""

from .cropper import (CROP_SIZE, ClipArchive, JointClipSet, PositionalTensor, build_positional_tensor,
                      crop_segment, extract_joint_clip)
from .encoder import EncoderAdapter, ReferenceEncoder, VivitAdapter, build_encoder, encode_joint_clip
from .estimator import JointAttentionClassifier
from .evaluator import (MetricsReport, ScoredSegment, Timeline, aggregate_reports, baseline_rows,
                        compute_metrics, timeline)
from .exceptions import (ConfigurationError, DataError, JointSeizeError, LeakageError, OrderingError,
                         ParseError, SchemaError, ShapeError, TrainingError, ValidationError)
from .fusion import FusionHead
from .ingestion import (N_JOINTS, KeypointFrame, KeypointTrack, OnsetAnnotation, read_annotations,
                        read_keypoints)
from .lora import LoraConfig, inject_lora, merge_lora
from .model import JointAttentionModel, SegmentBatch
from .segmenter import SegmentLabel, SegmentSpec, SplitManifest, build_segments, label_segment, make_split
from .synthgen import SynthConfig, generate_dataset, generate_subject
from .trainer import HeadConfig, TrainConfig, run_experiment, train

__version__ = "0.1.0"

__all__ = [
    "CROP_SIZE", "ClipArchive", "ConfigurationError", "DataError", "EncoderAdapter", "FusionHead",
    "HeadConfig", "JointAttentionClassifier", "JointAttentionModel", "JointClipSet", "JointSeizeError",
    "KeypointFrame", "KeypointTrack", "LeakageError", "LoraConfig", "MetricsReport", "N_JOINTS",
    "OnsetAnnotation", "OrderingError", "ParseError", "PositionalTensor", "ReferenceEncoder", "SchemaError",
    "ScoredSegment", "SegmentBatch", "SegmentLabel", "SegmentSpec", "ShapeError", "SplitManifest",
    "SynthConfig", "Timeline", "TrainConfig", "TrainingError", "ValidationError", "VivitAdapter",
    "aggregate_reports", "baseline_rows", "build_encoder", "build_positional_tensor", "build_segments",
    "compute_metrics", "crop_segment", "encode_joint_clip", "extract_joint_clip", "generate_dataset",
    "generate_subject", "inject_lora", "label_segment", "make_split", "merge_lora", "read_annotations",
    "read_keypoints", "run_experiment", "timeline", "train",
]
