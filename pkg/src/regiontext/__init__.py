"""regiontext: localize foreground regions and describe each one in free-form text.

A desk-scale, fully self-contained pipeline: an fp64 autodiff tensor core, a
subword tokenizer, a windowed-attention visual encoder with a five-scale
feature pyramid, a class-agnostic cascade foreground extractor, an
autoregressive text decoder with task-style begin tokens and branch-first
beam search, and the detection / dense-captioning evaluation stack.
"""

from .data import (
    Dataset,
    RegionAnnotation,
    SyntheticScene,
    classify_style,
    generate_dataset,
    generate_scene,
    load_dataset,
    save_dataset,
)
from .decoder import (
    DecoderConfig,
    DescriptionCandidate,
    DetectedObject,
    TextDecoder,
    build_seq2seq_mask,
    score_object,
)
from .encoder import EncoderConfig, FeaturePyramid, VisualEncoder, window_partition
from .errors import ConfigError, ContractError, IntegrityError, NumericError
from .extractor import (
    Box,
    ExtractorConfig,
    ForegroundObject,
    Proposal,
    RegionExtractor,
    assign_targets,
    iou,
    nms,
    soft_nms,
)
from .gradcheck import grad_check, primitive_battery
from .infer import run_inference, write_predictions
from .metrics import (
    GroundTruthRegion,
    PredictionRecord,
    ThresholdGrid,
    densecap_map,
    detection_ap,
    meteor,
)
from .model import Pipeline, PipelineConfig, build_example
from .tensor import Tensor, backward, cross_entropy_label_smoothed, no_grad
from .tokenizer import Vocabulary, build_vocab, decode, encode, load_vocab, save_vocab
from .train import AdamW, TrainConfig, load_pipeline, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Box",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DecoderConfig",
    "DescriptionCandidate",
    "DetectedObject",
    "EncoderConfig",
    "ExtractorConfig",
    "FeaturePyramid",
    "ForegroundObject",
    "GroundTruthRegion",
    "IntegrityError",
    "NumericError",
    "Pipeline",
    "PipelineConfig",
    "PredictionRecord",
    "Proposal",
    "RegionAnnotation",
    "RegionExtractor",
    "SyntheticScene",
    "Tensor",
    "TextDecoder",
    "ThresholdGrid",
    "TrainConfig",
    "VisualEncoder",
    "Vocabulary",
    "assign_targets",
    "backward",
    "build_example",
    "build_seq2seq_mask",
    "build_vocab",
    "classify_style",
    "cross_entropy_label_smoothed",
    "decode",
    "densecap_map",
    "detection_ap",
    "encode",
    "generate_dataset",
    "generate_scene",
    "grad_check",
    "iou",
    "load_dataset",
    "load_pipeline",
    "load_vocab",
    "meteor",
    "nms",
    "no_grad",
    "primitive_battery",
    "run_inference",
    "save_dataset",
    "save_vocab",
    "score_object",
    "soft_nms",
    "train",
    "window_partition",
    "write_predictions",
]
