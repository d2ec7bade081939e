# Speech Screener
# Zero-shot Parkinson's speech screening: acoustic features or raw audio in, subject-level metrics with BCa intervals out.

from .aggregation import SubjectDecision, aggregate_subject, decide_subject, positive_class_probability
from .backends import (
    BackendConfig,
    ModelPrediction,
    decide_from_logprobs,
    parse_generated_label,
    predict,
    predict_many,
)
from .config import RunConfig, resolve_config
from .corpus import AudioBuffer, DatasetManifest, RecordingMeta, decode_wav, encode_wav, load_manifest, validate_dataset
from .evaluation import (
    BootstrapConfig,
    ConfidenceInterval,
    EvaluationInput,
    MetricReport,
    auroc,
    balanced_accuracy,
    bca_interval,
    brier,
    evaluate_all,
    evaluate_by_dataset,
    sensitivity_specificity,
)
from .features import (
    FeatureRegistry,
    FeatureVector,
    PitchTrack,
    extract_features,
    hnr_db,
    jitter_local,
    mfcc_stats,
    shimmer_local,
    track_pitch,
)
from .logger import RunLogger
from .pipeline import Pipeline, RunRecord, run_pipeline
from .preprocess import PreprocessConfig, SegmentAudio, denoise, preprocess_recording, resample, segment
from .prompting import PromptPayload, build_audio_prompt, build_feature_prompt, serialize_features
from .report import render_report
from .utils import validate_and_complete_url

__version__ = "1.0.0"
__all__ = [
    "AudioBuffer",
    "BackendConfig",
    "BootstrapConfig",
    "ConfidenceInterval",
    "DatasetManifest",
    "EvaluationInput",
    "FeatureRegistry",
    "FeatureVector",
    "MetricReport",
    "ModelPrediction",
    "Pipeline",
    "PitchTrack",
    "PreprocessConfig",
    "PromptPayload",
    "RecordingMeta",
    "RunConfig",
    "RunLogger",
    "RunRecord",
    "SegmentAudio",
    "SubjectDecision",
    "aggregate_subject",
    "auroc",
    "balanced_accuracy",
    "bca_interval",
    "brier",
    "build_audio_prompt",
    "build_feature_prompt",
    "decide_from_logprobs",
    "decide_subject",
    "decode_wav",
    "denoise",
    "encode_wav",
    "evaluate_all",
    "evaluate_by_dataset",
    "extract_features",
    "hnr_db",
    "jitter_local",
    "load_manifest",
    "mfcc_stats",
    "parse_generated_label",
    "positive_class_probability",
    "predict",
    "predict_many",
    "preprocess_recording",
    "render_report",
    "resample",
    "resolve_config",
    "run_pipeline",
    "segment",
    "sensitivity_specificity",
    "serialize_features",
    "shimmer_local",
    "track_pitch",
    "validate_and_complete_url",
    "validate_dataset",
]
