"""Disagreement-aware training for binary subjectivity classification.

Two phases: agreement-weighted supervised fine-tuning that teaches a policy
to emit a label, a two-part rationale and a confidence, then GRPO that
rewards rationale quality and calibration against annotator vote shares.
"""

from .data import (
    AnnotatedSample,
    AnnotationCounts,
    DisagreementDistribution,
    RationalePair,
    TaskKind,
    agreement_score,
    dataset_stats,
    default_profile,
    disagreement_distribution,
    generate_synthetic,
    load_dataset,
    majority_label,
    save_dataset,
)
from .estimator import DisagreementAwareClassifier
from .grpo import AlignConfig, group_advantages, grpo_loss, train_ua
from .metrics import EvalReport, accuracy, evaluate, macro_f1, mean_mae, pearson_coef, transfer_eval
from .perception import PerceptionConfig, adaptive_weights, joint_loss, segment_loss, train_dp
from .policy import Policy, PolicyConfig, load_checkpoint, save_checkpoint
from .protocol import model_distribution, parse_output, render_prompt, serialize_target
from .rewards import (
    MockJudge,
    RemoteJudge,
    calibration_mae,
    calibration_reward,
    normalize_likert,
    reasoning_reward,
    total_reward,
)

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "AnnotatedSample", "AnnotationCounts", "DisagreementAwareClassifier",
    "DisagreementDistribution", "EvalReport", "MockJudge", "PerceptionConfig", "Policy",
    "PolicyConfig", "RationalePair", "RemoteJudge", "TaskKind", "accuracy", "adaptive_weights",
    "agreement_score", "calibration_mae", "calibration_reward", "dataset_stats", "default_profile",
    "disagreement_distribution", "evaluate", "generate_synthetic", "group_advantages", "grpo_loss",
    "joint_loss", "load_checkpoint", "load_dataset", "macro_f1", "majority_label",
    "mean_mae", "model_distribution", "normalize_likert", "parse_output", "pearson_coef",
    "reasoning_reward", "render_prompt", "save_checkpoint", "save_dataset", "segment_loss",
    "serialize_target", "total_reward", "train_dp", "train_ua", "transfer_eval",
]
