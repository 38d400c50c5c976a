"""Singular-value fine-tuning adapters and a class-incremental experiment harness."""

from .adapters import (
    FrozenWeights,
    FullFtWeights,
    LoraAdapterStack,
    StabilityRecord,
    SvfAdapterStack,
    freeze_task,
    materialize,
    merge_shifts,
    param_count,
    span_offdiag_max,
    stability_compare,
)
from .data import (
    FeatureSet,
    SessionDataset,
    StreamConfig,
    build_stream,
    load_feature_file,
    split_sessions,
    write_feature_file,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    CorruptionError,
    FormatError,
    InvalidInputError,
    LabelError,
    LayoutError,
    RankRangeError,
    ShapeError,
    SvfError,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    compare_strategies,
    compute_metrics,
    config_from_json,
    overfit_gap,
    run_experiment,
)
from .linalg import SvdFactorization, best_rank_r, frobenius_norm, svd, truncate
from .model import (
    BackboneConfig,
    ModelState,
    NcmClassifier,
    build_model,
    compute_prototypes,
    embed,
    forward,
    install_prototypes,
    ncm_classify,
    random_base_weights,
)

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "ConvergenceError",
    "CorruptionError",
    "ExperimentConfig",
    "ExperimentReport",
    "FeatureSet",
    "FormatError",
    "FrozenWeights",
    "FullFtWeights",
    "InvalidInputError",
    "LabelError",
    "LayoutError",
    "LoraAdapterStack",
    "ModelState",
    "NcmClassifier",
    "RankRangeError",
    "SessionDataset",
    "ShapeError",
    "StabilityRecord",
    "StreamConfig",
    "SvdFactorization",
    "SvfAdapterStack",
    "SvfError",
    "best_rank_r",
    "build_model",
    "build_stream",
    "compare_strategies",
    "compute_metrics",
    "compute_prototypes",
    "config_from_json",
    "embed",
    "forward",
    "freeze_task",
    "frobenius_norm",
    "install_prototypes",
    "load_feature_file",
    "materialize",
    "merge_shifts",
    "ncm_classify",
    "overfit_gap",
    "param_count",
    "random_base_weights",
    "run_experiment",
    "span_offdiag_max",
    "split_sessions",
    "stability_compare",
    "svd",
    "truncate",
    "write_feature_file",
]
