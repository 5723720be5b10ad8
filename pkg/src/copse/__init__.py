"""Category-level object pose and size estimation on point clouds."""

from .estimator import PoseSizeEstimator
from .geometry import (
    NormalizationRecord,
    OrientedBox,
    RigidTransform,
    SymmetryKind,
    SymmetrySpec,
    normalize_cloud,
    umeyama_align,
)
from .metrics import MetricReport, PredictionRecord, compute_report, iou3d
from .model import ModelConfig, PoseNetwork
from .synth import CATEGORIES, DatasetConfig, build_dataset, generate_instance, make_template
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "DatasetConfig",
    "MetricReport",
    "ModelConfig",
    "NormalizationRecord",
    "OrientedBox",
    "PoseNetwork",
    "PoseSizeEstimator",
    "PredictionRecord",
    "RigidTransform",
    "SymmetryKind",
    "SymmetrySpec",
    "TrainConfig",
    "build_dataset",
    "compute_report",
    "generate_instance",
    "iou3d",
    "make_template",
    "normalize_cloud",
    "train",
    "umeyama_align",
]
