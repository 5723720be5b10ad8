"""3D IoU and m-degree/n-cm pose accuracy, aggregated per category.

Every ground-truth instance has exactly one prediction (detection is given),
so "average precision" at a threshold reduces to the fraction of instances
that pass it, computed per category and then averaged over categories.
"""

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .exceptions import EmptyPredictions

IOU_THRESHOLDS = {"iou25": 0.25, "iou50": 0.50, "iou75": 0.75}
POSE_THRESHOLDS = {"d5_2": (5.0, 2.0), "d5_5": (5.0, 5.0), "d10_2": (10.0, 2.0), "d10_5": (10.0, 5.0)}
METRIC_KEYS = tuple(IOU_THRESHOLDS) + tuple(POSE_THRESHOLDS)
REPORT_VERSION = 1
REPORT_NOTE = (
    "AP is the per-category fraction of instances passing each threshold "
    "(one prediction per ground-truth instance), averaged over categories"
)


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    category: str
    pred_pose: geo.RigidTransform
    pred_size: np.ndarray
    gt_pose: geo.RigidTransform
    gt_size: np.ndarray
    symmetry: geo.SymmetrySpec

    def __post_init__(self):
        object.__setattr__(self, "pred_size", np.abs(np.asarray(self.pred_size, dtype=np.float64)))
        object.__setattr__(self, "gt_size", np.asarray(self.gt_size, dtype=np.float64))

    @property
    def rotation_error(self):
        return geo.rotation_error(self.pred_pose, self.gt_pose, self.symmetry)

    @property
    def translation_error(self):
        """Euclidean centre error in meters."""
        return float(np.linalg.norm(self.pred_pose.t - self.gt_pose.t))


def _same_rotation(a, b):
    return np.array_equal(a.pose.R, b.pose.R)


def _exact_iou_shared_rotation(a, b):
    # both boxes are axis-aligned in the frame of the shared rotation
    ca, cb = a.pose.R.T @ a.pose.t, b.pose.R.T @ b.pose.t
    lo_a, hi_a = ca - a.size / 2, ca + a.size / 2
    lo_b, hi_b = cb - b.size / 2, cb + b.size / 2
    inter = float(np.prod(np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)))
    # volumes from the same bounds as the intersection so iou(a, a) is exactly 1
    union = float(np.prod(hi_a - lo_a)) + float(np.prod(hi_b - lo_b)) - inter
    return inter / union


def _grid_iou(a, b, resolution):
    corners = np.vstack([a.corners, b.corners])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    axes = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    in_a = np.all(np.abs(a.pose.inverse_apply(grid)) <= a.size / 2, axis=1)
    in_b = np.all(np.abs(b.pose.inverse_apply(grid)) <= b.size / 2, axis=1)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


def iou3d(a, b, resolution=64, method="auto"):
    """IoU of two oriented boxes.

    ``method="auto"`` uses the closed form when both boxes share an identical
    rotation matrix and otherwise a deterministic ``resolution**3`` lattice of
    cell centres spanning the union's axis-aligned bounds. Zero-volume boxes
    give 0 with a ``RuntimeWarning``.
    """
    if method not in ("auto", "grid", "exact"):
        raise ValueError(f"unknown method {method!r}")
    if a.volume == 0.0 or b.volume == 0.0:
        warnings.warn("zero-volume box in iou3d", RuntimeWarning, stacklevel=2)
        return 0.0
    if method == "exact" or (method == "auto" and _same_rotation(a, b)):
        if not _same_rotation(a, b):
            raise ValueError("closed-form IoU needs boxes with identical rotation")
        return _exact_iou_shared_rotation(a, b)
    return _grid_iou(a, b, resolution)


def _box(pose, size):
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        return None
    return geo.OrientedBox(pose, size)


def record_iou(rec, resolution=64):
    pred = _box(rec.pred_pose, rec.pred_size)
    if pred is None:
        warnings.warn(f"zero-volume predicted box for {rec.sample_id}", RuntimeWarning, stacklevel=2)
        return 0.0
    return iou3d(pred, geo.OrientedBox(rec.gt_pose, rec.gt_size), resolution)


def pose_accuracy(rec, max_degrees, max_cm):
    """True iff rotation error < m degrees and centre error < n centimeters."""
    return rec.translation_error < max_cm / 100.0 and rec.rotation_error < max_degrees


@dataclass
class MetricReport:
    per_category: dict
    mean: dict
    config: dict

    def to_dict(self):
        return {"version": REPORT_VERSION, "note": REPORT_NOTE, "config": self.config,
                "per_category": self.per_category, "mean": self.mean}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", *METRIC_KEYS, "n"])
            for cat in sorted(self.per_category):
                row = self.per_category[cat]
                w.writerow([cat, *(repr(row[k]) for k in METRIC_KEYS), row["n"]])
            w.writerow(["mean", *(repr(self.mean[k]) for k in METRIC_KEYS), self.mean["n"]])


def compute_report(records, resolution=64, config=None):
    if not records:
        raise EmptyPredictions("no predictions to evaluate")
    by_cat = {}
    for rec in records:
        iou = record_iou(rec, resolution)
        flags = {k: iou >= thr for k, thr in IOU_THRESHOLDS.items()}
        flags.update({k: pose_accuracy(rec, m, n) for k, (m, n) in POSE_THRESHOLDS.items()})
        by_cat.setdefault(rec.category, []).append(flags)
    per_category = {}
    for cat in sorted(by_cat):
        rows = by_cat[cat]
        per_category[cat] = {k: sum(r[k] for r in rows) / len(rows) for k in METRIC_KEYS}
        per_category[cat]["n"] = len(rows)
    mean = {k: float(np.mean([per_category[c][k] for c in per_category])) for k in METRIC_KEYS}
    mean["n"] = len(records)
    cfg = {"iou_resolution": resolution, **(config or {})}
    return MetricReport(per_category, mean, cfg)
