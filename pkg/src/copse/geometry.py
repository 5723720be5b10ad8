"""Geometric primitives: normalization, sampling, alignment, symmetry, boxes.

Point clouds are plain ``(N, 3)`` float64 arrays. Which frame a cloud lives in
(camera, normalized, object) is tracked by the caller and by the dataset
manifest, not by the array itself.
"""

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import (
    DegenerateCloud,
    InvalidCount,
    NoSymmetry,
    RankDeficient,
    WrongSymmetryKind,
)
from .validation import check_cloud, check_rotation, check_unit, check_vector3

__all__ = [
    "NormalizationRecord",
    "RigidTransform",
    "SymmetryKind",
    "SymmetrySpec",
    "OrientedBox",
    "normalize_cloud",
    "denormalize_cloud",
    "resample_cloud",
    "fps_indices",
    "fps_sample",
    "umeyama_align",
    "axis_angle_matrix",
    "geodesic_angle",
    "reflect_across_plane",
    "rotate_about_axis",
    "make_symmetric_gt",
    "rotation_error",
    "oriented_box",
    "random_rotation",
]


@dataclass(frozen=True)
class NormalizationRecord:
    """Centroid and scalar factor linking camera and normalized frames."""

    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "centroid", check_vector3(self.centroid, "centroid"))
        if not self.scale > 0:
            raise DegenerateCloud(f"normalization scale must be > 0, got {self.scale}")


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", check_rotation(self.R))
        object.__setattr__(self, "t", check_vector3(self.t, "t"))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse_apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.R

    def compose(self, other):
        """Return ``self * other`` (apply ``other`` first)."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


class SymmetryKind(str, enum.Enum):
    REFLECTIONAL = "reflectional"
    ROTATIONAL = "rotational"
    NONE = "none"


@dataclass(frozen=True, eq=False)
class SymmetrySpec:
    """Reflection plane normal or rotation axis, through the object origin."""

    kind: SymmetryKind
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "kind", SymmetryKind(self.kind))
        object.__setattr__(self, "direction", check_unit(self.direction))

    def __eq__(self, other):
        if not isinstance(other, SymmetrySpec):
            return NotImplemented
        return self.kind is other.kind and np.array_equal(self.direction, other.direction)

    def __hash__(self):
        return hash((self.kind, self.direction.tobytes()))

    def to_dict(self):
        return {"kind": self.kind.value, "direction": self.direction.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.asarray(d["direction"], dtype=np.float64))


# Corner order: signs from itertools.product((-1, 1), repeat=3) over (x, y, z),
# i.e. corner i has x sign bit 2, y sign bit 1, z sign bit 0.
_CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))


@dataclass(frozen=True)
class OrientedBox:
    pose: RigidTransform
    size: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "size", check_vector3(self.size, "size", positive=True))

    @property
    def corners(self):
        return oriented_box(self.pose, self.size)

    @property
    def volume(self):
        return float(np.prod(self.size))

    def contains(self, points, pad=0.0):
        local = self.pose.inverse_apply(points)
        return np.all(np.abs(local) <= self.size / 2 + pad, axis=-1)


def normalize_cloud(cloud):
    """Center a cloud on its centroid and divide by its max radius.

    Returns the normalized cloud and the ``NormalizationRecord`` needed to map
    normalized coordinates back: ``p_cam = p * scale + centroid``.
    """
    pts = check_cloud(cloud, min_points=2)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt((centered**2).sum(axis=1)).max())
    if scale == 0.0:
        raise DegenerateCloud("all points coincide")
    return centered / scale, NormalizationRecord(centroid, scale)


def denormalize_cloud(points, record):
    return np.asarray(points, dtype=np.float64) * record.scale + record.centroid


def resample_cloud(points, n, rng):
    """Random subsample (without replacement) or upsample by random repetition to ``n`` points."""
    m = len(points)
    if m > n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
    elif m < n:
        idx = np.concatenate([np.arange(m), rng.choice(m, size=n - m, replace=True)])
    else:
        idx = np.arange(m)
    return points[idx]


def fps_indices(cloud, k):
    """Greedy farthest-point sampling seeded at index 0.

    Ties are broken towards the lowest index, so the result is deterministic.
    """
    pts = check_cloud(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidCount(f"k must be in [1, {n}], got {k}")
    selected = np.empty(k, dtype=np.intp)
    selected[0] = 0
    min_d2 = ((pts - pts[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        # argmax returns the first maximum, which is the lowest-index tie.
        idx = int(np.argmax(min_d2))
        selected[j] = idx
        np.minimum(min_d2, ((pts - pts[idx]) ** 2).sum(axis=1), out=min_d2)
    return selected


def fps_sample(cloud, k):
    pts = check_cloud(cloud)
    return pts[fps_indices(pts, k)]


def umeyama_align(source, target):
    """Least-squares rigid transform with unit scale mapping source onto target.

    Solves ``min_{R,t} sum ||target_i - (R source_i + t)||^2`` over proper
    rotations. The reflection case is corrected by flipping the sign of the
    smallest singular direction.
    """
    src = check_cloud(source, "source", min_points=3)
    dst = check_cloud(target, "target", min_points=3)
    if src.shape != dst.shape:
        raise RankDeficient(f"source {src.shape} and target {dst.shape} differ")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    src_c = src - mu_s
    dst_c = dst - mu_d

    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= sv[0] * 1e-10:
        raise RankDeficient("source cloud is collinear or degenerate")

    cov = dst_c.T @ src_c
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return RigidTransform(R, mu_d - R @ mu_s)


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation matrix for a unit ``axis`` and ``angle`` in radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def geodesic_angle(Ra, Rb):
    """Angle in radians of ``Ra^T Rb``.

    Evaluated as ``atan2(sin, cos)`` rather than ``arccos`` of the trace so the
    result stays accurate for nearly identical rotations.
    """
    Q = np.asarray(Ra).T @ np.asarray(Rb)
    cos = (np.trace(Q) - 1.0) / 2.0
    skew = np.array([Q[2, 1] - Q[1, 2], Q[0, 2] - Q[2, 0], Q[1, 0] - Q[0, 1]])
    sin = np.linalg.norm(skew) / 2.0
    return float(np.arctan2(sin, cos))


def _vector_angle(u, v):
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def reflect_across_plane(cloud, spec):
    if spec.kind is not SymmetryKind.REFLECTIONAL:
        raise WrongSymmetryKind(f"expected reflectional symmetry, got {spec.kind.value}")
    pts = check_cloud(cloud)
    n = spec.direction
    return pts - 2.0 * np.outer(pts @ n, n)


def rotate_about_axis(cloud, spec, angle):
    if spec.kind is not SymmetryKind.ROTATIONAL:
        raise WrongSymmetryKind(f"expected rotational symmetry, got {spec.kind.value}")
    pts = check_cloud(cloud)
    if angle == np.pi:
        # Exact half turn: p -> 2(p.a)a - p, avoids sin(pi) round-off.
        a = spec.direction
        return 2.0 * np.outer(pts @ a, a) - pts
    return pts @ axis_angle_matrix(spec.direction, angle).T


def make_symmetric_gt(cloud_obj, spec):
    """Point-wise symmetric counterpart of an object-frame cloud.

    Rotational symmetry is reduced to a half turn about the axis.
    """
    if spec.kind is SymmetryKind.REFLECTIONAL:
        return reflect_across_plane(cloud_obj, spec)
    if spec.kind is SymmetryKind.ROTATIONAL:
        return rotate_about_axis(cloud_obj, spec, np.pi)
    raise NoSymmetry("category has no symmetry to exploit")


def _as_rotation(x):
    return x.R if isinstance(x, RigidTransform) else np.asarray(x, dtype=np.float64)


def rotation_error(Ra, Rb, spec=None):
    """Symmetry-aware rotation error in degrees.

    For rotational symmetry only the misalignment of the symmetry axis counts;
    otherwise the full geodesic angle is used.
    """
    Ra, Rb = _as_rotation(Ra), _as_rotation(Rb)
    if spec is not None and spec.kind is SymmetryKind.ROTATIONAL:
        a = spec.direction
        return float(np.degrees(_vector_angle(Ra @ a, Rb @ a)))
    return float(np.degrees(geodesic_angle(Ra, Rb)))


def oriented_box(pose, size):
    """Eight corners ``R (+-s/2) + t`` in the fixed ``_CORNER_SIGNS`` order."""
    size = check_vector3(size, "size", positive=True)
    local = _CORNER_SIGNS * (size / 2.0)
    return local @ pose.R.T + pose.t


def random_rotation(rng):
    """Uniformly distributed rotation matrix drawn from a numpy Generator."""
    return Rotation.random(random_state=rng).as_matrix()
