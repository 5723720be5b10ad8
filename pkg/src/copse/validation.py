"""Input validation helpers.

These mirror the ``check_array`` family from scikit-learn but are specialised
for point clouds, rotations and box sizes.
"""

import numpy as np

from .exceptions import DegenerateCloud, ShapeMismatch


def check_cloud(points, name="cloud", min_points=1):
    """Return ``points`` as a C-contiguous float64 array of shape (N, 3).

    Raises ``ShapeMismatch`` on a wrong shape, ``ValueError`` on non-finite
    coordinates and ``DegenerateCloud`` when fewer than ``min_points`` rows are
    present.
    """
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise DegenerateCloud(
            f"{name} needs at least {min_points} points, got {arr.shape[0]}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_same_shape(a, b, names=("pred", "gt")):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(
            f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}"
        )


def check_rotation(R, atol=1e-9, name="R"):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeMismatch(f"{name} must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=atol):
        raise ValueError(f"{name} is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > atol:
        raise ValueError(f"{name} has det != +1")
    return R


def check_vector3(v, name="vector", positive=False):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise ShapeMismatch(f"{name} must have 3 components, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if positive and np.any(v <= 0):
        raise ValueError(f"{name} components must be > 0, got {v}")
    return v


def check_unit(v, name="direction", atol=1e-12):
    v = check_vector3(v, name)
    if abs(np.linalg.norm(v) - 1.0) > atol:
        raise ValueError(f"{name} must have unit norm, got {np.linalg.norm(v)}")
    return v
