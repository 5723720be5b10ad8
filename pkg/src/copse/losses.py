"""The four L1 training losses and their sum.

Every loss is a per-point L1 norm (summed over x/y/z) averaged over points
and over the batch. For (…, 3)-shaped inputs that is exactly three times the
element-wise mean absolute error, which is how they are computed here.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .exceptions import ShapeMismatch
from .nn import Tensor, l1_loss


@dataclass(frozen=True)
class LossBreakdown:
    L_def: float
    L_sym: float
    L_cen: float
    L_size: float

    @property
    def L_total(self):
        return self.L_def + self.L_sym + self.L_cen + self.L_size

    def to_dict(self):
        return {"L_def": self.L_def, "L_sym": self.L_sym, "L_cen": self.L_cen,
                "L_size": self.L_size, "L_total": self.L_total}


def _point_l1(pred, gt):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape[-1] != 3:
        raise ShapeMismatch(f"expected trailing dimension 3, got {pred.shape}")
    return l1_loss(pred, gt) * 3.0


def symmetry_orbit(K, axis, n_rotations=12):
    """Copies of K rotated by 2*pi*j/M about ``axis`` (through the origin)."""
    K = np.asarray(K, dtype=np.float64)
    return np.stack([K @ geo.axis_angle_matrix(axis, 2 * np.pi * j / n_rotations).T
                     for j in range(n_rotations)])


def select_orbit_targets(pred, K, axes, n_rotations=12):
    """Per-sample orbit member of K closest (in L1) to the prediction.

    ``axes[b]`` is the symmetry axis in K's frame or None for samples without
    rotational symmetry. Returns the chosen targets with the shape of ``K``.
    """
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if pred.shape != K.shape:
        raise ShapeMismatch(f"pred {pred.shape} and K {K.shape} differ")
    squeeze = K.ndim == 2
    if squeeze:
        pred, K, axes = pred[None], K[None], [axes]
    out = K.copy()
    for b, axis in enumerate(axes):
        if axis is None:
            continue
        orbit = symmetry_orbit(K[b], axis, n_rotations)
        errs = np.abs(orbit - pred[b]).sum(axis=(1, 2))
        out[b] = orbit[int(np.argmin(errs))]
    return out[0] if squeeze else out


def _orbit_axis(spec, rotation):
    if spec is None or spec.kind is not geo.SymmetryKind.ROTATIONAL:
        return None
    return spec.direction if rotation is None else np.asarray(rotation) @ spec.direction


def loss_def(pred, K, spec=None, rotation=None, n_rotations=12):
    """Deformed-template loss for one sample ``(N_k, 3)`` or a batch.

    For rotational symmetry the loss is the minimum over M rotated copies of
    K about the symmetry axis. ``rotation`` maps the object frame into K's
    frame (carrying the axis along) and defaults to identity. For a batch,
    ``spec`` and ``rotation`` may be per-sample sequences.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim == 2:
        axes = _orbit_axis(spec, rotation)
    else:
        B = K.shape[0]
        specs = spec if isinstance(spec, (list, tuple)) else [spec] * B
        rots = rotation if rotation is not None and np.ndim(rotation) == 3 else [rotation] * B
        axes = [_orbit_axis(s, R) for s, R in zip(specs, rots)]
    return _point_l1(pred, select_orbit_targets(pred, K, axes, n_rotations))


def loss_sym(pred, gt):
    return _point_l1(pred, gt)


def loss_cen(pred, gt):
    return _point_l1(pred, gt)


def loss_size(pred, gt):
    return _point_l1(pred, gt)
