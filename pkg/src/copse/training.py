"""Training loop, batch preparation and finite-difference gradient checks."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from . import synth
from .exceptions import EmptyDataset, ShapeMismatch, TrainingDiverged
from .losses import LossBreakdown, loss_cen, loss_size, loss_sym, select_orbit_targets, _point_l1
from .model import ModelConfig, PoseNetwork
from .nn import Adam, Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 4e-4
    lr_decay: float = 0.75
    lr_decay_period: int = 4
    warmup_epochs: int = 10
    n_sym_rotations: int = 12
    seed: int = 42

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_decay_period", "n_sym_rotations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be > 0 and lr_decay in (0, 1]")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs]")

    def to_dict(self):
        return asdict(self)


@dataclass
class PreparedData:
    """Stacked normalized-frame inputs and targets for a set of samples."""

    observed: np.ndarray      # P   (S, N_o, 3)
    symmetric: np.ndarray     # P'  (S, N_o, 3)
    template: np.ndarray      # K_c (S, N_k, 3)
    deformed: np.ndarray      # K   (S, N_k, 3)
    center: np.ndarray        # (S, 3) object centre, normalized frame
    size: np.ndarray          # (S, 3) normalized size
    axes: list = field(default_factory=list)  # rotational axis in K's frame, or None
    categories: list = field(default_factory=list)

    def __len__(self):
        return len(self.observed)

    def subset(self, idx):
        idx = np.asarray(idx)
        return PreparedData(self.observed[idx], self.symmetric[idx], self.template[idx],
                            self.deformed[idx], self.center[idx], self.size[idx],
                            [self.axes[i] for i in idx], [self.categories[i] for i in idx])


def prepare_samples(samples, templates, n_points=None):
    """Compute ground-truth targets for every sample against its category template."""
    if not samples:
        raise EmptyDataset("no samples to prepare")
    cols = {k: [] for k in ("P", "Ps", "Kc", "K", "c", "s")}
    axes, cats = [], []
    for smp in samples:
        if n_points is not None and len(smp.cloud) != n_points:
            raise ShapeMismatch(f"sample {smp.sample_id!r} has {len(smp.cloud)} points, expected {n_points}")
        tpl = templates[smp.category]
        gt = smp.ground_truth(tpl)
        cols["P"].append(gt.observed)
        cols["Ps"].append(gt.symmetric)
        cols["Kc"].append(tpl.points)
        cols["K"].append(gt.deformed_template)
        cols["c"].append(gt.center)
        cols["s"].append(gt.size)
        spec = tpl.symmetry
        axes.append(smp.pose.R @ spec.direction if spec.kind is geo.SymmetryKind.ROTATIONAL else None)
        cats.append(smp.category)
    return PreparedData(*(np.stack(cols[k]) for k in ("P", "Ps", "Kc", "K", "c", "s")), axes, cats)


def compute_losses(net, batch, teacher_forcing=False, n_sym_rotations=12):
    """Forward pass plus the four losses; returns ``(total, breakdown, output)``.

    With ``teacher_forcing`` the coarse shape is built from the ground-truth
    symmetric cloud rather than the predicted one.
    """
    out = net.forward(batch.observed, batch.template,
                      symmetric_override=batch.symmetric if teacher_forcing else None)
    K_target = select_orbit_targets(out.deformed_template, batch.deformed, batch.axes, n_sym_rotations)
    L_def = _point_l1(out.deformed_template, K_target)
    L_sym = loss_sym(out.symmetric, batch.symmetric)
    center = Tensor(batch.center[:, None, :])
    if out.offsets is not None:
        # v_i = t - g'_i: the offset from each uncentralized coarse point to the centre
        L_cen = loss_cen(out.offsets, center - out.coarse_prime)
    else:
        L_cen = loss_cen(out.center, (center - out.coarse.centroid).reshape(-1, 3))
    L_size = loss_size(out.size, batch.size)
    total = L_def + L_sym + L_cen + L_size
    parts = LossBreakdown(L_def.item(), L_sym.item(), L_cen.item(), L_size.item())
    return total, parts, out


def train(net, data, cfg=None, log=None):
    """Train ``net`` in place on ``data`` (a ``PreparedData``).

    ``log`` is called once per epoch with a dict
    ``{epoch, lr, L_def, L_sym, L_cen, L_size, L_total, wall_ms}``.
    Returns the list of those dicts.
    """
    cfg = cfg or TrainConfig()
    if data is None or len(data) == 0:
        raise EmptyDataset("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr, decay=cfg.lr_decay, decay_period=cfg.lr_decay_period)
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = opt.set_epoch(epoch)
        forcing = epoch < cfg.warmup_epochs
        order = rng.permutation(n)
        sums = np.zeros(4)
        for lo in range(0, n, cfg.batch_size):
            batch = data.subset(order[lo:lo + cfg.batch_size])
            opt.zero_grad()
            total, parts, _ = compute_losses(net, batch, forcing, cfg.n_sym_rotations)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total.backward()
            opt.step()
            sums += len(batch) * np.array([parts.L_def, parts.L_sym, parts.L_cen, parts.L_size])
        means = LossBreakdown(*(sums / n))
        entry = {"epoch": epoch, "lr": lr, **means.to_dict(),
                 "wall_ms": round((time.perf_counter() - start) * 1e3, 3)}
        history.append(entry)
        logger.info(json.dumps(entry))
        if log is not None:
            log(entry)
    return history


# -- gradient checking ----------------------------------------------------------------

GRADCHECK_WIDTHS = {"encoder_widths": (8, 16), "decoder_widths": (16, 8)}


def gradcheck_data(n_samples=2, n_points=64, n_template_points=36, seed=0,
                   categories=("cyl", "mug")):
    templates = {c: synth.make_template(c, n_template_points) for c in categories}
    samples = [
        synth.generate_instance(templates[categories[i % len(categories)]], seed + i, n_points=n_points)
        for i in range(n_samples)
    ]
    return prepare_samples(samples, templates, n_points)


def gradient_check(net, data, h=1e-5, teacher_forcing=False, n_sym_rotations=12,
                   floor=1e-6):
    """Compare analytic gradients of the total loss to central differences.

    Every scalar of every parameter is perturbed. The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``. Returns one row per
    parameter tensor: ``(name, size, max_rel_err)``.
    """
    net.zero_grad()
    total, _, _ = compute_losses(net, data, teacher_forcing, n_sym_rotations)
    total.backward()
    rows = []
    for name, p in net.named_parameters().items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = compute_losses(net, data, teacher_forcing, n_sym_rotations)[0].item()
            flat[i] = orig - h
            down = compute_losses(net, data, teacher_forcing, n_sym_rotations)[0].item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        a = analytic.reshape(-1)
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        rows.append((name, flat.size, float(rel.max())))
    return rows


def default_gradcheck(seed=0, teacher_forcing=False, center_mode="vote"):
    """Gradient check on a 2-sample batch of 64-point clouds with narrow layers."""
    cfg = ModelConfig(n_points=64, center_mode=center_mode, **GRADCHECK_WIDTHS)
    net = PoseNetwork(cfg, seed=seed)
    data = gradcheck_data(seed=seed)
    return gradient_check(net, data, teacher_forcing=teacher_forcing)
