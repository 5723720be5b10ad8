"""Shape-alignment, symmetric-correspondence and centre/size networks.

All three sub-networks are PointNet-style: a per-point MLP followed by a
channel-wise max-pool gives a global feature; decoders take each point's
coordinates concatenated with global features and emit a 3-vector per point.

Network inputs are batched: observed clouds ``(B, N_o, 3)`` and templates
``(B, N_k, 3)``. Single clouds ``(N, 3)`` are accepted by the public helpers
and treated as a batch of one.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .exceptions import EmptyCloud, ShapeMismatch
from .nn import MLP, Tensor, concat, linear_relu, linear_relu_maxpool, pointwise_global_linear

CENTER_MODES = ("vote", "regress")


@dataclass(frozen=True)
class ModelConfig:
    n_template_points: int = 36
    n_points: int = 1024
    encoder_widths: tuple = (64, 128)
    decoder_widths: tuple = (128, 64)
    center_mode: str = "vote"

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.center_mode not in CENTER_MODES:
            raise ValueError(f"center_mode must be one of {CENTER_MODES}, got {self.center_mode!r}")

    @property
    def feature_dim(self):
        return self.encoder_widths[-1]

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


@dataclass
class ShapeFeatures:
    observed: Tensor   # F_P, (B, D)
    template: Tensor   # F_K, (B, D)


@dataclass
class CoarseShape:
    """Centralized concatenation of an observed and a symmetric cloud."""

    points: object     # G: Tensor or ndarray, (B, 2 N_o, 3)
    centroid: object   # r: Tensor or ndarray, (B, 1, 3)


@dataclass
class ModelOutput:
    deformed_template: Tensor  # K~, (B, N_k, 3)
    symmetric: Tensor          # P~', (B, N_o, 3)
    offsets: Tensor            # V~, (B, 2 N_o, 3); None in regress mode
    center: Tensor             # regressed centre, (B, 3); None in vote mode
    size: Tensor               # s~, (B, 3)
    coarse: CoarseShape
    coarse_prime: Tensor       # G' before centralization
    features: ShapeFeatures


def _batched(x, name):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"{name} must be (N, 3) or (B, N, 3), got {arr.shape}")
    if arr.shape[1] == 0:
        raise EmptyCloud(f"{name} has no points")
    return arr


class PoseNetwork:
    """Parameters of the three encoder-decoders."""

    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        enc = self.config.encoder_widths
        dec = self.config.decoder_widths
        D = self.config.feature_dim
        self.observed_encoder = MLP((3, *enc), rng, "observed_encoder", final_activation=True)
        self.template_encoder = MLP((3, *enc), rng, "template_encoder", final_activation=True)
        self.coarse_encoder = MLP((3, *enc), rng, "coarse_encoder", final_activation=True)
        self.deform_decoder = MLP((3 + 2 * D, *dec, 3), rng, "deform_decoder")
        self.symmetry_decoder = MLP((3 + 2 * D, *dec, 3), rng, "symmetry_decoder")
        if self.config.center_mode == "vote":
            self.center_head = MLP((3 + 2 * D, *dec, 3), rng, "offset_head")
        else:
            self.center_head = MLP((2 * D, *dec, 3), rng, "center_head")
        self.size_head = MLP((2 * D, *dec, 3), rng, "size_head")

    def modules(self):
        return [self.observed_encoder, self.template_encoder, self.coarse_encoder,
                self.deform_decoder, self.symmetry_decoder, self.center_head, self.size_head]

    def parameters(self):
        return [p for m in self.modules() for p in m.parameters()]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, observed, template, symmetric_override=None):
        """Full forward pass.

        ``symmetric_override`` replaces the predicted symmetric cloud in the
        coarse-shape path (teacher forcing with the ground-truth P').
        """
        feats = encode_features(self, observed, template)
        K_tilde = predict_deformed_template(self, template, feats)
        P_sym = predict_symmetric_cloud(self, observed, feats)
        source = P_sym if symmetric_override is None else Tensor(_batched(symmetric_override, "symmetric"))
        coarse, G_prime = build_coarse_shape(observed, source, return_prime=True)
        offsets, center, size = _center_size(self, coarse.points, feats.template)
        return ModelOutput(K_tilde, P_sym, offsets, center, size, coarse, G_prime, feats)

    __call__ = forward


def _pointwise_decoder(mlp, points, *globals_):
    h = pointwise_global_linear(mlp.layers[0], points, *globals_)
    return mlp(mlp.activate(h, 0), start=1)


def _encode(mlp, points):
    h = points
    for layer in mlp.layers[:-1]:
        h = linear_relu(layer, h)
    return linear_relu_maxpool(mlp.layers[-1], h)


def encode_features(net, observed, template):
    """Global features F_P and F_K; both are invariant to point order."""
    P = Tensor(_batched(observed, "observed"))
    K = Tensor(_batched(template, "template"))
    if P.shape[0] != K.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {P.shape[0]} vs {K.shape[0]}")
    return ShapeFeatures(_encode(net.observed_encoder, P), _encode(net.template_encoder, K))


def predict_deformed_template(net, template, feats):
    """K~: the template redrawn in the observed object's rotational state.

    Output point i corresponds to template point i.
    """
    K = _batched(template, "template")
    return _pointwise_decoder(net.deform_decoder, K, feats.observed, feats.template)


def predict_symmetric_cloud(net, observed, feats):
    """P~': one predicted symmetric counterpart per observed point."""
    P = _batched(observed, "observed")
    return _pointwise_decoder(net.symmetry_decoder, P, feats.observed, feats.template)


def build_coarse_shape(observed, symmetric, return_prime=False):
    """Concatenate P and P' along the point axis and subtract their centroid.

    Works on Tensors (keeping the graph) or plain arrays.
    """
    as_tensor = isinstance(symmetric, Tensor) or isinstance(observed, Tensor)
    if as_tensor:
        P = observed if isinstance(observed, Tensor) else Tensor(_batched(observed, "observed"))
        S = symmetric if isinstance(symmetric, Tensor) else Tensor(_batched(symmetric, "symmetric"))
        if P.shape != S.shape:
            raise ShapeMismatch(f"observed {P.shape} and symmetric {S.shape} differ")
        G_prime = concat([P, S], axis=-2)
        r = G_prime.mean(axis=-2, keepdims=True)
        coarse = CoarseShape(G_prime - r, r)
    else:
        P = np.asarray(observed, dtype=np.float64)
        S = np.asarray(symmetric, dtype=np.float64)
        if P.shape != S.shape:
            raise ShapeMismatch(f"observed {P.shape} and symmetric {S.shape} differ")
        G_prime = np.concatenate([P, S], axis=-2)
        r = G_prime.mean(axis=-2, keepdims=True)
        coarse = CoarseShape(G_prime - r, r)
    return (coarse, G_prime) if return_prime else coarse


def _center_size(net, G, F_K):
    G = G if isinstance(G, Tensor) else Tensor(_batched(G, "coarse"))
    F_G = _encode(net.coarse_encoder, G)
    pooled = concat([F_G, F_K], axis=-1)
    size = net.size_head(pooled).abs()
    if net.config.center_mode == "vote":
        return _pointwise_decoder(net.center_head, G, F_G, F_K), None, size
    return None, net.center_head(pooled), size


def predict_center_size(net, coarse, F_K):
    """Per-point centre offsets V~ and normalized size s~ from a coarse shape.

    In ``regress`` mode the offsets are replaced by a single regressed centre;
    the return value is then ``(center, size)``.
    """
    G = coarse.points if isinstance(coarse, CoarseShape) else coarse
    offsets, center, size = _center_size(net, G, F_K)
    return (offsets if center is None else center), size


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def recover_pose_size(template, deformed_template, offsets, size, coarse, record, center=None):
    """Camera-frame pose and size of one object from network outputs.

    Rotation aligns the template onto its deformed copy. The centre is the
    mean vote ``mean(G + V~)`` (or ``center`` when regressed), shifted back by
    the coarse-shape centroid and mapped out of the normalized frame.
    """
    Kc = np.asarray(template, dtype=np.float64)
    R = geo.umeyama_align(Kc, _np(deformed_template).reshape(Kc.shape)).R
    r = _np(coarse.centroid).reshape(3)
    if center is None:
        G = _np(coarse.points).reshape(-1, 3)
        V = _np(offsets).reshape(G.shape)
        t_norm = (G + V).mean(axis=0)
    else:
        t_norm = _np(center).reshape(3)
    t = (t_norm + r) * record.scale + record.centroid
    s = _np(size).reshape(3) * record.scale
    return geo.RigidTransform(R, t), s
