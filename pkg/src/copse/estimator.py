"""scikit-learn style estimator wrapping the network, training and inference."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import geometry as geo
from . import synth
from .metrics import PredictionRecord, compute_report
from .model import ModelConfig, PoseNetwork, recover_pose_size
from .nn import Adam, load_params, no_grad, save_params
from .training import TrainConfig, prepare_samples, train
from .validation import check_cloud

CHECKPOINT_VERSION = 1


class PoseSizeEstimator(BaseEstimator):
    """Category-level 6D pose and size estimator for partial point clouds.

    ``fit`` takes a sequence of annotated :class:`~copse.synth.InstanceSample`
    objects; ``predict`` takes samples (or raw camera-frame clouds plus their
    categories) and returns ``(RigidTransform, size)`` pairs in the camera
    frame.
    """

    def __init__(self, n_template_points=36, n_points=1024, encoder_widths=(64, 128),
                 decoder_widths=(128, 64), center_mode="vote", epochs=100, batch_size=32,
                 learning_rate=4e-4, lr_decay=0.75, lr_decay_period=4, warmup_epochs=10,
                 n_sym_rotations=12, random_state=42):
        self.n_template_points = n_template_points
        self.n_points = n_points
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.center_mode = center_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_period = lr_decay_period
        self.warmup_epochs = warmup_epochs
        self.n_sym_rotations = n_sym_rotations
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(self.n_template_points, self.n_points, tuple(self.encoder_widths),
                           tuple(self.decoder_widths), self.center_mode)

    def _train_config(self):
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.lr_decay,
                           self.lr_decay_period, self.warmup_epochs, self.n_sym_rotations,
                           self.random_state)

    def fit(self, X, y=None, templates=None, log=None):
        """Train from scratch on annotated samples.

        ``templates`` maps category id to :class:`~copse.synth.CategoryTemplate`;
        by default the procedural templates with ``n_template_points`` points
        are used. ``log`` receives one dict per epoch.
        """
        samples = list(X)
        cats = sorted({s.category for s in samples})
        if templates is None:
            templates = {c: synth.make_template(c, self.n_template_points) for c in cats}
        self.templates_ = dict(templates)
        data = prepare_samples(samples, self.templates_, self.n_points)
        self.network_ = PoseNetwork(self._model_config(), seed=self.random_state)
        self.history_ = train(self.network_, data, self._train_config(), log=log)
        return self

    def _inputs(self, X, categories):
        if categories is None:
            clouds = [s.cloud for s in X]
            categories = [s.category for s in X]
        else:
            clouds = list(X)
            if len(clouds) != len(categories):
                raise ValueError("need one category per cloud")
        return [check_cloud(c, min_points=3) for c in clouds], list(categories)

    def predict(self, X, categories=None, batch_size=32):
        """Camera-frame ``(RigidTransform, size)`` for each input cloud.

        Clouds whose point count differs from ``n_points`` are resampled with a
        fixed-seed generator, so predictions are deterministic.
        """
        check_is_fitted(self, "network_")
        clouds, categories = self._inputs(X, categories)
        n = self.network_.config.n_points
        prepared = []
        for cloud in clouds:
            if len(cloud) != n:
                cloud = geo.resample_cloud(cloud, n, np.random.default_rng(0))
            prepared.append(geo.normalize_cloud(cloud))
        results = []
        for lo in range(0, len(prepared), batch_size):
            chunk = prepared[lo:lo + batch_size]
            cats = categories[lo:lo + batch_size]
            P = np.stack([p for p, _ in chunk])
            Kc = np.stack([self.templates_[c].points for c in cats])
            with no_grad():
                out = self.network_.forward(P, Kc)
            for b, (_, rec) in enumerate(chunk):
                coarse = type(out.coarse)(out.coarse.points.data[b], out.coarse.centroid.data[b])
                results.append(recover_pose_size(
                    Kc[b], out.deformed_template.data[b],
                    None if out.offsets is None else out.offsets.data[b],
                    out.size.data[b], coarse, rec,
                    center=None if out.center is None else out.center.data[b]))
        return results

    def predict_records(self, samples, batch_size=32):
        preds = self.predict(samples, batch_size=batch_size)
        return [
            PredictionRecord(s.sample_id or str(s.seed), s.category, pose, size, s.pose,
                             s.size, self.templates_[s.category].symmetry)
            for s, (pose, size) in zip(samples, preds)
        ]

    def score(self, X, y=None):
        """Mean IoU50 pass fraction over categories."""
        return compute_report(self.predict_records(list(X))).mean["iou50"]

    def _optimizer_hyperparameters(self):
        hp = Adam([], lr=self.learning_rate, decay=self.lr_decay,
                  decay_period=self.lr_decay_period).hyperparameters()
        hp.pop("step")
        return hp

    # -- persistence ---------------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "network_")
        meta = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "estimator_params": _jsonable(self.get_params()),
            "model_config": self.network_.config.to_dict(),
            "train_config": self._train_config().to_dict(),
            "optimizer": self._optimizer_hyperparameters(),
            "templates": {
                c: {"points": t.points.tolist(), "symmetry": t.symmetry.to_dict()}
                for c, t in sorted(self.templates_.items())
            },
        }
        save_params(path, self.network_.state_dict(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_params(path)
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
        est = cls(**meta["estimator_params"])
        mc = meta["model_config"]
        est.network_ = PoseNetwork(ModelConfig(**mc))
        est.network_.load_state_dict(arrays)
        est.templates_ = {
            c: synth.CategoryTemplate(c, np.asarray(t["points"], dtype=np.float64),
                                      geo.SymmetrySpec.from_dict(t["symmetry"]))
            for c, t in meta["templates"].items()
        }
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
