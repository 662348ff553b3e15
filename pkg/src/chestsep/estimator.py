"""Scikit-learn style front door for the separator.

ChestSoundSeparator exposes the network through the familiar estimator API:
construct with hyperparameters, fit(X, y) on (n_samples, T) mixtures against
(n_samples, 2, T) heart/lung targets, transform(X) to separate. get_params /
set_params / clone work as usual, so the separator drops into sklearn
pipelines and model-selection tooling.

fit() trains on the arrays it is given. The full two-phase synthetic-stream
protocol (noise schedules, fresh batches every step) lives in
chestsep.training.train and the `chestsep train` CLI.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ShapeMismatch
from .model import SeparatorConfig, SeparatorModel
from .nn import functional as F, no_grad
from .training import fit_arrays
from .validation import check_mixture_batch, check_target_batch


class ChestSoundSeparator(TransformerMixin, BaseEstimator):
    """Separate single-channel chest-sound mixtures into heart and lung tracks.

    Parameters mirror the network and optimizer configuration; see
    SeparatorConfig and TrainConfig for their meaning. `random_state` seeds
    parameter init, batch order, and nothing else.
    """

    def __init__(
        self,
        kernel_size=512,
        stride=0,
        feature_size=512,
        mask_feature_size=256,
        conv_kernel=3,
        conv_layers=6,
        num_heads=4,
        transformer_depth=4,
        encoder_kind="learned_conv",
        use_conv_blocks=True,
        epochs=40,
        batch_size=8,
        learning_rate=1e-4,
        weight_decay=0.1,
        clip_norm=5.0,
        scheduler_factor=0.5,
        scheduler_patience=4,
        random_state=0,
    ):
        self.kernel_size = kernel_size
        self.stride = stride
        self.feature_size = feature_size
        self.mask_feature_size = mask_feature_size
        self.conv_kernel = conv_kernel
        self.conv_layers = conv_layers
        self.num_heads = num_heads
        self.transformer_depth = transformer_depth
        self.encoder_kind = encoder_kind
        self.use_conv_blocks = use_conv_blocks
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.scheduler_factor = scheduler_factor
        self.scheduler_patience = scheduler_patience
        self.random_state = random_state

    def _model_config(self) -> SeparatorConfig:
        return SeparatorConfig(
            encoder_kind=self.encoder_kind,
            kernel_size=self.kernel_size,
            stride=self.stride,
            feature_size=self.feature_size,
            mask_feature_size=self.mask_feature_size,
            conv_kernel=self.conv_kernel,
            conv_layers=self.conv_layers,
            num_heads=self.num_heads,
            transformer_depth=self.transformer_depth,
            use_conv_blocks=self.use_conv_blocks,
        )

    def fit(self, X, y):
        """Train on mixtures X of shape (n, T) against targets y of shape (n, 2, T)."""
        X = check_mixture_batch(X, "X")
        y = check_target_batch(y, X.shape[0], 2, X.shape[1], "y")
        model = SeparatorModel(self._model_config(), seed=self.random_state)
        model, log = fit_arrays(
            model, X, y,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            scheduler_factor=self.scheduler_factor,
            scheduler_patience=self.scheduler_patience,
            seed=self.random_state,
        )
        self.model_ = model
        self.history_ = log
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ShapeMismatch("this ChestSoundSeparator instance is not fitted yet")

    def transform(self, X) -> np.ndarray:
        """Separate mixtures (n, T) -> estimates (n, 2, T); index 0 heart, 1 lung."""
        self._check_fitted()
        X = check_mixture_batch(X, "X")
        return self.model_.separate(X)

    def predict(self, X) -> np.ndarray:
        """Alias of transform for predictor-shaped call sites."""
        return self.transform(X)

    def score(self, X, y) -> float:
        """Mean SI-SDR in dB across sources and samples (higher is better)."""
        self._check_fitted()
        X = check_mixture_batch(X, "X")
        y = check_target_batch(y, X.shape[0], 2, X.shape[1], "y")
        with no_grad():
            return -float(F.si_sdr_loss(self.model_.forward(X), y).data)

    def save(self, path):
        self._check_fitted()
        self.model_.save(path)

    @classmethod
    def from_checkpoint(cls, path) -> "ChestSoundSeparator":
        """Build a ready-to-transform estimator around a saved model."""
        model = SeparatorModel.load(path)
        cfg = model.config
        est = cls(
            kernel_size=cfg.kernel_size,
            stride=cfg.stride,
            feature_size=cfg.feature_size,
            mask_feature_size=cfg.mask_feature_size,
            conv_kernel=cfg.conv_kernel,
            conv_layers=cfg.conv_layers,
            num_heads=cfg.num_heads,
            transformer_depth=cfg.transformer_depth,
            encoder_kind=cfg.encoder_kind,
            use_conv_blocks=cfg.use_conv_blocks,
        )
        est.model_ = model
        return est
