"""Array-in, array-out estimator wrapper around model building and fitting.

``NutritionEstimator`` follows the scikit-learn protocol: constructor
arguments are stored verbatim, ``fit(X, y)`` learns from arrays, state
created by fitting ends in trailing-underscore attributes, and
``get_params``/``set_params`` work for cloning and search. X is an image
batch (N, 3, R, R) with values in [0, 1]; y is (N, 5) nutrient targets in
fixed task order.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from .backbones import BackboneConfig, _TRANSFORMER_KINDS, canonical_kind
from .dataio import _seeded_rng
from .errors import ConfigurationError
from .evaluation import evaluate_arrays
from .model import HeadConfig, ModelConfig, build_model
from .training import TrainConfig, fit_arrays, restore_training_state
from .validation import check_image_batch, check_target_batch


class NutritionEstimator(BaseEstimator):
    """Multitask nutrient regressor with a scikit-learn interface.

    A fraction of the training samples (``validation_fraction``, drawn
    with ``seed``) is held out inside ``fit`` for model selection and
    early stopping; the fitted model is the one with the lowest
    validation combined MAE. With ``validation_fraction=0`` the train
    set doubles as the validation set.

    ``score`` returns the negative combined MAE, so greater is better as
    scikit-learn expects.
    """

    def __init__(
        self,
        backbone: str = "tiny",
        head: str = "compressed",
        feature_dim: int | None = None,
        shared_widths: tuple[int, ...] | None = None,
        task_width: int | None = None,
        attention_heads: int | None = None,
        hidden_layers: int | None = None,
        patch_size: int | None = None,
        pretrained_weights: str | None = None,
        learning_rate: float = 1e-4,
        rms_discount: float = 0.9,
        epsilon: float = 1.0,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        batch_size: int = 32,
        max_epochs: int = 100,
        early_stop_patience: int = 10,
        validation_fraction: float = 0.15,
        freeze_backbone: bool = False,
        seed: int = 0,
    ):
        self.backbone = backbone
        self.head = head
        self.feature_dim = feature_dim
        self.shared_widths = shared_widths
        self.task_width = task_width
        self.attention_heads = attention_heads
        self.hidden_layers = hidden_layers
        self.patch_size = patch_size
        self.pretrained_weights = pretrained_weights
        self.learning_rate = learning_rate
        self.rms_discount = rms_discount
        self.epsilon = epsilon
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.freeze_backbone = freeze_backbone
        self.seed = seed

    def _model_config(self, resolution: int) -> ModelConfig:
        kind = canonical_kind(self.backbone)
        backbone = BackboneConfig(
            kind=kind,
            feature_dim=self.feature_dim,
            attention_heads=self.attention_heads if kind in _TRANSFORMER_KINDS else None,
            hidden_layers=self.hidden_layers,
            patch_size=self.patch_size if kind in _TRANSFORMER_KINDS else None,
            resolution=resolution,
        )
        head = HeadConfig(
            kind=self.head,
            shared_widths=tuple(self.shared_widths) if self.shared_widths is not None else None,
            task_width=self.task_width,
        )
        return ModelConfig(backbone=backbone, head=head, seed=self.seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            rms_discount=self.rms_discount,
            epsilon=self.epsilon,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            seed=self.seed,
            freeze_backbone=self.freeze_backbone,
        )

    def fit(self, X, y) -> "NutritionEstimator":
        X = check_image_batch(X)
        y = check_target_batch(y, X.shape[0])
        if not (
            isinstance(self.validation_fraction, (int, float))
            and math.isfinite(self.validation_fraction)
            and 0.0 <= self.validation_fraction < 1.0
        ):
            raise ConfigurationError(
                f"validation_fraction must lie in [0, 1), got {self.validation_fraction!r}"
            )
        n = X.shape[0]
        n_val = min(n - 1, round(n * self.validation_fraction))
        order = _seeded_rng(self.seed).permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        if n_val == 0:
            val_idx = train_idx

        resolution = X.shape[2]
        model = build_model(self._model_config(resolution), weights=self.pretrained_weights)
        result = fit_arrays(
            model,
            X[train_idx],
            y[train_idx],
            X[val_idx],
            y[val_idx],
            self._train_config(),
        )
        if len(result.history):
            self.model_ = restore_training_state(result.best)[0]
        else:
            self.model_ = result.model
        self.history_ = result.history
        self.best_val_mae_ = result.best.best_val_combined_mae
        self.input_resolution_ = resolution
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise ConfigurationError("this estimator is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """Predict (N, 5) nutrient values for an (N, 3, R, R) image array."""
        self._require_fitted()
        X = check_image_batch(X, self.input_resolution_)
        return self.model_.predict(X, batch_size=self.batch_size)

    def score(self, X, y) -> float:
        """Negative combined MAE on the given arrays (greater is better)."""
        self._require_fitted()
        X = check_image_batch(X, self.input_resolution_)
        y = check_target_batch(y, X.shape[0])
        return -evaluate_arrays(self.model_, X, y, batch_size=self.batch_size).combined_mae
