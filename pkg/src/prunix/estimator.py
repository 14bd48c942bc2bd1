"""scikit-learn style wrapper: the four training stages behind ``fit`` / ``predict``."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import crossbar as xb
from .config import PipelineConfig, PruneConfig, QuantConfig, TrainConfig
from .data import Dataset
from .pipeline import (stage_fine_tune, stage_initial_train, stage_prune_quantize,
                       stage_regularized_train)
from .regularizers import RegularizerConfig
from .tensor import DTYPE, log_softmax


class PrunixClassifier(ClassifierMixin, BaseEstimator):
    """Regularized, pruned and quantized CNN classifier for small square images.

    ``X`` holds flattened single-channel images with values already scaled to
    ``[0, 1]``. With ``image_shape=None`` the features are zero-padded into the
    smallest square image whose side is a multiple of four (the reference
    network pools twice by two), so an 8x8 image is used as is and tabular
    data still fits. ``fit`` runs initial training, regularized training, adaptive
    pruning with quantization and straight-through fine-tuning; ``predict``
    uses the quantized network. A seeded ``val_fraction`` of the training rows
    is held out as the pruning loop's validation split.
    """

    def __init__(self, regularizer="group_sawtooth", lambda_s=3e-5, lambda_reg=1e-4, decay=0.8,
                 bits=4, clamp_levels=None, prune=True, lambda_p=0.5, mu=0.7, sigma=0.02,
                 gamma=0.5, epochs_initial=20, epochs_regularized=20, epochs_finetune=10,
                 learning_rate=0.05, lr_decay=0.93, finetune_learning_rate=0.01, batch_size=32,
                 val_fraction=0.1, image_shape=None, random_state=0):
        self.regularizer = regularizer
        self.lambda_s = lambda_s
        self.lambda_reg = lambda_reg
        self.decay = decay
        self.bits = bits
        self.clamp_levels = clamp_levels
        self.prune = prune
        self.lambda_p = lambda_p
        self.mu = mu
        self.sigma = sigma
        self.gamma = gamma
        self.epochs_initial = epochs_initial
        self.epochs_regularized = epochs_regularized
        self.epochs_finetune = epochs_finetune
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.finetune_learning_rate = finetune_learning_rate
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.image_shape = image_shape
        self.random_state = random_state

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            seed=int(self.random_state),
            train=TrainConfig(self.epochs_initial, self.epochs_regularized, self.epochs_finetune,
                              self.learning_rate, self.lr_decay, self.batch_size,
                              self.finetune_learning_rate),
            regularizer=RegularizerConfig(self.regularizer, self.lambda_s, self.decay,
                                          lambda_reg=self.lambda_reg),
            quant=QuantConfig(self.bits, self.clamp_levels),
            prune=PruneConfig(self.lambda_p, self.mu, self.sigma, self.gamma,
                              enabled=bool(self.prune)))

    def _images(self, X) -> np.ndarray:
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} is "
                             f"expecting {self.n_features_in_} features as input")
        shape = self.image_shape_
        pad = math.prod(shape) - X.shape[1]
        X = X.astype(DTYPE)
        if pad:
            X = np.hstack([X, np.zeros((len(X), pad), DTYPE)])
        return X.reshape((-1,) + shape)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(f"need samples of at least 2 classes; got {len(self.classes_)} class")
        self.n_features_in_ = X.shape[1]
        if self.image_shape is None:
            side = 4 * max(1, math.ceil(math.sqrt(X.shape[1]) / 4))
            self.image_shape_ = (1, side, side)
        else:
            self.image_shape_ = tuple(int(d) for d in self.image_shape)
            if math.prod(self.image_shape_) != X.shape[1]:
                raise ValueError(f"image_shape {self.image_shape_} does not hold "
                                 f"{X.shape[1]} features")
        config = self._config()
        images = self._images(X)
        order = np.random.default_rng([config.seed, 0]).permutation(len(y_idx))
        n_val = math.floor(self.val_fraction * len(order))
        val, train = order[:n_val], order[n_val:]
        empty_x, empty_y = images[:0], y_idx[:0]
        data = Dataset(images[train], y_idx[train], images[val], y_idx[val], empty_x, empty_y,
                       len(self.classes_))
        if n_val == 0 and config.prune.enabled:
            raise ValueError("pruning needs a validation split; raise val_fraction or set prune=False")
        state = stage_initial_train(config, data)
        state = stage_regularized_train(state, config, data)
        state = stage_prune_quantize(state, config, data)
        state = stage_fine_tune(state, config, data)
        self.state_ = state
        self.model_ = state.model
        self.scheme_ = state.scheme
        self.sparsity_ = state.report
        self.history_ = state.records
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = self._images(check_array(X, dtype=np.float64))
        return np.concatenate([self.model_.forward(images[s:s + 512])
                               for s in range(0, len(images), 512)])

    def decision_function(self, X) -> np.ndarray:
        """Logits of the quantized network; for two classes the margin of the second."""
        logits = self._logits(X)
        if len(self.classes_) == 2:
            return logits[:, 1] - logits[:, 0]
        return logits

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(log_softmax(self._logits(X)))

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def crossbar_score(self, X, y, stuck_off: float = 0.0, drift: float = 0.0,
                       drift_fraction: float = 0.3, aging_fraction: float = 0.0,
                       aging_levels: int = 4, seed: int = 0) -> float:
        """Accuracy of the mapped network with the given faults injected."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        if any(v not in lookup for v in y):
            raise ValueError("y contains labels not seen during fit")
        y_idx = np.array([lookup[v] for v in y])
        pairs = xb.map_model(self.model_, self.scheme_)
        if stuck_off:
            pairs = xb.inject_stuck_off(pairs, stuck_off, seed)
        if drift:
            pairs = xb.inject_drift(pairs, xb.DriftParams(drift, drift_fraction), seed)
        if aging_fraction:
            pairs = xb.inject_aging(pairs, xb.AgingParams(aging_fraction, aging_levels), seed)
        return xb.evaluate_on_crossbar(pairs, self.model_, self._images(X), y_idx)
