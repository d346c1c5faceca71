"""scikit-learn style wrapper around a randomly initialised backbone."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .configs import ModelConfig, load_config
from .model import Model, forward_features, model_forward
from .tensor import layer_norm


class ViLFeatureExtractor(TransformerMixin, BaseEstimator):
    """Pooled backbone features for a batch of ``(H, W, c)`` images.

    ``fit`` only validates the input shape and builds deterministic weights
    from ``seed``; nothing is learned. ``weights`` may be a name -> array
    mapping (for instance from :func:`msvil.weights.load_weights`).
    """

    def __init__(self, config="ViL-Tiny", seed=0, head_mode=None, impl="chunk", weights=None):
        self.config = config
        self.seed = seed
        self.head_mode = head_mode
        self.impl = impl
        self.weights = weights

    def _check(self, X, reset):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
        if X.ndim != 4:
            raise ValueError(f"expected images shaped (n, H, W, c), got {X.shape}")
        if not reset and X.shape[1:] != self.input_shape_:
            raise ValueError(f"fitted on images {self.input_shape_}, got {X.shape[1:]}")
        return X

    def fit(self, X, y=None):
        X = self._check(X, reset=True)
        cfg = self.config if isinstance(self.config, ModelConfig) else load_config(self.config)
        self.input_shape_ = X.shape[1:]
        self.model_ = Model.init(cfg, X.shape[1:3], seed=self.seed)
        if self.weights is not None:
            self.model_.load_state(self.weights)
        self.n_features_out_ = cfg.stages[-1].d
        self.classes_ = np.arange(cfg.num_classes)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = self._check(X, reset=False)
        m = self.model_
        out = np.empty((len(X), self.n_features_out_), dtype=np.float32)
        for i, img in enumerate(X):
            fmap, _ = forward_features(img, m, self.impl)
            out[i] = layer_norm(fmap.reshape(-1, fmap.shape[-1]), m.norm_g, m.norm_b).mean(axis=0)
        return out

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = self._check(X, reset=False)
        return np.stack([model_forward(img, self.model_, self.head_mode, self.impl)[0] for img in X])

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
