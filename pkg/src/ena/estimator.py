"""scikit-learn style wrapper around the hybrid encoder for grid classification."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .hybrid import HybridConfig, model_forward, predict_proba


def _check_images(X, grid, channels) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    size = int(np.prod(grid))
    if X.ndim == 2 and X.shape[1] == channels * size:
        X = X.reshape((X.shape[0], channels) + tuple(grid))
    elif X.ndim == len(grid) + 1 and channels == 1:
        X = X[:, None]
    if X.shape[1:] != (channels,) + tuple(grid):
        raise ValueError(f"expected images of shape (n, {channels}, {', '.join(map(str, grid))}) "
                         f"or flattened rows, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


class ENAClassifier(ClassifierMixin, BaseEstimator):
    """Hybrid delta-rule / local-attention classifier for small images.

    ``X`` may be ``(n, C, *grid)``, ``(n, *grid)`` for one channel, or flattened
    ``(n, C * prod(grid))`` rows. ``transform`` returns pooled features.
    """

    def __init__(self, grid=(16, 16), num_layers=2, d_model=32, heads=2, linear="delta",
                 attention="sta", window=None, tile=None, patch=(1, 1), channels=1,
                 steps=200, batch_size=16, lr=3e-3, weight_decay=0.05, warmup=20,
                 dtype="float64", random_state=0):
        self.grid = grid
        self.num_layers = num_layers
        self.d_model = d_model
        self.heads = heads
        self.linear = linear
        self.attention = attention
        self.window = window
        self.tile = tile
        self.patch = patch
        self.channels = channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.dtype = dtype
        self.random_state = random_state

    def _model_config(self, num_classes: int) -> HybridConfig:
        return HybridConfig.ena(
            self.num_layers, linear=self.linear, attention=self.attention,
            window=self.window, tile=self.tile, d_model=self.d_model, heads=self.heads,
            grid=tuple(self.grid), patch=tuple(self.patch), channels=self.channels,
            num_classes=num_classes).validate()

    def fit(self, X, y):
        from .harness.config import OptimConfig, RunConfig, TaskConfig
        from .harness.tasks import SynthDataset
        from .harness.train import train

        X = _check_images(X, self.grid, self.channels)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        n_classes = max(2, len(self.classes_))
        config = RunConfig(
            model=self._model_config(n_classes),
            optim=OptimConfig(lr=self.lr, weight_decay=self.weight_decay, warmup=self.warmup),
            task=TaskConfig(grid=tuple(self.grid), classes=n_classes),
            steps=self.steps, batch_size=min(self.batch_size, X.shape[0]),
            seed=self.random_state, dtype=self.dtype)
        meta = {"classes": n_classes}
        data = SynthDataset(X, encoded, meta)
        result = train(config, write=False, data=(data, data))
        self.params_ = result.params
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.history_ = result.records
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = _check_images(X, self.grid, self.channels)
        with nx.precision(np.dtype(self.dtype)):
            proba = predict_proba(X.astype(self.dtype), self.params_)
        return proba[:, :len(self.classes_)] if len(self.classes_) > 1 else proba[:, :1]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Mean-pooled final-norm features, ``(n, d_model)``."""
        check_is_fitted(self, "params_")
        X = _check_images(X, self.grid, self.channels)
        with nx.precision(np.dtype(self.dtype)):
            hidden = model_forward(X.astype(self.dtype), self.params_, return_hidden=True)
        return hidden.numpy().mean(axis=1)
