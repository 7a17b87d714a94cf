"""scikit-learn style wrappers around the trainer and the calibration maps."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .calibration import MapKind, build_map
from .mdn import MdnConfig
from .metrics import nll as _nll
from .training import Ablation, MethodSpec, Partitions, train


class MixtureDensityRegressor(RegressorMixin, BaseEstimator):
    """Gaussian-mixture network regressor.

    ``alpha=0`` trains on plain NLL; ``alpha=1`` trains on the NLL of the
    model recalibrated with a reflected-KDE map built from each minibatch.
    A random ``validation_fraction`` of the rows drives early stopping.
    ``predict`` returns the predictive mean.
    """

    def __init__(self, n_components=3, n_layers=3, width=128, activation="relu", alpha=0.0,
                 bandwidth=0.1, ablation="none", batch_size=512, learning_rate=1e-3,
                 max_epochs=1000, patience=30, validation_fraction=0.1, random_state=0):
        self.n_components = n_components
        self.n_layers = n_layers
        self.width = width
        self.activation = activation
        self.alpha = alpha
        self.bandwidth = bandwidth
        self.ablation = ablation
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        n = len(y)
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n - n_val < 2:
            raise ValueError("too few rows to hold out a validation set")
        seed = int(self.random_state or 0)
        perm = np.random.default_rng(seed).permutation(n)
        val, tr = perm[:n_val], perm[n_val:]

        self.x_mean_ = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        self.x_scale_ = np.where(sd > 0, sd, 1.0)
        self.y_mean_ = float(y[tr].mean())
        ysd = float(y[tr].std())
        self.y_scale_ = ysd if ysd > 0 else 1.0

        Xs = (X - self.x_mean_) / self.x_scale_
        ys = (y - self.y_mean_) / self.y_scale_
        parts = Partitions(Xs[tr], ys[tr], Xs[val], ys[val])
        config = MdnConfig(X.shape[1], self.n_layers, self.width, self.n_components, self.activation)
        spec = MethodSpec(
            name="custom", alpha=float(self.alpha), posthoc=False, bandwidth=float(self.bandwidth),
            ablation=Ablation(self.ablation), batch_size=self.batch_size,
            learning_rate=self.learning_rate, max_epochs=self.max_epochs,
            patience=self.patience, seed=seed,
        )
        self.model_, self.history_ = train(config, spec, parts)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.x_mean_) / self.x_scale_

    def predict_distribution(self, X):
        """Per-row mixture in original target units."""
        return self.model_.forward(self._check(X)).affine(self.y_mean_, self.y_scale_)

    def predict(self, X):
        return self.predict_distribution(X).mean()

    def predict_quantile(self, X, q):
        return self.predict_distribution(X).quantile(q)

    def pit(self, X, y):
        y = np.asarray(y, dtype=np.float64).ravel()
        return np.clip(self.predict_distribution(X).cdf(y), 0.0, 1.0)

    def nll(self, X, y):
        return _nll(self.predict_distribution(X), np.asarray(y, dtype=np.float64).ravel())


class QuantileRecalibrator(TransformerMixin, BaseEstimator):
    """Fit a calibration map on PIT values and apply it.

    ``transform`` maps PIT values (or probability levels) through the fitted
    map; ``inverse_transform`` applies its generalized inverse.
    """

    def __init__(self, kind="REFL", bandwidth=0.1):
        self.kind = kind
        self.bandwidth = bandwidth

    @staticmethod
    def _pits(Z):
        Z = check_array(np.asarray(Z, dtype=np.float64).reshape(-1, 1), dtype=np.float64)
        z = Z.ravel()
        if np.any((z < 0) | (z > 1)):
            raise ValueError("PIT values must lie in [0, 1]")
        return z

    def fit(self, Z, y=None):
        kind = MapKind(self.kind)
        self.map_ = build_map(kind, self._pits(Z), self.bandwidth if kind.smooth else None)
        self.n_features_in_ = 1
        return self

    def transform(self, Z):
        check_is_fitted(self, "map_")
        Z = np.asarray(Z, dtype=np.float64)
        return self.map_.cdf(self._pits(Z)).reshape(Z.shape)

    def inverse_transform(self, P):
        check_is_fitted(self, "map_")
        P = np.asarray(P, dtype=np.float64)
        return self.map_.inverse(self._pits(P)).reshape(P.shape)

    def score_samples(self, Z):
        """Log density of the map at ``Z`` (smooth kinds only)."""
        check_is_fitted(self, "map_")
        return self.map_.log_pdf(self._pits(Z))
