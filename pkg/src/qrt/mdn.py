"""MLP hypernetwork that outputs a Gaussian mixture per input row."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

SIGMA_FLOOR = 1e-6
ALLOWED_COMPONENTS = (1, 3, 10)
_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class MdnConfig:
    input_dim: int
    n_layers: int = 3
    width: int = 128
    n_components: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class MixtureParams:
    """Gaussian mixtures for ``n`` inputs; arrays have shape ``(n, K)``.

    Everything here is plain numpy and read-only: use it for evaluation, not
    for training.
    """

    def __init__(self, weights, means, scales):
        self.weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(scales, dtype=np.float64))
        if not (self.weights.shape == self.means.shape == self.scales.shape):
            raise ValueError("weights, means and scales must share a shape")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")

    def __len__(self):
        return self.weights.shape[0]

    def __getitem__(self, idx) -> "MixtureParams":
        return MixtureParams(self.weights[idx], self.means[idx], self.scales[idx])

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    def _z(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y[..., None] - self.means) / self.scales

    def log_pdf(self, y) -> np.ndarray:
        z = self._z(y)
        comp = np.log(self.weights) - 0.5 * z * z - 0.5 * math.log(2 * math.pi) - np.log(self.scales)
        with np.errstate(divide="ignore"):
            return special.logsumexp(comp, axis=-1)

    def pdf(self, y) -> np.ndarray:
        return np.exp(self.log_pdf(y))

    def cdf(self, y) -> np.ndarray:
        return np.sum(self.weights * special.ndtr(self._z(y)), axis=-1)

    def mean(self) -> np.ndarray:
        return np.sum(self.weights * self.means, axis=-1)

    def variance(self) -> np.ndarray:
        m = self.mean()
        second = np.sum(self.weights * (self.scales**2 + self.means**2), axis=-1)
        return np.maximum(second - m * m, 0.0)

    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance())

    def affine(self, shift: float, scale: float) -> "MixtureParams":
        """Distribution of ``shift + scale * Y``."""
        return MixtureParams(self.weights, shift + scale * self.means, scale * self.scales)

    def quantile(self, alpha, tol: float = 1e-12) -> np.ndarray:
        """Quantiles by bracketed bisection.

        ``alpha`` is a scalar (same level for every row), shape ``(n,)`` (one
        level per row) or ``(n, L)`` (L levels per row); the result has the
        broadcast shape.  Bisection stops once every bracket is narrower
        than ``tol`` (relative for large values).
        """
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        n = len(self)
        if alpha.ndim == 0:
            a, out_shape = np.full((n, 1), float(alpha)), (n,)
        elif alpha.ndim == 1:
            a, out_shape = alpha.reshape(n, 1), (n,)
        else:
            a, out_shape = alpha, alpha.shape
        w, mu, s = self.weights[:, None, :], self.means[:, None, :], self.scales[:, None, :]

        def F(y):
            return np.sum(w * special.ndtr((y[..., None] - mu) / s), axis=-1)

        lo = np.broadcast_to(np.min(self.means - 20 * self.scales, axis=1)[:, None], a.shape).copy()
        hi = np.broadcast_to(np.max(self.means + 20 * self.scales, axis=1)[:, None], a.shape).copy()
        width = hi - lo
        for _ in range(61):
            low_bad = F(lo) > a
            high_bad = F(hi) < a
            if not (low_bad.any() or high_bad.any()):
                break
            lo = np.where(low_bad, lo - width, lo)
            hi = np.where(high_bad, hi + width, hi)
            width = width * 2
        else:
            raise ArithmeticError("quantile bracket expansion exceeded 60 doublings")

        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = F(mid)
            below = fm < a
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= tol * np.maximum(1.0, np.abs(mid))):
                break
        return (0.5 * (lo + hi)).reshape(out_shape)


@dataclass
class MixtureTensors:
    """Differentiable mixture outputs: log-weights, means and scales, ``(n, K)``."""

    log_weights: Tensor
    means: Tensor
    scales: Tensor

    def standardized(self, y) -> Tensor:
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        return (y - self.means) / self.scales

    def log_pdf(self, y) -> Tensor:
        z = self.standardized(y)
        comp = self.log_weights + ad.gaussian_logpdf(z) - ad.log(self.scales)
        return ad.logsumexp(comp, axis=1)

    def cdf(self, y) -> Tensor:
        z = self.standardized(y)
        return ad.sum_(ad.exp(self.log_weights) * ad.gaussian_cdf(z), axis=1)

    def to_params(self) -> MixtureParams:
        return MixtureParams(np.exp(self.log_weights.value), self.means.value, self.scales.value)


def mixture_head(raw: Tensor, n_components: int) -> MixtureTensors:
    """Split raw outputs ``(n, 3K)`` into means, softplus scales and softmax weights."""
    K = n_components
    mu = raw[:, 0:K]
    rho = raw[:, K:2 * K]
    logits = raw[:, 2 * K:3 * K]
    sigma = ad.clamp_min(ad.softplus(rho), SIGMA_FLOOR)
    log_w = logits - ad.reshape(ad.logsumexp(logits, axis=1), (-1, 1))
    return MixtureTensors(log_w, mu, sigma)


class MixtureDensityNetwork:
    """Fully connected network mapping features to a Gaussian mixture."""

    def __init__(self, config: MdnConfig, seed: int = 0, lr: float = 1e-3):
        self.config = config
        self.params = ParamStore(lr=lr)
        rng = np.random.default_rng(seed)
        sizes = [config.input_dim] + [config.width] * config.n_layers + [3 * config.n_components]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.add(f"W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.add(f"b{i}", rng.uniform(-bound, bound, size=(1, fan_out)))

    @property
    def n_linear(self) -> int:
        return self.config.n_layers + 1

    def forward_tensors(self, X, params=None) -> MixtureTensors:
        params = self.params.params if params is None else params
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise ValueError(
                f"expected inputs with {self.config.input_dim} columns, got shape {X.shape}"
            )
        act = _ACTIVATIONS[self.config.activation]
        h = ad.constant(X)
        for i in range(self.n_linear):
            h = ad.affine(h, params[f"W{i}"], params[f"b{i}"])
            if i < self.n_linear - 1:
                h = act(h)
        return mixture_head(h, self.config.n_components)

    def forward(self, X) -> MixtureParams:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.forward_tensors(X).to_params()

    predict_params = forward

    # -- checkpoints --------------------------------------------------------
    def save(self, path) -> None:
        """Write config and parameters to an ``.npz`` archive.

        The config travels as a JSON string under ``__config__``; every
        parameter is stored under its own name, so a reload is bit-exact.
        """
        path = Path(path)
        arrays = self.params.state_dict()
        arrays["__config__"] = np.array(json.dumps(asdict(self.config), sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "MixtureDensityNetwork":
        with np.load(Path(path), allow_pickle=False) as data:
            config = MdnConfig(**json.loads(str(data["__config__"])))
            model = cls(config)
            model.params.load_state_dict({k: data[k] for k in data.files if k != "__config__"})
        return model
