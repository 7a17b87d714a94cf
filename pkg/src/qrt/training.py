"""Training with an in-loop calibration map, plus post-hoc recalibration.

One loss covers plain NLL training, quantile regularization and quantile
recalibration training::

    L = -(1/B) sum_i [ log f(y_i | x_i) + alpha * log phi(Z_i) ],  Z_i = F(y_i | x_i)

where ``phi`` is the reflected-KDE density built from PIT values.  ``alpha=0``
is plain NLL, ``alpha=1`` is the NLL of the recalibrated model, and a negative
``alpha`` rewards high PIT entropy (regularization with ``lambda = -alpha``).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamStore, Tensor
from .calibration import (
    MapKind,
    RecalibratedDistribution,
    build_map,
    kernel_counter,
    pit,
    refl_log_density,
)
from .mdn import MdnConfig, MixtureDensityNetwork
from .metrics import crps, pce, pce_from_pit

log = logging.getLogger(__name__)

BANDWIDTH_GRID = (0.01, 0.05, 0.1, 0.2)
LAMBDA_GRID = (0.0, 0.01, 0.05, 0.2, 1.0, 5.0)
SPACING_FLOOR = 1e-12


class Ablation(str, Enum):
    NONE = "none"
    FROZEN_INIT = "frozen-init"
    STOP_GRAD = "stop-grad"
    LEARNED_CENTERS = "learned-centers"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class MethodSpec:
    """One row of the method table plus optimisation settings.

    ``bandwidth`` and ``lambdas`` may hold several candidates; the runner
    then trains one model per candidate and selects on the validation split.
    """

    name: str = "QRTC"
    alpha: float = 1.0
    posthoc: bool = True
    bandwidth: float | tuple = 0.1
    lambdas: tuple = ()
    regularizer: str = "map"  # "map" (reflected-KDE term) or "vasicek"
    ablation: Ablation = Ablation.NONE
    map_source: str = "batch"  # "batch" or "sampled"
    map_size: int = 512
    posthoc_kind: MapKind = MapKind.REFL
    posthoc_bandwidths: tuple = BANDWIDTH_GRID
    batch_size: int = 512
    learning_rate: float = 1e-3
    max_epochs: int = 1000
    patience: int = 30
    drop_last: bool | None = None
    fold_calibration_into_train: bool | None = None
    seed: int = 0

    def __post_init__(self):
        self.ablation = Ablation(self.ablation)
        self.posthoc_kind = MapKind(self.posthoc_kind)
        if isinstance(self.bandwidth, list):
            self.bandwidth = tuple(self.bandwidth)
        self.lambdas = tuple(self.lambdas)
        self.posthoc_bandwidths = tuple(self.posthoc_bandwidths)
        if self.regularizer not in ("map", "vasicek"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.map_source not in ("batch", "sampled"):
            raise ValueError(f"unknown map source {self.map_source!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def tuned(self) -> bool:
        return bool(self.lambdas)

    @property
    def bandwidth_candidates(self) -> tuple:
        b = self.bandwidth
        return tuple(b) if isinstance(b, tuple) else (b,)

    @property
    def should_drop_last(self) -> bool:
        if self.drop_last is not None:
            return self.drop_last
        return self.alpha != 0 or self.tuned

    @property
    def folds_calibration(self) -> bool:
        if self.fold_calibration_into_train is not None:
            return self.fold_calibration_into_train
        return self.alpha == 0 and not self.posthoc and not self.tuned

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        d["posthoc_kind"] = self.posthoc_kind.value
        d["bandwidth"] = list(self.bandwidth) if isinstance(self.bandwidth, tuple) else self.bandwidth
        d["lambdas"] = list(self.lambdas)
        d["posthoc_bandwidths"] = list(self.posthoc_bandwidths)
        d["optimizer"] = {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        d = {k: v for k, v in d.items() if k != "optimizer"}
        return cls(**d)


def preset(name: str, **overrides) -> MethodSpec:
    """Named method rows: BASE, QRC, QREG, QREGC, QRT, QRTC, QRIC, QRGC, QRLC."""
    rows = {
        "BASE": dict(alpha=0.0, posthoc=False),
        "QRC": dict(alpha=0.0, posthoc=True),
        "QREG": dict(alpha=0.0, posthoc=False, lambdas=LAMBDA_GRID),
        "QREGC": dict(alpha=0.0, posthoc=True, lambdas=LAMBDA_GRID),
        "QRT": dict(alpha=1.0, posthoc=False),
        "QRTC": dict(alpha=1.0, posthoc=True),
        "QRIC": dict(alpha=1.0, posthoc=True, ablation=Ablation.FROZEN_INIT),
        "QRGC": dict(alpha=1.0, posthoc=True, ablation=Ablation.STOP_GRAD),
        "QRLC": dict(alpha=1.0, posthoc=True, ablation=Ablation.LEARNED_CENTERS),
    }
    key = name.upper()
    if key not in rows:
        raise KeyError(f"unknown method preset {name!r}; known: {sorted(rows)}")
    kwargs = {"bandwidth": BANDWIDTH_GRID if rows[key]["alpha"] != 0 or "lambdas" in rows[key] else 0.1}
    kwargs.update(rows[key])
    kwargs.update(overrides)
    return MethodSpec(name=key, **kwargs)


PRESET_NAMES = ("BASE", "QRC", "QREG", "QREGC", "QRT", "QRTC", "QRIC", "QRGC", "QRLC")


# -- loss terms ---------------------------------------------------------------

def vasicek_entropy(z, k: int | None = None):
    """Sample-spacing statistic ``mean log[(N+1)/k (Z_(i+k) - Z_(i))]``.

    Differentiable through a hard sort when ``z`` is a tensor.  Zero spacings
    are floored at ``1e-12`` and logged.  For continuous ``Z`` the statistic
    estimates the differential entropy ``H(Z)``; it is 0 for a perfectly
    uniform sample.
    """
    is_tensor = isinstance(z, Tensor)
    zt = ad.as_tensor(z)
    if zt.ndim != 1:
        zt = zt.reshape(-1)
    n = zt.size
    if k is None:
        k = int(math.ceil(math.sqrt(n)))
    if not 1 <= k <= n - 1:
        raise ValueError(f"window k={k} must satisfy 1 <= k <= N-1 (N={n})")
    zs, _ = ad.sort(zt)
    spacing = zs[k:] - zs[:-k]
    if np.any(spacing.value < SPACING_FLOOR):
        log.warning("vasicek: %d spacings below %g floored",
                    int(np.sum(spacing.value < SPACING_FLOOR)), SPACING_FLOOR)
    spacing = ad.clamp_min(spacing, SPACING_FLOOR)
    out = ad.mean(ad.log(spacing * ((n + 1) / k)))
    return out if is_tensor else out.item()


def qrt_loss(model, X, y, alpha: float = 1.0, bandwidth: float = 0.1,
             ablation: Ablation | str = Ablation.NONE, centers=None, params=None,
             regularizer: str = "map", vasicek_k: int | None = None, return_nll: bool = False):
    """Minibatch loss; ``centers`` overrides the batch PITs as map centers.

    With ``ablation='stop-grad'`` the batch PITs used as centers are treated
    as constants.  Frozen or learned centers are passed in via ``centers``.
    """
    ablation = Ablation(ablation)
    mix = model.forward_tensors(X, params)
    logf = mix.log_pdf(y)
    base_nll = -ad.mean(logf)
    loss = _loss_terms(mix, logf, base_nll, y, alpha, bandwidth, ablation, centers, regularizer, vasicek_k)
    return (loss, base_nll.item()) if return_nll else loss


def _loss_terms(mix, logf, base_nll, y, alpha, bandwidth, ablation, centers, regularizer, vasicek_k):
    if alpha == 0:
        return base_nll
    if len(logf.value) < 2:
        raise ValueError("the calibration-map term needs at least 2 rows")
    if bandwidth is None or bandwidth <= 0:
        raise ValueError("bandwidth must be positive when alpha != 0")
    z = mix.cdf(y)
    if regularizer == "vasicek":
        # alpha < 0 is regularization: penalty lambda * (-H_hat) with lambda = -alpha
        return base_nll + alpha * vasicek_entropy(z, vasicek_k)
    if centers is None:
        centers = z.detach() if ablation is Ablation.STOP_GRAD else z
    logphi = refl_log_density(z, centers, bandwidth)
    return -ad.mean(logf + alpha * logphi)


def recalibrated_nll_direct(model, X, y, centers, bandwidth) -> float:
    """NLL of ``map o F`` from a reflected map, evaluated through the numpy map."""
    base = model.forward(X)
    cmap = build_map(MapKind.REFL, np.clip(centers, 0, 1), bandwidth)
    return float(-np.mean(RecalibratedDistribution(base, cmap).log_pdf(y)))


# -- map sources ----------------------------------------------------------------

class SampledMapSource:
    """Draw map centers from a random training subset at every step."""

    def __init__(self, X, y, m: int, rng: np.random.Generator):
        if m < 2:
            raise ValueError("map size must be >= 2")
        self.X = np.asarray(X)
        self.y = np.asarray(y)
        self.m = min(m, len(self.y))
        self.rng = rng

    def draw(self) -> np.ndarray:
        return self.rng.choice(len(self.y), size=self.m, replace=False)

    def centers(self, model, params=None) -> Tensor:
        idx = self.draw()
        return model.forward_tensors(self.X[idx], params).cdf(self.y[idx])


# -- early stopping -------------------------------------------------------------

class EarlyStopping:
    """Track the best (lowest) score and stop after ``patience`` misses."""

    def __init__(self, patience: int = 30):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.best_state = None
        self.misses = 0

    def update(self, epoch: int, score: float, state=None) -> bool:
        """Record ``score``; return True when training should stop."""
        if score < self.best:
            self.best = score
            self.best_epoch = epoch
            self.best_state = state() if callable(state) else state
            self.misses = 0
        else:
            self.misses += 1
        return self.misses >= self.patience


# -- training loop --------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    val_pce: list = field(default_factory=list)
    epoch_time: list = field(default_factory=list)
    selected_epoch: int = -1
    stopped_epoch: int = -1
    n_parameters: int = 0
    kernel_evals_per_batch: int = 0
    model_rows_per_step: int = 0
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Partitions:
    """Standardized arrays for one split."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_cal: np.ndarray | None = None
    y_cal: np.ndarray | None = None
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    y_mean: float = 0.0
    y_sd: float = 1.0

    @classmethod
    def from_splits(cls, X, y, splits) -> "Partitions":
        if splits.x_mean is None:
            splits.fit_standardization(X, y)
        Xt, yt = splits.partition(X, y, "fit")
        Xv, yv = splits.partition(X, y, "val")
        Xc, yc = splits.partition(X, y, "cal")
        Xs, ys = splits.partition(X, y, "test")
        return cls(Xt, yt, Xv, yv, Xc, yc, Xs, ys, splits.y_mean, splits.y_sd)


def validation_scores(model, parts: Partitions, alpha: float, bandwidth: float | None):
    """Validation NLL and PCE (standardized units).

    For ``alpha != 0`` the model is scored after recalibration with a
    reflected map built from the PITs of the full training partition.
    """
    dist = model.forward(parts.X_val)
    if alpha != 0 and bandwidth:
        z_train = pit(model.forward(parts.X_train), parts.y_train)
        dist = RecalibratedDistribution(dist, build_map(MapKind.REFL, z_train, bandwidth))
        z_val, logp = dist.cdf_and_log_pdf(parts.y_val)
    else:
        z_val, logp = pit(dist, parts.y_val), dist.log_pdf(parts.y_val)
    return float(-np.mean(logp)), pce_from_pit(z_val)


def _batches(n, batch_size, drop_last, rng):
    perm = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    return [perm[i:i + batch_size] for i in range(0, stop, batch_size)]


def train(config: MdnConfig, spec: MethodSpec, parts: Partitions, bandwidth: float | None = None,
          alpha: float | None = None, validation_fn=None, on_epoch_end=None):
    """Fit a mixture network; returns ``(model, history)``.

    ``alpha`` and ``bandwidth`` default to the MethodSpec values (first candidate).
    ``validation_fn(model, epoch) -> (nll, pce)`` replaces the default
    validation scoring.  The returned model carries the best-epoch weights.
    """
    alpha = spec.alpha if alpha is None else alpha
    bandwidth = spec.bandwidth_candidates[0] if bandwidth is None else bandwidth
    if len(parts.y_train) == 0 or len(parts.y_val) == 0:
        raise ValueError("train and validation partitions must be non-empty")
    rng = np.random.default_rng([spec.seed, 1])
    model = MixtureDensityNetwork(config, seed=spec.seed, lr=spec.learning_rate)
    n = len(parts.y_train)
    B = min(spec.batch_size, n)
    extra = ParamStore(lr=spec.learning_rate)
    history = TrainHistory()

    use_map = alpha != 0 and spec.regularizer == "map"
    frozen = None
    sampler = None
    if use_map and spec.ablation is Ablation.LEARNED_CENTERS:
        u = rng.uniform(0.0, 1.0, size=B)
        extra.add("map_centers", special.logit(u))
    if use_map and spec.map_source == "sampled":
        sampler = SampledMapSource(parts.X_train, parts.y_train, spec.map_size, rng)
    history.n_parameters = model.params.n_parameters() + extra.n_parameters()

    def centers_for_step():
        if not use_map:
            return None
        if spec.ablation is Ablation.LEARNED_CENTERS:
            return ad.sigmoid(extra["map_centers"])
        if spec.ablation is Ablation.FROZEN_INIT:
            return frozen
        if sampler is not None:
            c = sampler.centers(model)
            return c.detach() if spec.ablation is Ablation.STOP_GRAD else c
        return None

    if validation_fn is None:
        def validation_fn(m, epoch):
            return validation_scores(m, parts, alpha, bandwidth if use_map else None)

    stopper = EarlyStopping(spec.patience)
    for epoch in range(spec.max_epochs):
        t0 = time.perf_counter()
        batches = _batches(n, B, spec.should_drop_last, rng)
        if use_map and spec.ablation is Ablation.FROZEN_INIT and frozen is None:
            first = batches[0]
            frozen = pit(model.forward(parts.X_train[first]), parts.y_train[first])
        losses, nlls, sizes = [], [], []
        for idx in batches:
            try:
                with kernel_counter.measure() as evals:
                    loss, batch_nll = qrt_loss(model, parts.X_train[idx], parts.y_train[idx], alpha,
                                               bandwidth, spec.ablation, centers=centers_for_step(),
                                               regularizer=spec.regularizer, return_nll=True)
            except NonFiniteError as exc:
                history.stopped_epoch = epoch
                raise TrainingDiverged(f"non-finite value in op {exc.op!r} at epoch {epoch}",
                                       history) from exc
            loss.backward()
            model.params.step()
            extra.step()
            history.steps += 1
            history.kernel_evals_per_batch = evals[0]
            history.model_rows_per_step = len(idx) + (sampler.m if sampler is not None else 0)
            losses.append(loss.item())
            nlls.append(batch_nll)
            sizes.append(len(idx))
        history.train_loss.append(float(np.average(losses, weights=sizes)))
        history.train_nll.append(float(np.average(nlls, weights=sizes)))
        vnll, vpce = validation_fn(model, epoch)
        history.val_nll.append(float(vnll))
        history.val_pce.append(float(vpce))
        history.epoch_time.append(time.perf_counter() - t0)
        if not math.isfinite(vnll):
            history.stopped_epoch = epoch
            raise TrainingDiverged(f"non-finite validation NLL at epoch {epoch}", history)
        stop = stopper.update(epoch, vnll, model.params.state_dict)
        if on_epoch_end is not None:
            on_epoch_end(model, epoch, history)
        if stop:
            break
    history.stopped_epoch = epoch
    history.selected_epoch = stopper.best_epoch
    model.params.load_state_dict(stopper.best_state)
    return model, history


# -- post-hoc recalibration and selection --------------------------------------

class RecalibratedModel:
    """A trained network composed with a calibration map."""

    def __init__(self, model, cmap):
        self.model = model
        self.map = cmap

    def distribution(self, X) -> RecalibratedDistribution:
        return RecalibratedDistribution(self.model.forward(X), self.map)

    def cdf(self, X, y):
        return self.distribution(X).cdf(y)

    def pdf(self, X, y):
        return self.distribution(X).pdf(y)

    def log_pdf(self, X, y):
        return self.distribution(X).log_pdf(y)

    def quantile(self, X, alpha):
        return self.distribution(X).quantile(alpha)


def posthoc_recalibrate(model, X_cal, y_cal, kind=MapKind.REFL, bandwidth=0.1) -> RecalibratedModel:
    if len(y_cal) == 0:
        raise ValueError("calibration split is empty")
    z = pit(model.forward(X_cal), y_cal)
    return RecalibratedModel(model, build_map(kind, z, bandwidth if MapKind(kind).smooth else None))


def select_bandwidth(candidates, score) -> float:
    """Candidate with the lowest ``score(b)``; ties go to the smaller ``b``.

    ``score`` is a callable or a mapping from bandwidth to validation NLL.
    """
    candidates = sorted(candidates)
    if not candidates:
        raise ValueError("no bandwidth candidates")
    get = score.__getitem__ if isinstance(score, dict) else score
    best, best_val = candidates[0], get(candidates[0])
    for b in candidates[1:]:
        v = get(b)
        if v < best_val:
            best, best_val = b, v
    return best


def select_lambda(candidates: dict, cap: float = 1.10) -> float:
    """Lowest-PCE lambda whose CRPS stays within ``cap`` times the lambda=0 CRPS.

    ``candidates`` maps lambda to ``(crps, pce)`` on the validation split and
    must contain lambda = 0.  The cap is inclusive; ties go to the smaller lambda.
    """
    if 0.0 not in candidates and 0 not in candidates:
        raise ValueError("lambda candidates must include 0")
    ref = candidates[0.0][0]
    best, best_pce = 0.0, math.inf
    for lam in sorted(candidates):
        c, p = candidates[lam]
        if c <= cap * ref and p < best_pce:
            best, best_pce = lam, p
    return float(best) if math.isfinite(best_pce) else 0.0


def validation_crps_pce(model, parts: Partitions) -> tuple[float, float]:
    dist = model.forward(parts.X_val)
    return crps(dist, parts.y_val), pce(dist, parts.y_val)


__all__ = [
    "Ablation", "MethodSpec", "TrainHistory", "Partitions", "EarlyStopping",
    "SampledMapSource", "RecalibratedModel", "TrainingDiverged", "preset", "PRESET_NAMES",
    "qrt_loss", "vasicek_entropy", "train", "posthoc_recalibrate", "select_bandwidth",
    "select_lambda", "validation_scores", "validation_crps_pce", "recalibrated_nll_direct",
]
