"""Scores for predictive distributions: NLL, PCE, CRPS and mean SD.

Every function takes a distribution object exposing ``log_pdf``, ``cdf`` and
``quantile`` (a :class:`~qrt.mdn.MixtureParams` or a
:class:`~qrt.calibration.RecalibratedDistribution`) together with targets in
the same (usually standardized) space.  ``target_scale`` is the training SD
of the target; passing it reports results in original units.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .calibration import pit

DEFAULT_LEVELS = 100
DEFAULT_CRPS_LEVELS = 99


@dataclass(frozen=True)
class MetricReport:
    nll: float
    pce: float
    crps: float
    sd: float
    n: int
    levels: int = DEFAULT_LEVELS

    def to_dict(self) -> dict:
        return asdict(self)


def calibration_levels(m: int) -> np.ndarray:
    """Equidistant open-interval levels ``j / (m + 1)``, ``j = 1..m``."""
    if m < 1:
        raise ValueError("need at least one level")
    return np.arange(1, m + 1) / (m + 1)


def nll(dist, y, target_scale: float = 1.0) -> float:
    logp = np.asarray(dist.log_pdf(y), dtype=np.float64)
    if not np.all(np.isfinite(logp)):
        raise FloatingPointError("non-finite predictive density")
    return float(-logp.mean() + math.log(target_scale))


def pce_from_pit(z, m: int = DEFAULT_LEVELS) -> float:
    levels = calibration_levels(m)
    z = np.sort(np.asarray(z, dtype=np.float64).ravel())
    ecdf = np.searchsorted(z, levels, side="right") / z.size
    return float(np.mean(np.abs(levels - ecdf)))


def pce(dist, y, m: int = DEFAULT_LEVELS) -> float:
    return pce_from_pit(pit(dist, y), m)


def crps(dist, y, n_levels: int = DEFAULT_CRPS_LEVELS, target_scale: float = 1.0) -> float:
    """CRPS from the quantile decomposition, midpoint rule over ``n_levels``.

    ``CRPS = 2 * int_0^1 (1{y <= q_a} - a)(q_a - y) da``.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    levels = (np.arange(1, n_levels + 1) - 0.5) / n_levels
    q = dist.quantile(np.broadcast_to(levels, (y.size, n_levels)))
    diff = q - y[:, None]
    pinball = ((diff >= 0).astype(np.float64) - levels) * diff
    return float(2.0 * pinball.mean() * target_scale)


def mean_sd(dist, target_scale: float = 1.0) -> float:
    """Mean predictive SD; closed form for mixtures, quantile grid otherwise."""
    return float(np.mean(dist.sd()) * target_scale)


def evaluate(dist, y, target_scale: float = 1.0, m: int = DEFAULT_LEVELS,
             crps_levels: int = DEFAULT_CRPS_LEVELS, with_crps: bool = True) -> MetricReport:
    y = np.asarray(y, dtype=np.float64).ravel()
    return MetricReport(
        nll=nll(dist, y, target_scale),
        pce=pce(dist, y, m),
        crps=crps(dist, y, crps_levels, target_scale) if with_crps else float("nan"),
        sd=mean_sd(dist, target_scale),
        n=int(y.size),
        levels=m,
    )
