"""Calibrated mixture-density regression with in-training quantile recalibration."""

from .calibration import CalibrationMap, MapKind, RecalibratedDistribution, build_map, pit
from .estimators import MixtureDensityRegressor, QuantileRecalibrator
from .mdn import MdnConfig, MixtureDensityNetwork, MixtureParams
from .metrics import MetricReport, crps, evaluate, nll, pce
from .training import MethodSpec, TrainHistory, preset, qrt_loss, train

__version__ = "0.1.0"

__all__ = [
    "CalibrationMap", "MapKind", "RecalibratedDistribution", "build_map", "pit",
    "MixtureDensityRegressor", "QuantileRecalibrator",
    "MdnConfig", "MixtureDensityNetwork", "MixtureParams",
    "MetricReport", "crps", "evaluate", "nll", "pce",
    "MethodSpec", "TrainHistory", "preset", "qrt_loss", "train",
]
