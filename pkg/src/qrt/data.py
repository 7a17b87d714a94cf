"""Loading, splitting, standardizing and synthesizing regression tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_PERCENT = (65, 10, 15, 10)  # train / validation / calibration / test
DEFAULT_TRAIN_CAP = 53164
SYNTH_KINDS = ("linear-gaussian", "heteroscedastic", "bimodal", "discrete")


class DataError(ValueError):
    """Malformed or unusable input data."""


def load_table(path, header: bool | None = None, delimiter: str = ","):
    """Read a numeric delimited file; the last column is the target.

    ``header=None`` sniffs: a first row whose cells do not all parse as
    numbers is treated as a header.  Returns ``(X, y)``.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh, delimiter=delimiter) if any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")

    def numeric(row):
        try:
            [float(c) for c in row]
            return True
        except ValueError:
            return False

    start = 0
    if header is True or (header is None and not numeric(rows[0])):
        start = 1
    body = rows[start:]
    if not body:
        raise DataError(f"{path}: no data rows")
    width = len(body[0])
    if width < 2:
        raise DataError(f"{path}: need at least one feature column and a target column")
    values = np.empty((len(body), width))
    bad = []
    for i, row in enumerate(body):
        line_no = i + start + 1
        if len(row) != width:
            bad.append(line_no)
            continue
        try:
            values[i] = [float(c) for c in row]
        except ValueError:
            bad.append(line_no)
    if bad:
        raise DataError(f"{path}: non-numeric or ragged rows at lines {bad}")
    if not np.all(np.isfinite(values[:, -1])):
        raise DataError(f"{path}: non-finite target values")
    return values[:, :-1], values[:, -1]


def save_table(path, X, y, header: list[str] | None = None) -> None:
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row, target in zip(X, np.asarray(y, dtype=np.float64)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(target))])


@dataclass
class Splits:
    """Index partition plus training-set standardization statistics."""

    train: np.ndarray
    val: np.ndarray
    cal: np.ndarray
    test: np.ndarray
    seed: int
    fold_calibration_into_train: bool = False
    x_mean: np.ndarray | None = field(default=None, repr=False)
    x_sd: np.ndarray | None = field(default=None, repr=False)
    y_mean: float = 0.0
    y_sd: float = 1.0
    n_rows: int = 0
    boundaries: tuple = ()
    train_cap: int | None = None

    @property
    def fit_index(self) -> np.ndarray:
        """Rows used to fit the model (train, plus calibration when folded in)."""
        if self.fold_calibration_into_train:
            return np.concatenate([self.train, self.cal])
        return self.train

    def sizes(self) -> dict:
        return {k: int(len(getattr(self, k))) for k in ("train", "val", "cal", "test")}

    def manifest(self) -> dict:
        """Seed plus boundaries; :func:`split` rebuilds the same partition from it."""
        return {
            "seed": self.seed,
            "n_rows": self.n_rows,
            "boundaries": list(self.boundaries),
            "train_cap": self.train_cap,
            "sizes": self.sizes(),
            "fold_calibration_into_train": self.fold_calibration_into_train,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Splits":
        return split(manifest["n_rows"], manifest["seed"],
                     manifest["fold_calibration_into_train"], manifest.get("train_cap"))

    # -- standardization --------------------------------------------------------
    def fit_standardization(self, X, y) -> "Splits":
        """Compute z-scoring statistics from the fitting rows only."""
        idx = self.fit_index
        if len(idx) == 0:
            raise DataError("training partition is empty")
        Xt = np.asarray(X, dtype=np.float64)[idx]
        yt = np.asarray(y, dtype=np.float64)[idx]
        self.x_mean = Xt.mean(axis=0)
        sd = Xt.std(axis=0)
        self.x_sd = np.where(sd > 0, sd, 1.0)
        self.y_mean = float(yt.mean())
        ysd = float(yt.std())
        self.y_sd = ysd if ysd > 0 else 1.0
        return self

    def standardize_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_sd

    def standardize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_sd

    def destandardize_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_sd + self.y_mean

    def destandardize(self, dist):
        """Map a predictive distribution from standardized to original units."""
        return dist.affine(self.y_mean, self.y_sd)

    def partition(self, X, y, name: str):
        idx = self.fit_index if name == "fit" else getattr(self, name)
        return self.standardize_x(np.asarray(X)[idx]), self.standardize_y(np.asarray(y)[idx])


def split(n: int, seed: int, fold_calibration_into_train: bool = False,
          train_cap: int | None = None) -> Splits:
    """Seeded 65/10/15/10 partition of ``range(n)``.

    Validation, calibration and test sizes are floored; the remainder goes to
    training.  ``train_cap`` truncates the training partition (dropped rows
    are not used anywhere).
    """
    if n < 20:
        raise DataError("need at least 20 rows to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = n * SPLIT_PERCENT[1] // 100
    n_cal = n * SPLIT_PERCENT[2] // 100
    n_test = n * SPLIT_PERCENT[3] // 100
    n_train = n - n_val - n_cal - n_test
    b1, b2, b3 = n_train, n_train + n_val, n_train + n_val + n_cal
    train = perm[:b1]
    if train_cap is not None and len(train) > train_cap:
        train = train[:train_cap]
    return Splits(
        train=train, val=perm[b1:b2], cal=perm[b2:b3], test=perm[b3:], seed=seed,
        fold_calibration_into_train=fold_calibration_into_train,
        n_rows=n, boundaries=(b1, b2, b3), train_cap=train_cap,
    )


def synth(kind: str, n: int, seed: int = 0, n_features: int = 4):
    """Synthetic regression data.

    * ``linear-gaussian``  ``y = x @ beta + eps``, ``eps ~ N(0, 1)``
    * ``heteroscedastic``  ``y = sin(2 x_0) + x_1 + (0.1 + 0.8 |x_0|) eps``
    * ``bimodal``          ``y = s (2 + x_0) + 0.3 eps`` with ``s = +-1`` equiprobable
    * ``discrete``         ``round(x @ beta + eps)`` clipped to the 5 levels ``-2..2``

    Features are i.i.d. ``N(0, 1)``; ``beta = (1, 0.5, -0.5, 0.25, ...)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n_features))
    beta = np.array([1.0, 0.5, -0.5, 0.25] + [0.0] * max(0, n_features - 4))[:n_features]
    eps = rng.standard_normal(n)
    if kind == "linear-gaussian":
        y = X @ beta + eps
    elif kind == "heteroscedastic":
        x1 = X[:, 1] if n_features > 1 else 0.0
        y = np.sin(2.0 * X[:, 0]) + x1 + (0.1 + 0.8 * np.abs(X[:, 0])) * eps
    elif kind == "bimodal":
        sign = rng.choice([-1.0, 1.0], size=n)
        y = sign * (2.0 + X[:, 0]) + 0.3 * eps
    else:
        y = np.clip(np.round(X @ beta + eps), -2.0, 2.0)
    return X, y
