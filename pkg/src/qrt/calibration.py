"""PIT calibration maps and recalibrated predictive distributions.

Five map families estimate the CDF of the probability integral transform
``Z = F(Y | X)`` from a set of centers ``Z_1..Z_n``:

* ``EMP``   empirical CDF, ``#{Z_i <= a} / n``
* ``DCP``   conformal variant, ``#{Z_i <= a} / (n + 1)``
* ``KDE``   mixture of logistic CDFs centred on the ``Z_i``
* ``TRUNC`` the KDE renormalised to ``[0, 1]``
* ``REFL``  the KDE with the mass outside ``[0, 1]`` folded back across the
  endpoints

The KDE kernels have variance ``b**2 * n**(-2/5)`` (Scott's rule with a
bandwidth multiplier ``b``).  A logistic distribution with scale ``s`` has
variance ``s**2 * pi**2 / 3``, so the kernel scale is ``sqrt(3 * var) / pi``.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "MapKind",
    "CalibrationMap",
    "RecalibratedDistribution",
    "build_map",
    "kernel_variance",
    "kernel_scale",
    "pit",
    "refl_log_density",
    "kernel_counter",
]

# Rows per chunk when evaluating n x m kernel matrices; keeps temporaries small.
_CHUNK_ELEMENTS = 1 << 16


class MapKind(str, Enum):
    EMP = "EMP"
    DCP = "DCP"
    KDE = "KDE"
    TRUNC = "TRUNC"
    REFL = "REFL"

    @property
    def smooth(self) -> bool:
        return self in (MapKind.KDE, MapKind.TRUNC, MapKind.REFL)


class KernelCounter:
    """Counts logistic-kernel evaluations made by this module."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0

    @contextlib.contextmanager
    def measure(self):
        """Yield a one-element list that holds the count made inside the block."""
        start = self.count
        box = [0]
        try:
            yield box
        finally:
            box[0] = self.count - start


kernel_counter = KernelCounter()


def kernel_variance(bandwidth: float, n: int) -> float:
    return bandwidth**2 * n ** (-2.0 / 5.0)


def kernel_scale(bandwidth: float, n: int) -> float:
    return math.sqrt(3.0 * kernel_variance(bandwidth, n)) / math.pi


def _logistic_pdf(u):
    # exp(-|u|) form keeps full relative precision deep in the tails
    e = np.abs(u)
    np.negative(e, out=e)
    np.exp(e, out=e)
    d = e + 1.0
    np.square(d, out=d)
    e /= d
    return e


def _logistic_cdf(u):
    # 1 / (1 + exp(-u)) == (1 + tanh(u / 2)) / 2, and tanh is cheaper here
    t = np.multiply(u, 0.5)
    np.tanh(t, out=t)
    t *= 0.5
    t += 0.5
    return t


def _row_chunks(n_rows: int, n_cols: int):
    step = max(1, _CHUNK_ELEMENTS // max(n_cols, 1))
    for lo in range(0, n_rows, step):
        yield slice(lo, min(lo + step, n_rows))


def _kde_cdf(x, centers, scale):
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty_like(flat)
    for sl in _row_chunks(flat.size, centers.size):
        out[sl] = _logistic_cdf((flat[sl, None] - centers[None, :]) / scale).mean(axis=1)
    kernel_counter.add(flat.size * centers.size)
    return out.reshape(x.shape)


def _refl_cdf_pdf(x, centers, scale):
    """Reflected-KDE CDF and density at ``x`` in ``[0, 1]`` from one kernel pass.

    Uses ``t = tanh(u / 2)``: the logistic CDF is ``(1 + t) / 2`` and the
    density ``(1 - t**2) / 4``.  Points with little total density are
    redone with the exp form, which keeps relative precision in the tails.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    half = 0.5 / scale
    qa = np.concatenate([x, -x, 2.0 - x]) * half
    ca = centers * half
    m = centers.size
    tsum = np.empty(3 * n)
    ksum = np.empty(3 * n)
    ones = np.ones(m)
    buf = None
    for sl in _row_chunks(3 * n, m):
        if buf is None:
            buf = np.empty((sl.stop - sl.start, m))
        t = buf[:sl.stop - sl.start]
        np.subtract.outer(qa[sl], ca, out=t)
        np.tanh(t, out=t)
        tsum[sl] = t @ ones
        ksum[sl] = np.einsum("ij,ij->i", t, t)
    F = 0.5 + 0.5 * tsum / m
    f = 0.25 * (m - ksum) / m
    dens = f[:n] + f[n:2 * n] + f[2 * n:]
    weak = np.flatnonzero(dens < 1e-6)
    if weak.size:
        rows = np.concatenate([weak, weak + n, weak + 2 * n])
        u = np.subtract.outer(2.0 * qa[rows], 2.0 * ca)
        f[rows] = _logistic_pdf(u).mean(axis=1)
        dens = f[:n] + f[n:2 * n] + f[2 * n:]
    kernel_counter.add(3 * n * m)
    return F[:n] - F[n:2 * n] + 1.0 - F[2 * n:], dens / scale


def _kde_pdf(x, centers, scale):
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty_like(flat)
    for sl in _row_chunks(flat.size, centers.size):
        out[sl] = _logistic_pdf((flat[sl, None] - centers[None, :]) / scale).mean(axis=1)
    kernel_counter.add(flat.size * centers.size)
    return out.reshape(x.shape) / scale


@dataclass(frozen=True, eq=False)
class CalibrationMap:
    """Immutable estimate of the PIT CDF built from sorted centers."""

    kind: MapKind
    centers: np.ndarray
    bandwidth: float | None = None
    spread_ok: bool = field(default=True, compare=False)

    @property
    def n(self) -> int:
        return self.centers.size

    @property
    def variance(self) -> float | None:
        return None if self.bandwidth is None else kernel_variance(self.bandwidth, self.n)

    @property
    def scale(self) -> float | None:
        return None if self.bandwidth is None else kernel_scale(self.bandwidth, self.n)

    def __eq__(self, other):
        if not isinstance(other, CalibrationMap):
            return NotImplemented
        return (self.kind is other.kind and self.bandwidth == other.bandwidth
                and np.array_equal(self.centers, other.centers))

    __hash__ = None

    # -- evaluation -----------------------------------------------------------
    def _count_le(self, a):
        return np.searchsorted(self.centers, a, side="right")

    def cdf(self, alpha):
        """Map value at ``alpha``; piecewise definitions outside ``[0, 1]``."""
        a = np.asarray(alpha, dtype=np.float64)
        kind, c, s = self.kind, self.centers, self.scale
        if kind is MapKind.EMP:
            return self._count_le(a) / self.n
        if kind is MapKind.DCP:
            return self._count_le(a) / (self.n + 1)
        if kind is MapKind.KDE:
            return _kde_cdf(a, c, s)
        if kind is MapKind.TRUNC:
            f0, f1 = _kde_cdf(np.array([0.0, 1.0]), c, s)
            inner = (_kde_cdf(np.clip(a, 0.0, 1.0), c, s) - f0) / (f1 - f0)
            return np.where(a <= 0.0, 0.0, np.where(a >= 1.0, 1.0, inner))
        # REFL: F(x) - F(-x) + 1 - F(2 - x) on the open interval.
        x = np.clip(a, 0.0, 1.0)
        inner = _kde_cdf(x, c, s) - _kde_cdf(-x, c, s) + 1.0 - _kde_cdf(2.0 - x, c, s)
        inner = np.clip(inner, 0.0, 1.0)
        return np.where(a <= 0.0, 0.0, np.where(a >= 1.0, 1.0, inner))

    def pdf(self, alpha):
        if not self.kind.smooth:
            raise TypeError(f"{self.kind.value} map has no density")
        a = np.asarray(alpha, dtype=np.float64)
        c, s = self.centers, self.scale
        if self.kind is MapKind.KDE:
            return _kde_pdf(a, c, s)
        inside = (a >= 0.0) & (a <= 1.0)
        x = np.clip(a, 0.0, 1.0)
        if self.kind is MapKind.TRUNC:
            f0, f1 = _kde_cdf(np.array([0.0, 1.0]), c, s)
            return np.where(inside, _kde_pdf(x, c, s) / (f1 - f0), 0.0)
        dens = _kde_pdf(x, c, s) + _kde_pdf(-x, c, s) + _kde_pdf(2.0 - x, c, s)
        return np.where(inside, dens, 0.0)

    def log_pdf(self, alpha):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(alpha))

    def cdf_and_pdf(self, alpha):
        """``(cdf(alpha), pdf(alpha))`` sharing one kernel pass for the reflected map."""
        if self.kind is not MapKind.REFL:
            return self.cdf(alpha), self.pdf(alpha)
        a = np.asarray(alpha, dtype=np.float64)
        inner, dens = _refl_cdf_pdf(np.clip(a, 0.0, 1.0), self.centers, self.scale)
        inner = np.clip(inner.reshape(a.shape), 0.0, 1.0)
        cdf = np.where(a <= 0.0, 0.0, np.where(a >= 1.0, 1.0, inner))
        pdf = np.where((a >= 0.0) & (a <= 1.0), dens.reshape(a.shape), 0.0)
        return cdf, pdf

    def inverse(self, p, iterations: int = 80):
        """Smallest ``a`` in ``[0, 1]`` with ``cdf(a) >= p`` (bisection for smooth kinds)."""
        p = np.asarray(p, dtype=np.float64)
        if self.kind is MapKind.EMP or self.kind is MapKind.DCP:
            denom = self.n if self.kind is MapKind.EMP else self.n + 1
            k = np.ceil(p * denom).astype(np.int64)
            # guard against p * denom landing a hair above an integer
            k = np.where((k - 1) / denom >= p, k - 1, k)
            k = np.clip(k, 0, None)
            padded = np.concatenate([[0.0], self.centers, [1.0]])
            return padded[np.minimum(k, self.n + 1)]
        lo = np.zeros_like(p)
        hi = np.ones_like(p)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return np.clip(0.5 * (lo + hi), 0.0, 1.0)

    __call__ = cdf

    # -- serialisation --------------------------------------------------------
    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "bandwidth": self.bandwidth,
            "centers": [float(c) for c in self.centers],
        }

    @classmethod
    def from_record(cls, record: dict) -> "CalibrationMap":
        return build_map(record["kind"], record["centers"], record.get("bandwidth"))


def _spread_assumption_holds(centers, scale, tol=1e-9) -> bool:
    outside = special.expit((-1.0 - centers) / scale) + special.expit((centers - 2.0) / scale)
    return bool(outside.mean() < tol)


def build_map(kind, centers, bandwidth=None) -> CalibrationMap:
    kind = MapKind(kind)
    c = np.sort(np.asarray(centers, dtype=np.float64).ravel())
    if c.size == 0:
        raise ValueError("calibration map needs at least one center")
    if not np.all(np.isfinite(c)) or c[0] < 0.0 or c[-1] > 1.0:
        raise ValueError("calibration map centers must lie in [0, 1]")
    if kind.smooth:
        if bandwidth is None:
            raise ValueError(f"{kind.value} map requires a bandwidth")
        bandwidth = float(bandwidth)
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
    else:
        bandwidth = None
    c.setflags(write=False)
    spread_ok = True
    if kind is MapKind.REFL:
        spread_ok = _spread_assumption_holds(c, kernel_scale(bandwidth, c.size))
        if not spread_ok:
            warnings.warn(
                "reflected map: kernel mass outside [-1, 2] exceeds 1e-9; "
                "the density will not integrate to one",
                RuntimeWarning,
                stacklevel=2,
            )
    return CalibrationMap(kind, c, bandwidth, spread_ok)


def pit(dist, y) -> np.ndarray:
    """PIT values ``F(y_i | x_i)`` clipped to ``[0, 1]``."""
    return np.clip(dist.cdf(y), 0.0, 1.0)


class RecalibratedDistribution:
    """The composition ``map o F`` over a base predictive distribution."""

    # quantile levels strictly inside (0, 1) for the base quantile function
    _EDGE = 1e-15

    def __init__(self, base, cmap: CalibrationMap):
        self.base = base
        self.map = cmap

    def __len__(self):
        return len(self.base)

    def __getitem__(self, idx):
        return RecalibratedDistribution(self.base[idx], self.map)

    def cdf(self, y):
        return self.map.cdf(self.base.cdf(y))

    def log_pdf(self, y):
        return self.base.log_pdf(y) + self.map.log_pdf(pit(self.base, y))

    def cdf_and_log_pdf(self, y):
        z = pit(self.base, y)
        cdf, dens = self.map.cdf_and_pdf(z)
        with np.errstate(divide="ignore"):
            return cdf, self.base.log_pdf(y) + np.log(dens)

    def map_term(self, y):
        """``log phi(F(y))``, the part added to the base log-density."""
        return self.map.log_pdf(pit(self.base, y))

    def pdf(self, y):
        return np.exp(self.log_pdf(y))

    def quantile(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        # the map inverse depends on the level only, so solve once per distinct level
        levels, back = np.unique(alpha, return_inverse=True)
        inner = self.map.inverse(levels)[back].reshape(alpha.shape)
        return self.base.quantile(np.clip(inner, self._EDGE, 1.0 - self._EDGE))

    def sd(self, n_levels: int = 512):
        levels = (np.arange(1, n_levels + 1) - 0.5) / n_levels
        q = self.quantile(np.broadcast_to(levels, (len(self), n_levels)))
        return q.std(axis=1)

    def affine(self, shift: float, scale: float) -> "RecalibratedDistribution":
        return RecalibratedDistribution(self.base.affine(shift, scale), self.map)


# -- differentiable reflected density ------------------------------------------

def _exact_kernel_rows(qa, ca):
    """Kernel values and ``-k'(u)`` from the ``exp(-|u|)`` form."""
    u = np.subtract.outer(qa, ca)
    e = np.exp(-np.abs(u))
    d = e + 1.0
    k = e / (d * d)
    return k, k * np.copysign((1.0 - e) / d, u)


def _refl_kernel_sums(q, c, inv_s):
    """Per-query kernel sums over the three reflections plus slope matrices.

    With ``t = tanh(u / 2)`` the logistic kernel is ``(1 - t**2) / 4`` and
    ``-k'(u) = k(u) t``.  That form is cheap but loses relative precision
    far in the tails, so queries whose total kernel mass is small are
    recomputed from the ``exp(-|u|)`` form.  The slope matrix is returned
    as ``-4 k'(u)``; callers fold the 1/4 into their chain factors.
    """
    n = q.size
    half = 0.5 * inv_s
    qa = np.concatenate([q, -q, 2.0 - q]) * half
    ca = c * half
    m = c.size
    tot = np.empty(3 * n)
    slope = np.empty((3 * n, m))
    ones = np.ones(m)
    tb = kb = None
    for sl in _row_chunks(3 * n, m):
        if tb is None:
            tb, kb = np.empty((2, sl.stop - sl.start, m))
        t, k = tb[:sl.stop - sl.start], kb[:sl.stop - sl.start]
        np.subtract.outer(qa[sl], ca, out=t)
        np.tanh(t, out=t)
        np.multiply(t, t, out=k)
        np.subtract(1.0, k, out=k)  # 4 k(u)
        tot[sl] = k @ ones
        np.multiply(k, t, out=slope[sl])
    tot *= 0.25
    combined = tot[:n] + tot[n:2 * n] + tot[2 * n:]
    weak = np.flatnonzero(combined < 1e-3)
    if weak.size:
        rows = np.concatenate([weak, weak + n, weak + 2 * n])
        k, sl_rows = _exact_kernel_rows(2.0 * qa[rows], 2.0 * ca)
        tot[rows] = k.sum(axis=1)
        slope[rows] = 4.0 * sl_rows
    return tot, slope


def refl_log_density(query, centers, bandwidth: float) -> Tensor:
    """Differentiable ``log phi_REFL(query_i)`` for a map built on ``centers``.

    Exactly ``3 * len(query) * len(centers)`` logistic-kernel evaluations are
    made (one kernel matrix per reflection).  ``centers`` may be a tensor
    (gradients flow into it) or a plain array.
    """
    query = ad.as_tensor(query)
    centers = ad.as_tensor(centers)
    q = query.value.ravel()
    c = centers.value.ravel()
    n, m = q.size, c.size
    s = kernel_scale(bandwidth, m)
    inv_s = 1.0 / s
    tot3, slope = _refl_kernel_sums(q, c, inv_s)
    kernel_counter.add(3 * n * m)
    tot = tot3[:n] + tot3[n:2 * n] + tot3[2 * n:]
    with np.errstate(divide="ignore"):
        out = np.log(tot) - math.log(m * s)

    def vjp_query(g):
        w = np.tile(g / tot, 3)
        rs = slope.sum(axis=1) * w * (0.25 * inv_s)
        # chain factors of the reflected arguments: +1, -1, -1
        return -(rs[:n] - rs[n:2 * n] - rs[2 * n:]).reshape(query.shape)

    def vjp_centers(g):
        w = np.tile(g / tot, 3)
        return (w @ slope * (0.25 * inv_s)).reshape(centers.shape)

    return ad.custom(out.reshape(query.shape), [(query, vjp_query), (centers, vjp_centers)],
                     "refl_kde_logpdf")
