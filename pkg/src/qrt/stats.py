"""Cross-dataset comparison statistics.

Effect sizes (Cohen's d), the Friedman omnibus test, pairwise Wilcoxon
signed-rank tests with Holm's step-down correction, average ranks with
critical-difference cliques, and the discreteness level of a target vector.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

LETTER_VALUE_LEVELS = (1 / 8, 1 / 4, 1 / 2, 3 / 4, 7 / 8)
EXACT_WILCOXON_MAX_N = 20


def cohens_d(a, b) -> float:
    """Standardized mean difference ``(mean(a) - mean(b)) / pooled_sd``.

    Zero pooled SD gives 0 for equal means and a signed infinity otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("cohens_d needs at least two samples per group")
    diff = a.mean() - b.mean()
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    sd = math.sqrt(pooled)
    if sd == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return float(diff / sd)


def rank_rows(scores, lower_is_better: bool = True) -> np.ndarray:
    """Per-row ranks (1 = best), ties mid-ranked."""
    scores = np.asarray(scores, dtype=np.float64)
    signed = scores if lower_is_better else -scores
    return np.vstack([sps.rankdata(row, method="average") for row in signed])


def friedman(scores, lower_is_better: bool = True) -> tuple[float, float]:
    """Friedman chi-square statistic (tie corrected) and p-value.

    ``scores`` has shape ``(datasets, methods)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, k = scores.shape
    if n < 2 or k < 2:
        raise ValueError("friedman needs at least 2 datasets and 2 methods")
    ranks = rank_rows(scores, lower_is_better)
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * np.sum(rank_sums**2) - 3.0 * n * (k + 1)
    ties = 0.0
    for row in ranks:
        _, counts = np.unique(row, return_counts=True)
        ties += np.sum(counts**3 - counts)
    denom = 1.0 - ties / (n * k * (k * k - 1))
    if denom <= 0.0:
        return 0.0, 1.0
    stat = max(float(stat / denom), 0.0)
    return stat, float(sps.chi2.sf(stat, k - 1))


def _signed_rank_distribution(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each attainable ``2 * T+`` over all sign assignments."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y=None) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test; returns ``(T+, p)``.

    Zero differences are dropped.  For at most 20 non-zero differences the
    p-value is exact (the sign-flip distribution, mid-ranks included);
    beyond that a tie-corrected normal approximation is used.
    """
    d = np.asarray(x, dtype=np.float64).ravel()
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64).ravel()
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 0.0, 1.0
    ranks = sps.rankdata(np.abs(d), method="average")
    t_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_distribution(doubled)
        t2 = int(round(2 * t_plus))
        total = counts.sum()
        lower = counts[: t2 + 1].sum() / total
        upper = counts[t2:].sum() / total
        return t_plus, float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    if var <= 0:
        return t_plus, 1.0
    z = (t_plus - mean) / math.sqrt(var)
    return t_plus, float(min(1.0, 2.0 * sps.norm.sf(abs(z))))


def holm(pvalues, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Holm step-down procedure; returns ``(reject, adjusted_p)``.

    Sorted ascending, hypothesis ``i`` (0-based) is compared with
    ``alpha / (m - i)``; testing stops at the first non-rejection.
    """
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted_sorted = np.maximum.accumulate((m - np.arange(m)) * p[order])
    adjusted_sorted = np.minimum(adjusted_sorted, 1.0)
    reject_sorted = np.zeros(m, dtype=bool)
    for i, idx in enumerate(order):
        if p[idx] <= alpha / (m - i):
            reject_sorted[i] = True
        else:
            break
    reject = np.empty(m, dtype=bool)
    adjusted = np.empty(m)
    reject[order] = reject_sorted
    adjusted[order] = adjusted_sorted
    return reject, adjusted


@dataclass
class PairwiseResult:
    method_a: str
    method_b: str
    statistic: float
    p_value: float
    p_adjusted: float
    significant: bool


def wilcoxon_holm(scores, methods, alpha: float = 0.05) -> list[PairwiseResult]:
    """All-pairs Wilcoxon tests over datasets with Holm correction."""
    scores = np.asarray(scores, dtype=np.float64)
    pairs = list(itertools.combinations(range(len(methods)), 2))
    raw = [wilcoxon_signed_rank(scores[:, i], scores[:, j]) for i, j in pairs]
    reject, adjusted = holm([p for _, p in raw], alpha)
    return [
        PairwiseResult(methods[i], methods[j], t, p, float(pa), bool(r))
        for (i, j), (t, p), pa, r in zip(pairs, raw, adjusted, reject)
    ]


def average_ranks(scores, lower_is_better: bool = True) -> np.ndarray:
    return rank_rows(scores, lower_is_better).mean(axis=0)


def cliques(methods, avg_ranks, pairwise: list[PairwiseResult]) -> list[list[str]]:
    """Maximal runs of rank-adjacent methods with no significant pair inside."""
    order = [methods[i] for i in np.argsort(avg_ranks, kind="stable")]
    significant = {frozenset((r.method_a, r.method_b)) for r in pairwise if r.significant}
    runs = []
    for start in range(len(order)):
        end = start
        while end + 1 < len(order) and all(
            frozenset((order[end + 1], other)) not in significant for other in order[start:end + 1]
        ):
            end += 1
        if end > start:
            runs.append((start, end))
    maximal = [r for r in runs if not any(o != r and o[0] <= r[0] and r[1] <= o[1] for o in runs)]
    return [order[s:e + 1] for s, e in maximal]


def letter_values(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {f"q{lvl:.3f}": float("nan") for lvl in LETTER_VALUE_LEVELS}
    return {f"q{lvl:.3f}": float(np.quantile(v, lvl)) for lvl in LETTER_VALUE_LEVELS}


def discreteness(targets, top: int = 10) -> float:
    """Fraction of targets equal to one of the ``top`` most frequent values.

    Frequency ties at the cut-off are broken by smaller value first; the
    mass is the same whichever tied value is picked.
    """
    y = np.asarray(targets).ravel()
    if y.size == 0:
        raise ValueError("discreteness of an empty target vector")
    counts = sorted(Counter(y.tolist()).items(), key=lambda kv: (-kv[1], kv[0]))
    return sum(c for _, c in counts[:top]) / y.size


@dataclass
class ComparisonReport:
    metric: str
    baseline: str
    methods: list[str]
    datasets: list[str]
    cohens_d: dict[str, dict[str, float]]
    letter_values: dict[str, dict[str, float]]
    friedman_statistic: float
    friedman_p: float
    pairwise: list[PairwiseResult]
    average_ranks: dict[str, float]
    cliques: list[list[str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "baseline": self.baseline,
            "methods": self.methods,
            "datasets": self.datasets,
            "cohens_d": self.cohens_d,
            "letter_values": self.letter_values,
            "friedman": {"statistic": self.friedman_statistic, "p_value": self.friedman_p},
            "pairwise": [vars(p) for p in self.pairwise],
            "average_ranks": self.average_ranks,
            "cliques": self.cliques,
        }


def compare(results: dict, metric: str, baseline: str, alpha: float = 0.05,
            lower_is_better: bool = True) -> ComparisonReport:
    """Build a :class:`ComparisonReport` from ``results[dataset][method] -> seed scores``."""
    datasets = sorted(results)
    methods = sorted({m for d in datasets for m in results[d]})
    missing = [(d, m) for d in datasets for m in methods if m not in results[d]]
    if missing:
        raise KeyError(f"ragged result matrix, missing cells: {missing}")
    if baseline not in methods:
        raise KeyError(f"baseline {baseline!r} not among methods {methods}")
    means = np.array([[np.mean(results[d][m]) for m in methods] for d in datasets])
    effect = {
        m: {d: cohens_d(results[d][m], results[d][baseline]) for d in datasets}
        for m in methods if m != baseline
    }
    lv = {m: letter_values(list(effect[m].values())) for m in effect}
    stat, p = friedman(means, lower_is_better)
    pairwise = wilcoxon_holm(means, methods, alpha)
    ranks = average_ranks(means, lower_is_better)
    return ComparisonReport(
        metric=metric, baseline=baseline, methods=methods, datasets=datasets,
        cohens_d=effect, letter_values=lv, friedman_statistic=stat, friedman_p=p,
        pairwise=pairwise, average_ranks=dict(zip(methods, map(float, ranks))),
        cliques=cliques(methods, ranks, pairwise),
    )
