import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from qrt.stats import (
    average_ranks,
    cliques,
    cohens_d,
    compare,
    discreteness,
    friedman,
    holm,
    letter_values,
    rank_rows,
    wilcoxon_holm,
    wilcoxon_signed_rank,
)


def enumerate_signed_rank_p(d):
    """Two-sided p by walking all 2^n sign assignments of the mid-ranks."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    ranks2 = np.rint(2 * sps.rankdata(np.abs(d))).astype(int)
    observed = int(ranks2[d > 0].sum())
    le = ge = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        t = int(np.dot(signs, ranks2))
        le += t <= observed
        ge += t >= observed
    total = 2.0**d.size
    return min(1.0, 2.0 * min(le / total, ge / total))


def test_cohens_d_examples():
    assert cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    assert cohens_d([1, 2, 3], [2, 3, 4]) == pytest.approx(-1.0, abs=1e-15)
    jitter = np.array([0, 1e-9, -1e-9, 2e-9])
    assert cohens_d(jitter, 1 + jitter) < -1e6
    assert cohens_d([1, 1], [1, 1]) == 0.0
    assert cohens_d([0, 0], [1, 1]) == -np.inf
    with pytest.raises(ValueError):
        cohens_d([1], [1, 2])


def test_cohens_d_antisymmetry_and_affine_invariance():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.normal(rng.normal(), rng.uniform(0.1, 3), size=rng.integers(2, 12))
        b = rng.normal(rng.normal(), rng.uniform(0.1, 3), size=rng.integers(2, 12))
        d = cohens_d(a, b)
        assert cohens_d(b, a) == pytest.approx(-d, abs=1e-12)
        scale, shift = rng.uniform(0.01, 100), rng.normal(scale=50)
        assert cohens_d(scale * a + shift, scale * b + shift) == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_friedman_identical_and_closed_form():
    assert friedman(np.ones((5, 3))) == (0.0, 1.0)
    # ranks 1, 2, 3 on all 10 datasets: R = (10, 20, 30)
    n, k = 10, 3
    scores = np.tile([0.1, 0.2, 0.3], (n, 1)) + np.random.default_rng(1).uniform(0, 0.01, (n, 1))
    r = np.array([10, 20, 30])
    expect = 12 / (n * k * (k + 1)) * np.sum(r**2) - 3 * n * (k + 1)
    stat, p = friedman(scores)
    assert expect == 20.0
    assert stat == pytest.approx(expect, abs=1e-12)
    assert p == pytest.approx(np.exp(-10.0), rel=1e-12)  # chi2 with 2 dof
    ref = sps.friedmanchisquare(*scores.T)
    assert stat == pytest.approx(ref.statistic, abs=1e-12)


def test_friedman_row_permutation_and_ties():
    rng = np.random.default_rng(2)
    scores = rng.integers(0, 3, size=(12, 4)).astype(float)
    stat, p = friedman(scores)
    assert friedman(scores[rng.permutation(12)])[0] == pytest.approx(stat, abs=1e-12)
    ref = sps.friedmanchisquare(*scores.T)
    assert stat == pytest.approx(ref.statistic, abs=1e-10)
    assert p == pytest.approx(ref.pvalue, abs=1e-10)
    with pytest.raises(ValueError):
        friedman(np.ones((1, 3)))


def test_wilcoxon_examples():
    assert wilcoxon_signed_rank(np.arange(1, 7) * 0.1)[1] == pytest.approx(2 / 64, abs=1e-15)
    d = np.array([0.3, -1.2, 0.7, 2.0, -0.1, 0.9, 1.4])
    assert wilcoxon_signed_rank(d)[1] == wilcoxon_signed_rank(-d)[1]
    assert wilcoxon_signed_rank(np.zeros(8)) == (0.0, 1.0)
    x, y = np.arange(10.0), np.arange(10.0) + 0.5
    assert wilcoxon_signed_rank(x, y)[1] == wilcoxon_signed_rank(x - y)[1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=12))
def test_wilcoxon_exact_matches_enumeration(values):
    d = np.asarray(values, dtype=np.float64) * 0.25
    _, p = wilcoxon_signed_rank(d)
    if np.all(d == 0):
        assert p == 1.0
    else:
        assert p == enumerate_signed_rank_p(d)


def test_wilcoxon_large_sample_approximation():
    rng = np.random.default_rng(3)
    d = rng.normal(0.3, 1, size=60)
    _, p = wilcoxon_signed_rank(d)
    ref = sps.wilcoxon(d, method="approx", correction=False)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_holm_fixtures():
    # step-down trace: 0.01 <= 0.05/3, 0.02 <= 0.05/2, 0.04 <= 0.05/1
    reject, adj = holm([0.01, 0.02, 0.04])
    assert reject.tolist() == [True, True, True]
    np.testing.assert_allclose(adj, [0.03, 0.04, 0.04])
    # 0.005 <= 0.0125, 0.01 <= 0.05/3, 0.03 > 0.025 stops; 0.04 is then kept
    reject, adj = holm([0.01, 0.04, 0.03, 0.005])
    assert reject.tolist() == [True, False, False, True]
    np.testing.assert_allclose(adj, [0.03, 0.06, 0.06, 0.02])
    reject, adj = holm([0.5, 0.9])
    assert not reject.any()
    np.testing.assert_allclose(adj, [1.0, 1.0])  # running max carries 2 x 0.5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=15))
def test_holm_monotone(p):
    p = np.asarray(p)
    reject, adj = holm(p)
    if reject.any():
        assert np.all(reject[p < p[reject].max()])
        assert p[reject].max() <= p[~reject].min() if (~reject).any() else True
    assert np.all(adj >= p - 1e-15) and np.all(adj <= 1)
    assert np.all((adj <= 0.05) == reject)


def test_ranks():
    scores = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.9], [0.1, 0.3, 0.2]])
    r = rank_rows(scores)
    np.testing.assert_allclose(r[1], [1.5, 1.5, 3.0])
    np.testing.assert_allclose(r.sum(axis=1), 6.0)
    np.testing.assert_allclose(average_ranks(scores), [3.5 / 3, 6.5 / 3, 8 / 3])
    np.testing.assert_allclose(average_ranks(scores, lower_is_better=False), 4 - average_ranks(scores))


def test_discreteness_examples():
    assert discreteness([1, 2, 3, 1, 2]) == 1.0
    assert discreteness(np.arange(1000.0)) == pytest.approx(0.01)
    assert discreteness([1, 1, 1] + list(range(2, 13))) == pytest.approx(12 / 14)
    with pytest.raises(ValueError):
        discreteness([])


def test_letter_values():
    lv = letter_values(np.arange(9.0))
    assert lv["q0.500"] == 4.0 and lv["q0.125"] == 1.0 and lv["q0.875"] == 7.0
    assert np.isnan(letter_values([np.nan])["q0.500"])


def test_cliques_and_pairwise():
    rng = np.random.default_rng(4)
    n = 12
    base = rng.uniform(1, 2, size=n)
    scores = np.column_stack([base - 0.5, base, base + 1e-3 * rng.normal(size=n)])
    methods = ["A", "B", "C"]
    pw = wilcoxon_holm(scores, methods)
    sig = {(r.method_a, r.method_b): r.significant for r in pw}
    assert sig[("A", "B")] and sig[("A", "C")] and not sig[("B", "C")]
    groups = cliques(methods, average_ranks(scores), pw)
    assert len(groups) == 1 and set(groups[0]) == {"B", "C"}


def test_compare_dominance_and_missing_cells():
    rng = np.random.default_rng(5)
    results = {}
    for i in range(8):
        base = rng.uniform(1, 2)
        results[f"d{i}"] = {
            "BASE": list(base + rng.normal(0, 0.01, 5)),
            "GOOD": list(base - 1 + rng.normal(0, 0.01, 5)),
            "SAME": list(base + rng.normal(0, 0.01, 5) + 0.2),
        }
    report = compare(results, "nll", "BASE")
    assert report.average_ranks["GOOD"] == 1.0
    assert all(v < -10 for v in report.cohens_d["GOOD"].values())
    good_pairs = [p for p in report.pairwise if "GOOD" in (p.method_a, p.method_b)]
    assert all(p.significant for p in good_pairs)
    same = {d: {"A": [1.0, 2.0], "B": [1.0, 2.0]} for d in ("x", "y")}
    rep = compare(same, "nll", "A")
    assert rep.cohens_d["B"] == {"x": 0.0, "y": 0.0}
    assert not any(p.significant for p in rep.pairwise)
    del results["d3"]["SAME"]
    with pytest.raises(KeyError, match="d3.*SAME"):
        compare(results, "nll", "BASE")
