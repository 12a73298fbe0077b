import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellularity.metrics import (ScorePairSet, bin4, bin4_array, bootstrap_ci, cohens_kappa,
                                 evaluation_report, icc, icc21, kappa4, mse)
from oracles import icc21_anova, kappa_from_confusion

# classic 6 targets x 4 judges reliability example
SIX_BY_FOUR = [[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]]


def labels_from_confusion(cm):
    a, b = [], []
    for i, row in enumerate(cm):
        for j, count in enumerate(row):
            a += [i] * count
            b += [j] * count
    return a, b


def test_mse_examples():
    assert mse(ScorePairSet([0.0, 1.0], [1.0, 0.0])) == 1.0
    assert mse(ScorePairSet([0.3, 0.3], [0.3, 0.3])) == 0.0
    with pytest.raises(ValueError):
        mse(ScorePairSet([], []))


def test_score_pair_validation():
    with pytest.raises(ValueError):
        ScorePairSet([0.1, 0.2], [0.1])
    with pytest.raises(ValueError):
        ScorePairSet([1.2], [0.5])
    with pytest.raises(ValueError):
        ScorePairSet([0.5], [0.5], ids=("a", "b"))


@pytest.mark.parametrize("score,category", [(0.0, 1), (0.25, 1), (0.2500001, 2), (0.5, 2),
                                            (0.51, 3), (0.75, 3), (0.76, 4), (1.0, 4)])
def test_bin4_edges(score, category):
    assert bin4(score) == category
    assert bin4_array([score])[0] == category


def test_bin4_rejects_out_of_range():
    with pytest.raises(ValueError):
        bin4(1.01)
    with pytest.raises(ValueError):
        bin4_array([-0.1])


@settings(max_examples=100)
@given(st.floats(0, 1), st.floats(0, 1))
def test_bin4_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert bin4(lo) <= bin4(hi)
    assert bin4_array([a])[0] == bin4(a)


def test_kappa_hand_example():
    a, b = labels_from_confusion([[20, 5], [10, 15]])
    # p_o = 35/50 = 0.7, p_e = 0.5*0.6 + 0.5*0.4 = 0.5
    assert cohens_kappa(a, b) == pytest.approx(0.4, abs=1e-15)


def test_kappa_perfect_and_degenerate():
    assert cohens_kappa([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert cohens_kappa([2, 2, 2], [2, 2, 2]) == 1.0
    assert cohens_kappa([1, 2, 1, 2], [2, 1, 2, 1]) == -1.0
    with pytest.raises(ValueError):
        cohens_kappa([1], [1])
    with pytest.raises(ValueError):
        cohens_kappa([1, 2], [1])


@settings(max_examples=50)
@given(st.lists(st.lists(st.integers(0, 20), min_size=4, max_size=4), min_size=4, max_size=4))
def test_kappa_matches_confusion_oracle(cm):
    a, b = labels_from_confusion(cm)
    n = len(a)
    if n < 2:
        return
    pe_is_one = any(sum(cm[i]) == n and sum(r[i] for r in cm) == n for i in range(4))
    if pe_is_one:
        assert cohens_kappa(a, b) == 1.0
        return
    assert cohens_kappa(a, b) == pytest.approx(kappa_from_confusion(cm), abs=1e-12)
    assert cohens_kappa(b, a) == pytest.approx(cohens_kappa(a, b), abs=1e-15)


def test_kappa_monte_carlo_known_value():
    # copy the first rating with probability q, else draw independently:
    # with uniform marginals the expected kappa is q
    r = np.random.default_rng(2024)
    n, q = 10000, 0.6
    a = r.integers(1, 5, n)
    b = np.where(r.random(n) < q, a, r.integers(1, 5, n))
    assert abs(cohens_kappa(a.tolist(), b.tolist()) - q) < 0.03


def test_icc_textbook_value():
    assert icc21(SIX_BY_FOUR) == pytest.approx(0.2898, abs=5e-4)
    assert icc21(SIX_BY_FOUR) == pytest.approx(icc21_anova(SIX_BY_FOUR), abs=1e-10)


def test_icc_matches_anova_oracle(rng):
    for _ in range(20):
        m = rng.random((int(rng.integers(3, 30)), int(rng.integers(2, 5))))
        assert icc21(m) == pytest.approx(icc21_anova(m), abs=1e-10)


def test_icc_edge_cases():
    assert icc(ScorePairSet([0.4] * 5, [0.4] * 5)) == 1.0
    assert icc(ScorePairSet([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        icc(ScorePairSet([0.1, 0.2], [0.1, 0.2]))


def test_icc_monte_carlo_known_value():
    r = np.random.default_rng(99)
    n, var_t, var_e = 1000, 1.0, 0.5
    truth = r.normal(0, math.sqrt(var_t), n)
    ratings = truth[:, None] + r.normal(0, math.sqrt(var_e), (n, 2))
    assert abs(icc21(ratings) - var_t / (var_t + var_e)) < 0.07


def test_icc_penalizes_offset_unlike_correlation(rng):
    ref = rng.uniform(0, 0.7, 200)
    pred = ref + 0.2 + rng.normal(0, 0.02, 200)
    s = ScorePairSet(np.clip(pred, 0, 1), ref)
    pearson = np.corrcoef(s.predicted, s.reference)[0, 1]
    assert icc(s) < pearson - 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_metrics_permutation_invariant_and_rater_symmetric(seed):
    r = np.random.default_rng(seed)
    p, t = r.random(25), r.random(25)
    s = ScorePairSet(p, t)
    perm = r.permutation(25)
    shuffled = ScorePairSet(p[perm], t[perm])
    swapped = ScorePairSet(t, p)
    assert mse(shuffled) == mse(s) == mse(swapped)
    assert kappa4(shuffled) == kappa4(s)
    assert kappa4(swapped) == pytest.approx(kappa4(s), abs=1e-15)
    assert icc(shuffled) == pytest.approx(icc(s), abs=1e-12)
    assert icc(swapped) == pytest.approx(icc(s), abs=1e-12)


def test_bootstrap_deterministic_and_seed_sensitive(rng):
    s = ScorePairSet(rng.random(50), rng.random(50))
    a = bootstrap_ci(mse, s, n_boot=500, seed=1)
    assert a == bootstrap_ci(mse, s, n_boot=500, seed=1)
    assert a != bootstrap_ci(mse, s, n_boot=500, seed=2)
    assert a[0] <= mse(s) <= a[1]


def test_bootstrap_identical_pairs():
    s = ScorePairSet([0.1, 0.6, 0.9, 0.3], [0.1, 0.6, 0.9, 0.3])
    assert bootstrap_ci(mse, s, n_boot=200) == (0.0, 0.0)


def test_bootstrap_rejects_small_n_boot(rng):
    with pytest.raises(ValueError):
        bootstrap_ci(mse, ScorePairSet([0.5], [0.5]), n_boot=10)


def test_bootstrap_redraws_undefined_resamples():
    # with 3 items many resamples repeat an item; ICC stays defined on most
    s = ScorePairSet([0.1, 0.5, 0.9], [0.2, 0.4, 0.8])
    lo, hi = bootstrap_ci(icc, s, n_boot=200, seed=0)
    assert lo <= hi


def synthetic_pairs(seed, n=200):
    r = np.random.default_rng(seed)
    ref = r.uniform(0.2, 0.8, n)
    return ScorePairSet(np.clip(ref + r.normal(0, 0.1, n), 0, 1), ref)


def test_mse_interval_contains_point_estimate():
    s = synthetic_pairs(0)
    lo, hi = bootstrap_ci(mse, s)
    assert lo <= mse(s) <= hi


@pytest.mark.slow
def test_bootstrap_point_containment_rate():
    hits = 0
    for trial in range(100):
        s = synthetic_pairs(1000 + trial)
        lo, hi = bootstrap_ci(mse, s, n_boot=400, seed=trial)
        hits += lo <= mse(s) <= hi
    assert hits >= 95


@pytest.mark.slow
def test_bootstrap_covers_true_value():
    # noise variance 0.01 is the generating process's MSE (clipping is negligible)
    hits = 0
    for trial in range(100):
        lo, hi = bootstrap_ci(mse, synthetic_pairs(5000 + trial), n_boot=400, seed=trial)
        hits += lo <= 0.01 <= hi
    assert hits >= 88


def test_evaluation_report_shape(rng):
    ref = rng.random(60)
    s = ScorePairSet(np.clip(ref + rng.normal(0, 0.05, 60), 0, 1), ref)
    rep = evaluation_report(s, n_boot=200, seed=3)
    assert rep["n"] == 60
    for key in ("mse", "kappa4", "icc21"):
        lo, hi = rep[key]["ci95"]
        assert lo <= hi
        assert lo <= rep[key]["point"] <= hi or key == "kappa4"
    assert rep == evaluation_report(s, n_boot=200, seed=3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=40))
def test_identical_raters_give_exact_one(scores):
    s = ScorePairSet(scores, scores)
    assert (mse(s), kappa4(s), icc(s)) == (0.0, 1.0, 1.0)
