import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hosputil.errors import ImputationWarning, NoDonors, SingleLevel
from hosputil.impute import (
    IMPUTE_PMM,
    IMPUTE_POLYTOMOUS,
    LISTWISE_DELETE,
    NONE,
    build_plan,
    impute,
    missingness_profile,
    pmm_impute,
    polytomous_impute,
)
from hosputil.table import Column, SurveyTable

from helpers import random_table


def table_with_gaps(seed=0, n=400):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    a = 2 * x + rng.normal(size=n)
    a_m = rng.random(n) < 0.04
    b = rng.normal(size=n)
    b_m = rng.random(n) < 0.2
    g = rng.integers(0, 3, n)
    g_m = rng.random(n) < 0.03
    y = (rng.random(n) < 0.3).astype(float)
    y_m = np.zeros(n, bool)
    y_m[:5] = True
    return SurveyTable(np.arange(1, n + 1), {
        "X": Column.numeric(x),
        "A": Column.numeric(np.where(a_m, np.nan, a), a_m),
        "B": Column.numeric(np.where(b_m, np.nan, b), b_m),
        "G": Column("categorical", np.where(g_m, -1, g).astype(np.int64), g_m, ("p", "q", "r")),
        "HIGH_UTIL": Column.numeric(np.where(y_m, np.nan, y), y_m),
    })


def test_plan_actions_and_order():
    t = table_with_gaps()
    plan = build_plan(missingness_profile(t), 0.05)
    assert plan.actions["X"] == NONE
    assert plan.actions["A"] == IMPUTE_PMM
    assert plan.actions["G"] == IMPUTE_POLYTOMOUS
    assert plan.actions["B"] == LISTWISE_DELETE
    assert plan.actions["HIGH_UTIL"] == NONE
    fr = missingness_profile(t).variables
    assert [fr[n].missing_fraction for n in plan.order] == sorted(fr[n].missing_fraction for n in plan.order)
    # earlier-imputed variables become predictors of later ones
    later = plan.order[-1]
    assert plan.order[0] in plan.predictors[later]


def test_impute_end_to_end():
    t = table_with_gaps()
    out, report = impute(t, 0.05, 5, seed=1)
    assert report.rows_dropped_missing_outcome == 5
    assert out.n_rows == t.n_rows - 5
    assert not out["A"].missing.any() and not out["G"].missing.any()
    assert out["B"].missing.any()  # above threshold: left for listwise deletion
    assert not out["HIGH_UTIL"].missing.any()
    actions = {v["variable"]: v["action"] for v in report.variables}
    assert actions["B"] == LISTWISE_DELETE


def test_impute_deterministic():
    t = table_with_gaps(3)
    a, _ = impute(t, seed=7)
    b, _ = impute(t, seed=7)
    assert a.equals(b)
    c, _ = impute(t, seed=8)
    assert not c.equals(a)


def test_pmm_values_come_from_donors():
    t = table_with_gaps(5)
    out, note = pmm_impute(t, "A", ["X"], 5, 0)
    donors = set(t["A"].values[~t["A"].missing])
    assert set(out["A"].values[t["A"].missing]) <= donors
    assert note["donors_per_row"] == 5


def test_pmm_no_donors():
    t = SurveyTable(np.arange(3), {"A": Column.numeric([None, None, None]), "X": Column.numeric([1.0, 2.0, 3.0])})
    with pytest.raises(NoDonors):
        pmm_impute(t, "A", ["X"])


def test_pmm_rank_deficient_falls_back():
    t = SurveyTable(np.arange(4), {"A": Column.numeric([1.0, None, 3.0, 4.0]), "X": Column.numeric([1.0] * 4)})
    with pytest.warns(ImputationWarning):
        out, note = pmm_impute(t, "A", ["X"], 2, 0)
    assert out["A"].values[1] in {1.0, 3.0, 4.0}


def test_polytomous_draws_valid_levels():
    t = table_with_gaps(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, note = polytomous_impute(t, "G", ["X"], 0)
    assert not out["G"].missing.any()
    assert out["G"].levels == ("p", "q", "r")
    assert note["n_imputed"] == int(t["G"].missing.sum())


def test_polytomous_single_level():
    t = SurveyTable(np.arange(3), {"G": Column.categorical(["a", None, "a"]), "X": Column.numeric([1.0, 2, 3])})
    with pytest.raises(SingleLevel):
        polytomous_impute(t, "G", ["X"])


def test_polytomous_follows_predictor():
    # level is a deterministic-ish function of X: imputations should follow it
    rng = np.random.default_rng(0)
    n = 2000
    x = rng.normal(size=n)
    g = (x > 0).astype(np.int64)
    m = rng.random(n) < 0.05
    t = SurveyTable(np.arange(n), {"X": Column.numeric(x),
                                   "G": Column("categorical", np.where(m, -1, g), m, ("neg", "pos"))})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, _ = polytomous_impute(t, "G", ["X"], 0)
    agree = np.mean(out["G"].values[m] == g[m])
    assert agree > 0.9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_pmm_closure_property(seed):
    rng = np.random.default_rng(seed)
    t = random_table(rng, int(rng.integers(20, 120)), 3, 1, miss=0.04)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, _ = impute(t, threshold=0.5, k=int(rng.integers(1, 8)), seed=seed, outcome=None)
    for name in ("N0", "N1", "N2"):
        donors = set(t[name].values[~t[name].missing])
        filled = out[name].values[t[name].missing]
        assert set(filled) <= donors


def test_profile_fractions():
    t = SurveyTable(np.arange(40), {"A": Column.numeric([None, None] + [1.0] * 38),
                                    "B": Column.numeric([1.0] * 40),
                                    "C": Column.numeric([None] * 40)})
    fr = {k: v.missing_fraction for k, v in missingness_profile(t).variables.items()}
    assert fr == {"A": 0.05, "B": 0.0, "C": 1.0}


def test_plan_threshold_example():
    n = 100
    a_m = np.arange(n) < 2
    b_m = np.arange(n) < 7
    y_m = np.arange(n) < 3
    t = SurveyTable(np.arange(n), {
        "A": Column.numeric(np.where(a_m, np.nan, 1.0), a_m),
        "B": Column("categorical", np.where(b_m, -1, np.arange(n) % 2), b_m, ("u", "v")),
        "C": Column.numeric(np.ones(n)),
        "HIGH_UTIL": Column.numeric(np.where(y_m, np.nan, 0.0), y_m),
    })
    prof = missingness_profile(t)
    assert build_plan(prof, 0.05).actions == {"A": IMPUTE_PMM, "B": LISTWISE_DELETE, "C": NONE, "HIGH_UTIL": NONE}
    assert build_plan(prof, 0.10).actions["B"] == IMPUTE_POLYTOMOUS
    out, report = impute(t, 0.05)
    assert out.n_rows == n - 3 and report.rows_dropped_missing_outcome == 3


def test_pmm_single_donor_and_constant():
    t = SurveyTable(np.arange(2), {"A": Column.numeric([7.0, None]), "X": Column.numeric([1.0, 2.0])})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert pmm_impute(t, "A", [], 5, 0)[0]["A"].values[1] == 7.0
    t = SurveyTable(np.arange(6), {"A": Column.numeric([3.3, None, 3.3, 3.3, None, 3.3]),
                                   "X": Column.numeric([1.0, 2, 3, 4, 5, 6])})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, _ = pmm_impute(t, "A", ["X"], 2, 0)
    assert out["A"].values.tolist() == [3.3] * 6


def test_pmm_nearest_predictions():
    # donor predictions are exactly 10x = 10, 20, 90; the missing row predicts 14
    t = SurveyTable(np.arange(4), {"A": Column.numeric([10.0, 20.0, 90.0, None]),
                                   "X": Column.numeric([1.0, 2.0, 9.0, 1.4])})
    draws = {pmm_impute(t, "A", ["X"], 2, s)[0]["A"].values[3] for s in range(40)}
    assert draws == {10.0, 20.0}


def test_polytomous_without_predictors_uses_marginal():
    n = 4000
    rng = np.random.default_rng(1)
    g = rng.choice(3, n, p=[0.6, 0.3, 0.1])
    m = rng.random(n) < 0.5
    t = SurveyTable(np.arange(n), {"G": Column("categorical", np.where(m, -1, g), m, ("a", "b", "c"))})
    out, _ = polytomous_impute(t, "G", [], 0)
    share = np.bincount(out["G"].values[m], minlength=3) / m.sum()
    assert share == pytest.approx([0.6, 0.3, 0.1], abs=0.03)


def test_polytomous_well_separated_predictor():
    rng = np.random.default_rng(2)
    n = 1000
    x = np.r_[rng.uniform(-6, -2, n // 2), rng.uniform(2, 6, n // 2)]
    g = (x > 0).astype(np.int64)
    m = rng.random(n) < 0.05
    t = SurveyTable(np.arange(n), {"X": Column.numeric(x),
                                   "G": Column("categorical", np.where(m, -1, g), m, ("A", "B"))})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, _ = polytomous_impute(t, "G", ["X"], 0)
    assert np.array_equal(out["G"].values[m], g[m])
