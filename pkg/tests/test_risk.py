import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hosputil.errors import MissingVariable
from hosputil.glm import ModelFormula, Term
from hosputil.risk import (
    NOT_AVAILABLE,
    NOT_SIGNIFICANT,
    SIGNIFICANT,
    admissions_histogram,
    build_risk_table,
    case_base_expand,
    prevalence_table,
    rr_case_base,
    socio_model,
    trend_matrix,
)
from hosputil.table import CATEGORICAL, Column, SurveyTable

from helpers import five_classes, planted_table, two_by_two

EXP = ModelFormula("HIGH_UTIL", (Term("EXP", CATEGORICAL, "0"),))


def test_case_base_expand_shapes():
    X = np.arange(8.0).reshape(4, 2)
    y = np.array([1.0, 0, 1, 0])
    Xe, ye, we = case_base_expand(X, y, np.ones(4))
    assert Xe.shape == (6, 2) and ye.tolist() == [0, 0, 0, 0, 1, 1] and len(we) == 6
    assert np.array_equal(Xe[4:], X[[0, 2]])


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 500), st.integers(5, 500), st.integers(5, 500), st.integers(5, 500))
def test_case_base_equals_proportion_ratio(a, b, c, d):
    # cells: exposed events/non-events, unexposed events/non-events
    r = rr_case_base(two_by_two(a, a + b, c, c + d), EXP, bootstrap_B=0)
    assert r.get("EXP", "1")[0] == pytest.approx((a / (a + b)) / (c / (c + d)), abs=1e-6)


def test_bootstrap_interval_brackets_estimate_and_is_seeded():
    t = two_by_two(30, 100, 10, 100)
    r1 = rr_case_base(t, EXP, bootstrap_B=200, seed=4)
    r2 = rr_case_base(t, EXP, bootstrap_B=200, seed=4)
    rr, lo, hi = r1.get("EXP", "1")
    assert lo < rr < hi and rr == pytest.approx(3.0)
    assert r1.get("EXP", "1") == r2.get("EXP", "1")
    assert r1.bootstrap_used + r1.bootstrap_skipped == 200


def test_numeric_rr_affine_invariance():
    t = planted_table(0, n=800, signal={"E1": 0.7})
    f = ModelFormula("HIGH_UTIL", (Term("E1"),))
    base = rr_case_base(t, f, 0).get("E1")[0]
    x = t["E1"].values
    shifted = t.with_column("E1", Column.numeric(3.0 + 2.0 * x))
    # shift leaves the RR alone; scaling by 2 takes its square root
    assert rr_case_base(shifted, f, 0).get("E1")[0] == pytest.approx(base ** 0.5, rel=1e-6)


def test_prevalence_sums_to_100():
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 4, 300)
    m = rng.random(300) < 0.1
    t = SurveyTable(np.arange(300), {"G": Column(CATEGORICAL, np.where(m, -1, codes), m, ("a", "b", "c", "d"))})
    p = prevalence_table(t, "G")
    assert sum(p.values()) == pytest.approx(100.0)
    with pytest.raises(TypeError):
        prevalence_table(t.with_column("N", Column.numeric(np.zeros(300))), "N")


def test_risk_table_rows():
    t = two_by_two(30, 100, 10, 100)
    rt = build_risk_table(t, EXP, bootstrap_B=50)
    ref = rt.find("EXP", "0")
    exp = rt.find("EXP", "1")
    assert ref.referent and ref.rr == 1.0 and ref.ci_low is None
    assert ref.prevalence_pct + exp.prevalence_pct == pytest.approx(100.0)
    assert exp.rr == pytest.approx(3.0) and exp.starred
    assert rt.n_analysis == 200


def test_socio_model_notes_absent_variables():
    t = two_by_two(30, 100, 10, 100)
    t = t.with_column("PIR_GROUP", t["EXP"])
    rt = socio_model(t, "HIGH_UTIL", references={"PIR_GROUP": "0"}, bootstrap_B=10)
    assert [r.characteristic for r in rt.rows] == ["PIR_GROUP", "PIR_GROUP"]
    assert any("EDU_GROUP" in n for n in rt.notes)
    with pytest.raises(MissingVariable):
        socio_model(two_by_two(3, 10, 1, 10), "HIGH_UTIL")


def test_trend_matrix_cells():
    a = planted_table(0, n=1500, signal={"E1": 1.0, "E2": 1.0})
    b = planted_table(1, n=1500, signal={"E1": 1.0, "E2": 1.0}).drop(["L1"])
    tm = trend_matrix([("A", a), ("B", b)], "HIGH_UTIL", five_classes())
    assert tm.cell("E1", "A") == SIGNIFICANT and tm.cell("E2", "B") == SIGNIFICANT
    assert tm.cell("L1", "B") == NOT_AVAILABLE
    assert tm.cell("Q1", "A") in (NOT_SIGNIFICANT, SIGNIFICANT)
    assert tm.to_dict()["cycles"] == ["A", "B"]


def test_histogram_bands():
    t1 = SurveyTable.from_dict({"HUD080": [1, 4, 9, 10, 25, None]})
    t2 = SurveyTable.from_dict({"HUD080": [4, 5, 6]})
    h = admissions_histogram([("c1", t1), ("c2", t2)], "HUD080")
    assert h.counts == {"c1": [2, 2], "c2": [3, 0]}
    assert h.to_dict()["bands"] == ["4-9", "10+"]
    with pytest.raises(ValueError):
        admissions_histogram([("c1", t1)], "HUD080", [(1, 5), (5, None)])
    with pytest.raises(MissingVariable):
        admissions_histogram([("c1", SurveyTable.from_dict({"X": [1]}))], "HUD080")


def categorical(name, counts, levels=None):
    levels = levels or tuple(f"L{i}" for i in range(len(counts)))
    codes = np.repeat(np.arange(len(counts)), counts).astype(np.int64)
    return SurveyTable(np.arange(len(codes)), {name: Column(CATEGORICAL, codes, np.zeros(len(codes), bool), levels)})


def test_prevalence_arithmetic():
    p = prevalence_table(categorical("G", [325, 355, 320], ("A", "B", "C")), "G")
    assert p == pytest.approx({"A": 32.5, "B": 35.5, "C": 32.0})
    assert prevalence_table(categorical("G", [7]), "G") == {"L0": 100.0}


def test_independent_exposure_rr_one():
    rr, lo, hi = rr_case_base(two_by_two(20, 100, 20, 100), EXP, bootstrap_B=200).get("EXP", "1")
    assert rr == pytest.approx(1.0) and lo < 1.0 < hi


def layout_table(seed=0, n=900):
    rng = np.random.default_rng(seed)
    r = rng.integers(0, 3, n)
    x = rng.normal(size=n)
    y = (rng.random(n) < 0.2 + 0.1 * r).astype(float)
    z = np.zeros(n, bool)
    return SurveyTable(np.arange(n), {"RACE": Column(CATEGORICAL, r.astype(np.int64), z, ("W", "B", "O")),
                                      "KCAL": Column.numeric(x), "HIGH_UTIL": Column.numeric(y)})


def test_risk_table_layouts():
    t = layout_table()
    rt = build_risk_table(t, ModelFormula("HIGH_UTIL", (Term("RACE", CATEGORICAL, "W"),)), bootstrap_B=50)
    assert [(r.level, r.referent) for r in rt.rows] == [("W", True), ("B", False), ("O", False)]
    assert rt.rows[0].rr == 1.0 and rt.rows[0].ci_low is None and rt.rows[0].ci_high is None
    assert sum(r.prevalence_pct for r in rt.rows) == pytest.approx(100.0, abs=0.1)
    for r in rt.rows[1:]:
        assert r.ci_low <= r.rr <= r.ci_high
    num = build_risk_table(t, ModelFormula("HIGH_UTIL", (Term("KCAL"),)), bootstrap_B=20)
    assert [(r.characteristic, r.level, r.prevalence_pct) for r in num.rows] == [("KCAL", "N/A", None)]
    assert build_risk_table(t, ModelFormula("HIGH_UTIL", ())).rows == []


def test_rr_invariant_to_rescaling_other_covariates():
    t = layout_table(1)
    f = ModelFormula("HIGH_UTIL", (Term("RACE", CATEGORICAL, "W"), Term("KCAL")))
    a = rr_case_base(t, f, bootstrap_B=100, seed=3)
    t2 = t.with_column("KCAL", Column.numeric(250.0 * t["KCAL"].values - 40.0))
    b = rr_case_base(t2, f, bootstrap_B=100, seed=3)
    for lv in ("B", "O"):
        assert b.get("RACE", lv) == pytest.approx(a.get("RACE", lv), abs=1e-6)


def test_trend_planted_in_first_cycle_only():
    hits = 0
    for seed in range(20):
        a = planted_table(seed, signal={"E1": 1.0})
        b = planted_table(100 + seed)
        tm = trend_matrix([("c1", a), ("c2", b)], "HIGH_UTIL", five_classes())
        hits += tm.cell("E1", "c1") == SIGNIFICANT and tm.cell("E1", "c2") == NOT_SIGNIFICANT
    assert hits >= 19


def test_histogram_examples():
    t = SurveyTable.from_dict({"HUD080": [3, 4, 9, 10, 12, None]})
    assert admissions_histogram([("c", t)], "HUD080").counts["c"] == [2, 2]
    empty = SurveyTable(np.arange(0), {})
    assert admissions_histogram([("e", empty)], "HUD080").counts["e"] == [0, 0]
    h = admissions_histogram([("a", t), ("b", t)], "HUD080")
    assert h.counts["a"] == h.counts["b"]


def socio_table(seed, insurance_rr, n=1500):
    rng = np.random.default_rng(seed)
    ins = rng.integers(0, 2, n)
    pir = rng.integers(0, 3, n)
    y = (rng.random(n) < 0.15 * insurance_rr ** ins).astype(float)
    z = np.zeros(n, bool)
    return SurveyTable(np.arange(n), {
        "INSURANCE": Column(CATEGORICAL, ins.astype(np.int64), z, ("Yes", "No")),
        "PIR_GROUP": Column(CATEGORICAL, pir.astype(np.int64), z, ("<1.2", "1.2-2.0", ">3.3")),
        "HIGH_UTIL": Column.numeric(y),
    })


def test_socio_planted_insurance_effect():
    rt = socio_model(socio_table(0, 0.4), "HIGH_UTIL", references={"INSURANCE": "Yes", "PIR_GROUP": "<1.2"},
                     bootstrap_B=200)
    row = rt.find("INSURANCE", "No")
    assert row.ci_high < 1.0 and row.rr == pytest.approx(0.4, abs=0.15)


def test_socio_null_cis_straddle_one():
    straddle = []
    for seed in range(20):
        rt = socio_model(socio_table(seed, 1.0), "HIGH_UTIL", bootstrap_B=200, seed=seed,
                         references={"INSURANCE": "Yes", "PIR_GROUP": "<1.2"})
        straddle.append(all(r.ci_low < 1.0 < r.ci_high for r in rt.rows if not r.referent))
    assert np.mean(straddle) >= 0.9
