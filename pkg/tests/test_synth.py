import numpy as np
import pytest

from hosputil.errors import InvalidSpec
from hosputil.select import stepwise
from hosputil.synth import CovariateGen, SyntheticSpec, generate_synthetic, load_spec

from helpers import five_classes, planted_table


def spec(**kw):
    base = dict(n=500, covariates=[CovariateGen("X"), CovariateGen("G", "categorical", levels=("a", "b"),
                                                                  probs=(0.5, 0.5))],
                coefficients={"intercept": -1.0, "X": 0.5, "G:b": 1.0}, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def test_deterministic_and_shaped():
    a, b = generate_synthetic(spec()), generate_synthetic(spec())
    assert a.equals(b) and a.n_rows == 500
    assert a.names == ["X", "G", "HIGH_UTIL"]
    assert not generate_synthetic(spec(seed=4)).equals(a)


def test_count_variable_consistent_with_outcome():
    t = generate_synthetic(spec(count_variable="VISITS", count_threshold=5))
    y, c = t["HIGH_UTIL"].values, t["VISITS"].values
    assert np.all((c > 5) == (y == 1))


def test_missingness_rate():
    t = generate_synthetic(spec(n=4000, missingness={"X": 0.1, "G": 0.2}))
    assert t["X"].missing.mean() == pytest.approx(0.1, abs=0.02)
    assert t["G"].missing.mean() == pytest.approx(0.2, abs=0.02)
    assert np.all(t["G"].values[t["G"].missing] == -1)


@pytest.mark.parametrize("bad", [
    dict(n=0),
    dict(coefficients={"Z": 1.0}),
    dict(coefficients={"G:a": 1.0}),
    dict(missingness={"X": 1.5}),
    dict(covariates=[CovariateGen("G", "categorical", levels=("a",), probs=(0.7,))]),
    dict(covariates=[CovariateGen("X"), CovariateGen("X")], coefficients={}),
])
def test_invalid_specs(bad):
    with pytest.raises(InvalidSpec):
        generate_synthetic(spec(**bad))


def test_dict_roundtrip_and_file(tmp_path):
    import yaml

    s = spec(missingness={"X": 0.1})
    assert SyntheticSpec.from_dict(s.to_dict()).to_dict() == s.to_dict()
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump(s.to_dict()))
    assert generate_synthetic(load_spec(p)).equals(generate_synthetic(s))
    with pytest.raises(InvalidSpec):
        SyntheticSpec.from_dict({"n": 3, "bogus": 1})


def test_null_outcome_rate_concentrates():
    n, b0 = 100_000, -0.7
    t = generate_synthetic(spec(n=n, coefficients={"intercept": b0}))
    p = 1 / (1 + np.exp(-b0))
    assert abs(t["HIGH_UTIL"].values.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_zero_missingness_fully_observed():
    t = generate_synthetic(spec(missingness={"X": 0.0}))
    assert not any(t[c].missing.any() for c in t.names)


def test_pipeline_recovers_planted_signs():
    signal = {"E1": 1.0, "E2": -1.0, "L1": 1.0, "Q2": -1.0}
    right = total = 0
    for seed in range(20):
        m = stepwise(planted_table(seed, signal=signal), "HIGH_UTIL", five_classes()).model
        for name, beta in signal.items():
            total += 1
            if (name, "numeric") in m.column_map:
                right += np.sign(m.coef(name, "numeric")) == np.sign(beta)
    assert right / total >= 0.95
