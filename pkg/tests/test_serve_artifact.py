import json
import math
import os

import numpy as np
import pytest

from hosputil.errors import ChecksumMismatch, UnsupportedVersion
from hosputil.glm import INTERCEPT, ModelFormula, Term, fit_formula
from hosputil.serve.artifact import (
    FeatureError,
    Scorer,
    artifact_from_model,
    load_artifact,
    read_artifact,
    serialize_artifact,
    utc_now,
    write_artifact_atomic,
)
from hosputil.table import CATEGORICAL, Column

from helpers import two_by_two

STAMP = "2026-01-01T00:00:00Z"


def exposure_artifact():
    t = two_by_two(30, 100, 10, 100).with_column("AGE", Column.numeric(np.random.default_rng(0).uniform(20, 70, 200)))
    m = fit_formula(t, ModelFormula("HIGH_UTIL", (Term("EXP", CATEGORICAL, "0"), Term("AGE"))))
    return artifact_from_model(m, {"test": {"auc": 0.7}}, "ab" * 32, STAMP)


def test_roundtrip_and_schema():
    a = exposure_artifact()
    b = load_artifact(serialize_artifact(a))
    assert b == a and b.checksum == a.checksum
    assert a.feature_schema == ({"name": "EXP", "kind": "categorical", "reference": "0", "levels": ["0", "1"]},
                                {"name": "AGE", "kind": "numeric"})
    assert a.column_map[0] == (INTERCEPT, "intercept")
    assert a.metric("test", "auc") == 0.7 and a.metric("validation", "auc") is None


def test_serialization_is_canonical():
    data = serialize_artifact(exposure_artifact())
    assert data == serialize_artifact(exposure_artifact())
    assert data.endswith(b"\n") and list(json.loads(data)) == sorted(json.loads(data))


def test_any_byte_flip_detected():
    data = bytearray(serialize_artifact(exposure_artifact()))
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(data), 60, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumMismatch):
            load_artifact(bytes(bad))


def test_coefficient_edit_detected():
    doc = json.loads(serialize_artifact(exposure_artifact()))
    doc["coefficients"][1] += 0.5
    data = (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode()
    with pytest.raises(ChecksumMismatch):
        load_artifact(data)


def test_unsupported_version():
    from dataclasses import replace

    a = replace(exposure_artifact(), format_version=99, content_checksum="").sealed()
    with pytest.raises(UnsupportedVersion):
        load_artifact(serialize_artifact(a))


def test_atomic_write(tmp_path, monkeypatch):
    p = tmp_path / "m.json"
    a = exposure_artifact()
    write_artifact_atomic(p, a)
    assert read_artifact(p) == a

    def boom(*args):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        write_artifact_atomic(p, a)
    assert read_artifact(p) == a
    assert [x.name for x in tmp_path.iterdir()] == ["m.json"]


def test_source_date_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert utc_now() == "1970-01-01T00:00:00Z"


def test_scorer_matches_model():
    a = exposure_artifact()
    s = Scorer(a)
    b = np.asarray(a.coefficients)
    assert s.predict({"EXP": "1", "AGE": 40}) == pytest.approx(1 / (1 + math.exp(-(b[0] + b[1] + 40 * b[2]))))
    assert s.predict({"EXP": 0, "AGE": 40.0}) == pytest.approx(1 / (1 + math.exp(-(b[0] + 40 * b[2]))))


@pytest.mark.parametrize("features, status, field", [
    ({"EXP": "1"}, 400, "AGE"),
    ({"EXP": "1", "AGE": 3, "X": 1}, 400, "X"),
    ({"EXP": "2", "AGE": 3}, 400, "EXP"),
    ({"EXP": "1", "AGE": "old"}, 400, "AGE"),
    ({"EXP": "1", "AGE": True}, 400, "AGE"),
    ({"EXP": "1", "AGE": float("inf")}, 422, "AGE"),
    ({"EXP": "1", "AGE": None}, 400, "AGE"),
])
def test_scorer_rejects(features, status, field):
    with pytest.raises(FeatureError) as exc:
        Scorer(exposure_artifact()).predict(features)
    assert exc.value.status == status and exc.value.field == field
