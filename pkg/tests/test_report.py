import csv
import io
import json
import re

import pytest

from hosputil.errors import IoFailure
from hosputil.report import emit_report, format_rr, histogram_svg, input_checksums, report_metadata
from hosputil.risk import AdmissionsHistogram, RiskRow, RiskTable, TrendMatrix


def risk_table():
    return RiskTable([RiskRow("AGE_GROUP", "18-60", 60.0, 1.0, None, None, False, True),
                      RiskRow("AGE_GROUP", "60+", 40.0, 1.5612, 1.2801, 1.9033, True)], 100)


def test_format_rr():
    assert format_rr(1.5612, 1.2801, 1.9033) == "1.56(1.28-1.90)"
    assert format_rr(2.0, None, None) == "2.00"
    assert format_rr(2.0, float("nan"), 3.0) == "2.00"


def test_risk_table_csv(tmp_path):
    paths = emit_report(risk_table(), tmp_path / "rt", {"seed": 1})
    assert sorted(p.suffix for p in paths) == [".csv", ".json"]
    text = (tmp_path / "rt.csv").read_text()
    body = [l for l in text.splitlines() if not l.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    assert len(rows) == 2
    assert rows[0]["display"] == "1(referent)"
    assert rows[1]["display"] == "1.56(1.28-1.90)*"
    assert "# seed: 1" in text and "# kind: risk_table" in text
    doc = json.loads((tmp_path / "rt.json").read_text())
    assert doc["rows"][1]["rr"] == 1.5612 and doc["metadata"]["seed"] == 1


def test_histogram_svg_bars_proportional():
    h = AdmissionsHistogram(["2013", "2015"], [(4, 9), (10, None)], {"2013": [10, 5], "2015": [20, 0]})
    svg = histogram_svg(h)
    bars = re.findall(r'<rect class="bar"[^>]*data-count="(\d+)"[^>]*height="([\d.]+)"', svg)
    assert len(bars) == 4
    scale = {float(hgt) / int(c) for c, hgt in bars if int(c)}
    assert max(scale) - min(scale) < 0.01
    assert [float(hgt) for c, hgt in bars if c == "0"] == [0.0]


def test_emit_byte_identical(tmp_path):
    h = AdmissionsHistogram(["a"], [(4, 9)], {"a": [3]})
    tm = TrendMatrix(["X"], ["a"], {("X", "a"): "significant"})
    for name, obj in (("h", h), ("t", tm), ("r", risk_table())):
        first = [p.read_bytes() for p in emit_report(obj, tmp_path / "1" / name, {"seed": 0})]
        second = [p.read_bytes() for p in emit_report(obj, tmp_path / "2" / name, {"seed": 0})]
        assert first == second
    assert (tmp_path / "1" / "h.svg").exists()


def test_metadata_checksums(tmp_path):
    p = tmp_path / "in.bin"
    p.write_bytes(b"abc")
    meta = report_metadata([p], seed=7)
    assert meta["inputs"]["in.bin"].startswith("ba7816bf")
    assert meta["seed"] == 7 and meta["software"] == "hosputil"
    with pytest.raises(IoFailure):
        input_checksums([tmp_path / "nope"])


def test_emit_rejects_unknown_type(tmp_path):
    with pytest.raises(TypeError):
        emit_report({"x": 1}, tmp_path / "x")
