import csv
import json
import subprocess
import sys
from pathlib import Path

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def run(*args):
    return subprocess.run([sys.executable, *args], capture_output=True, text=True, timeout=300)


def test_reproduce_nhanes_on_synthetic_extract(tmp_path):
    out = tmp_path / "out"
    r = run(str(SCRIPTS / "reproduce_nhanes.py"), "--synthetic", "--data-dir", str(tmp_path / "xpt"),
            "--out-dir", str(out), "--bootstrap", "20")
    assert r.returncode == 0, r.stderr
    for name in ("risk_table.csv", "risk_table.json", "socio_table.csv", "comparison.csv", "selection.json"):
        assert (out / name).exists()
    rows = list(csv.DictReader(open(out / "comparison.csv")))
    assert {"risk", "socio"} == {r["table"] for r in rows}
    age = [r for r in rows if r["characteristic"] == "AGE_GROUP" and r["level"] == "0-17"]
    assert age and age[0]["rr"] == "1.00"


def test_reproduce_nhanes_needs_demographics(tmp_path):
    r = run(str(SCRIPTS / "reproduce_nhanes.py"), "--data-dir", str(tmp_path))
    assert r.returncode != 0 and "DEMO_I" in r.stderr


def test_coverage_sim_summary():
    r = run(str(SCRIPTS / "coverage_sim.py"), "--sims", "4", "--n", "500", "--bootstrap", "50", "--json")
    assert r.returncode == 0, r.stderr
    s = json.loads(r.stdout)
    assert s["sims"] == 4 and 0 <= s["covered"] <= 4 and s["below"] + s["above"] + s["covered"] == 4
