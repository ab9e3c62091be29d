"""Run the 2015-2016 NHANES risk analysis and compare it with the published estimates.

Download the public XPT files listed in FILES into one directory, then:

    python3 scripts/reproduce_nhanes.py --data-dir ~/nhanes/2015 --out-dir reports/nhanes

``--synthetic`` first writes a fake extract with the same file and variable
names into ``--data-dir``; use it to check the script end to end offline.
Numeric agreement is reported in ``comparison.csv``, never asserted.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from hosputil.impute import impute
from hosputil.report import emit_report, format_rr, report_metadata, write_json
from hosputil.risk import build_risk_table, socio_model
from hosputil.select import CovariateClass, stepwise
from hosputil.table import (
    NUMERIC,
    Column,
    OutcomeSpec,
    RecodeSpec,
    SurveyTable,
    age_recode,
    apply_recodes,
    derive_outcome,
    merge_by_id,
    pir_recode,
)
from hosputil.xport import parse_xport, to_table, write_xport

log = logging.getLogger("reproduce_nhanes")

CYCLE = "2015-2016"

# file -> variables kept; DEMO_I is the merge base
FILES = {
    "DEMO_I.XPT": ["RIDAGEYR", "RIAGENDR", "RIDRETH3", "DMDCITZN", "INDFMPIR", "DMDEDUC2", "INDHHIN2"],
    "DR1TOT_I.XPT": ["DR1TKCAL", "DR1TSUGR", "DR1TSFAT", "DR1TCARB"],
    "BMX_I.XPT": ["BMXWT", "BMXBMI"],
    "ALB_CR_I.XPT": ["URXUMA"],
    "INS_I.XPT": ["LBXIN"],
    "HUQ_I.XPT": ["HUQ051", "HUD080"],
    "HIQ_I.XPT": ["HIQ011"],
    "DLQ_I.XPT": ["DLQ100"],
    "MCQ_I.XPT": ["MCQ160E", "MCQ050"],
    "RXQ_RX_I.XPT": ["RXDUSE"],
}

# HUQ051 answer code -> fewest visits the code allows; "> 5 visits" then means code >= 4
VISIT_CODE_FLOOR = {0: 0, 1: 1, 2: 2, 3: 4, 4: 6, 5: 8, 6: 10, 7: 13, 8: 16}

OTHER = "Other"
RECODES = [
    age_recode(),
    RecodeSpec("RACE", {3: "White", 4: "Non-Hispanic Black"}, default=OTHER, source="RIDRETH3"),
    RecodeSpec("CITIZEN", {1: "US", 2: "Non-US", 7: OTHER, 9: OTHER}, source="DMDCITZN"),
    RecodeSpec("INSURANCE", {1: "Yes", 2: "No"}, default=OTHER, missing_target=OTHER, source="HIQ011"),
    RecodeSpec("RX_USE", {1: "Yes", 2: "No"}, default=OTHER, missing_target=OTHER, source="RXDUSE"),
    RecodeSpec("ANXIETY", {1: "At least once a month", 2: "At least once a month", 3: "At least once a month",
                           4: "A few times a year", 5: "Never"}, default=OTHER, missing_target=OTHER,
               source="DLQ100"),
    RecodeSpec("HEART_ATTACK", {1: "Yes", 2: "No"}, default=OTHER, missing_target=OTHER, source="MCQ160E"),
    RecodeSpec("ER_ASTHMA", {1: "Yes", 2: "No"}, default=OTHER, missing_target=OTHER, source="MCQ050"),
    RecodeSpec("EDU_GROUP", {1: "Up to High School", 2: "Up to High School", 3: "Up to High School",
                             4: "College", 5: "Graduate or More"}, source="DMDEDUC2"),
    pir_recode(),
]
REFERENCES = {"AGE_GROUP": "0-17", "RACE": "White", "CITIZEN": "Non-US", "INSURANCE": "Yes", "RX_USE": "Yes",
              "ANXIETY": "At least once a month", "HEART_ATTACK": "Yes", "ER_ASTHMA": "Yes",
              "EDU_GROUP": "Up to High School", "PIR_GROUP": "<1.2"}
CLASSES = [
    CovariateClass("demographics", ("AGE_GROUP", "RACE", "CITIZEN", "INDHHIN2")),
    CovariateClass("dietary", ("DR1TKCAL", "DR1TSUGR", "DR1TSFAT", "DR1TCARB")),
    CovariateClass("examination", ("BMXWT", "BMXBMI")),
    CovariateClass("laboratory", ("URXUMA", "LBXIN")),
    CovariateClass("questionnaire", ("INSURANCE", "RX_USE", "ANXIETY", "HEART_ATTACK", "ER_ASTHMA")),
]
SOCIO = ["EDU_GROUP", "PIR_GROUP", "INSURANCE"]

# published 2015-2016 estimates: (characteristic, level) -> (prevalence %, "RR(lo-hi)")
PUBLISHED = {
    ("AGE_GROUP", "0-17"): (32.55, "1.00"),
    ("AGE_GROUP", "18-60"): (35.54, "1.26(1.04-1.53)"),
    ("AGE_GROUP", "60+"): (31.91, "1.56(1.28-1.90)"),
    ("RACE", "White"): (38.09, "1.00"),
    ("RACE", "Non-Hispanic Black"): (18.09, "0.66(0.57-0.77)"),
    ("RACE", "Other"): (42.96, "0.79(0.70-0.90)"),
    ("CITIZEN", "US"): (93.12, "1.39(1.12-1.75)"),
    ("CITIZEN", "Non-US"): (6.88, "1.00"),
    ("DR1TKCAL", "N/A"): (None, "0.99(0.99-1.02)"),
    ("DR1TSUGR", "N/A"): (None, "1.00(0.99-1.02)"),
    ("DR1TSFAT", "N/A"): (None, "1.00(0.99-1.02)"),
    ("BMXWT", "N/A"): (None, "0.97(0.97-0.98)"),
    ("BMXBMI", "N/A"): (None, "1.07(1.05-1.09)"),
    ("RX_USE", "Yes"): (69.37, "1.00"),
    ("RX_USE", "No"): (30.47, "0.25(0.22-0.29)"),
    ("RX_USE", "Other"): (0.16, "1.24(0.24-5.24)"),
    ("ANXIETY", "At least once a month"): (48.99, "1.00"),
    ("ANXIETY", "A few times a year"): (31.00, "0.78(0.69-0.89)"),
    ("ANXIETY", "Never"): (19.58, "0.77(0.67-0.89)"),
    ("ANXIETY", "Other"): (0.43, "1.30(0.49-3.24)"),
    ("INSURANCE", "Yes"): (93.97, "1.00"),
    ("INSURANCE", "No"): (5.87, "0.52(0.42-0.65)"),
    ("INSURANCE", "Other"): (0.16, "0.97(0.21-3.16)"),
}
PUBLISHED_SOCIO = {
    ("EDU_GROUP", "Up to High School"): (52.82, "1.00"),
    ("EDU_GROUP", "College"): (25.21, "1.05(0.84-1.32)"),
    ("EDU_GROUP", "Graduate or More"): (21.86, "1.36(1.11-1.66)"),
    ("PIR_GROUP", "<1.2"): (36.51, "1.00"),
    ("PIR_GROUP", "1.2-2.0"): (23.85, "0.89(0.71-1.10)"),
    ("PIR_GROUP", "2.1-3.3"): (18.10, "0.75(0.58-0.98)"),
    ("PIR_GROUP", ">3.3"): (21.55, "1.18(0.87-1.64)"),
    ("INSURANCE", "Yes"): (92.78, "1.00"),
    ("INSURANCE", "No"): (7.11, "0.47(0.21-0.96)"),
}


def read_first_per_id(path: Path, keep: list[str]) -> SurveyTable:
    """Read an XPT member, keeping the first record per SEQN (prescription files repeat ids)."""
    member = parse_xport(path.read_bytes())[0]
    seqn = next(v for v in member.variables if v.name.upper() == "SEQN")
    seen, obs = set(), []
    for rec in member.observations:
        key = rec[seqn.position:seqn.position + seqn.storage_length]
        if key not in seen:
            seen.add(key)
            obs.append(rec)
    t = to_table(replace(member, observations=obs), CYCLE)
    missing = [v for v in keep if v not in t]
    if missing:
        log.warning("%s lacks %s", path.name, ", ".join(missing))
    return t.select([v for v in keep if v in t])


def load_extract(data_dir: Path) -> SurveyTable:
    tables = []
    for name, keep in FILES.items():
        path = data_dir / name
        if not path.exists():
            alt = data_dir / name.lower()
            if not alt.exists():
                if name == "DEMO_I.XPT":
                    raise FileNotFoundError(path)
                log.warning("missing %s; its variables are dropped", name)
                continue
            path = alt
        tables.append(read_first_per_id(path, keep))
    return merge_by_id(tables, 0)


def visit_counts(table: SurveyTable) -> SurveyTable:
    col = table["HUQ051"]
    floor = np.array([VISIT_CODE_FLOOR.get(int(v), np.nan) if not m else np.nan
                      for v, m in zip(col.values, col.missing)])
    miss = np.isnan(floor)
    return table.with_column("VISITS", Column(NUMERIC, np.where(miss, 0.0, floor), miss))


def comparison_rows(rt, published) -> list[list]:
    rows = []
    for (char, level), (prev, text) in published.items():
        try:
            r = rt.find(char, level)
        except KeyError:
            rows.append([char, level, prev, text, "", "absent", ""])
            continue
        ours = "1.00" if r.referent else format_rr(r.rr, r.ci_low, r.ci_high)
        pub_rr = float(text.split("(")[0])
        rows.append([char, level, prev, text, "" if r.prevalence_pct is None else f"{r.prevalence_pct:.2f}", ours,
                     f"{r.rr - pub_rr:+.2f}"])
    return rows


def write_synthetic_extract(data_dir: Path, n: int = 3000, seed: int = 2015) -> None:
    """A fake extract with realistic codes, for running the script without the real files."""
    rng = np.random.default_rng(seed)
    ids = np.arange(83732, 83732 + n, dtype=np.int64)

    def num(v, miss=0.0):
        m = rng.random(n) < miss
        return Column(NUMERIC, np.where(m, np.nan, v).astype(float), m)

    def code(values, p, miss=0.0):
        return num(rng.choice(values, n, p=p).astype(float), miss)

    age = rng.integers(0, 81, n).astype(float)
    bmi = rng.normal(27, 6, n).clip(13, 70)
    rx = rng.choice([1.0, 2.0], n, p=[0.7, 0.3])
    eta = -0.9 + 0.012 * (age - 40) + 0.05 * (bmi - 27) - 1.2 * (rx == 2)
    many = rng.random(n) < 1 / (1 + np.exp(-eta))
    visits = np.where(many, rng.integers(4, 9, n), rng.integers(0, 4, n)).astype(float)
    files = {
        "DEMO_I.XPT": {"RIDAGEYR": num(age), "RIAGENDR": code([1, 2], [0.5, 0.5]),
                       "RIDRETH3": code([1, 2, 3, 4, 6, 7], [0.17, 0.11, 0.36, 0.2, 0.11, 0.05]),
                       "DMDCITZN": code([1, 2, 7], [0.92, 0.07, 0.01]), "INDFMPIR": num(rng.uniform(0, 5, n), 0.03),
                       "DMDEDUC2": code([1, 2, 3, 4, 5], [0.1, 0.12, 0.3, 0.26, 0.22], 0.02),
                       "INDHHIN2": code(list(range(1, 11)), [0.1] * 10, 0.03)},
        "DR1TOT_I.XPT": {"DR1TKCAL": num(rng.normal(2000, 600, n).clip(300), 0.04),
                         "DR1TSUGR": num(rng.normal(100, 40, n).clip(0), 0.04),
                         "DR1TSFAT": num(rng.normal(28, 10, n).clip(0), 0.04),
                         "DR1TCARB": num(rng.normal(240, 80, n).clip(0), 0.04)},
        "BMX_I.XPT": {"BMXWT": num(bmi * 2.9 + rng.normal(0, 5, n), 0.02), "BMXBMI": num(bmi, 0.02)},
        "HUQ_I.XPT": {"HUQ051": num(visits), "HUD080": num(rng.integers(1, 12, n).astype(float), 0.9)},
        "HIQ_I.XPT": {"HIQ011": code([1, 2, 9], [0.93, 0.06, 0.01])},
        "DLQ_I.XPT": {"DLQ100": code([1, 2, 3, 4, 5, 9], [0.15, 0.15, 0.19, 0.31, 0.196, 0.004], 0.02)},
        "MCQ_I.XPT": {"MCQ160E": code([1, 2, 9], [0.04, 0.95, 0.01], 0.03),
                      "MCQ050": code([1, 2], [0.05, 0.95], 0.03)},
        "RXQ_RX_I.XPT": {"RXDUSE": num(rx)},
    }
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, cols in files.items():
        member = name.split(".")[0][:8]
        (data_dir / name).write_bytes(write_xport(SurveyTable(ids, cols, CYCLE), member))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", type=Path, required=True)
    ap.add_argument("--out-dir", type=Path, default=Path("reports/nhanes"))
    ap.add_argument("--bootstrap", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--synthetic", action="store_true", help="write a fake extract into --data-dir first")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    if args.synthetic:
        write_synthetic_extract(args.data_dir)

    table = visit_counts(load_extract(args.data_dir))
    table = derive_outcome(table, OutcomeSpec("VISITS", 5))
    table = apply_recodes(table, [r for r in RECODES if (r.source or r.variable) in table])
    table, imp = impute(table, 0.05, 5, args.seed, exclude=["HUQ051", "VISITS", "HUD080"])
    log.info("analysis table: %d rows, outcome rate %.3f", table.n_rows, np.mean(table["HIGH_UTIL"].values))

    sel = stepwise(table, "HIGH_UTIL", CLASSES, 0.05, REFERENCES)
    log.info("selected terms: %s", ", ".join(sel.terms) or "(none)")
    rt = build_risk_table(table, sel.model.formula, bootstrap_B=args.bootstrap, seed=args.seed)
    soc = socio_model(table, "HIGH_UTIL", SOCIO, REFERENCES, args.bootstrap, args.seed)

    inputs = sorted(p for p in args.data_dir.iterdir() if p.suffix.lower() == ".xpt")
    meta = report_metadata(inputs, args.seed, cycle=CYCLE, synthetic=args.synthetic)
    out = args.out_dir
    emit_report(rt, out / "risk_table", meta)
    emit_report(soc, out / "socio_table", meta)
    write_json(out / "selection.json", {"metadata": meta, **sel.trace.to_dict(), "terms": sel.terms})
    write_json(out / "imputation.json", {"metadata": meta, **imp.to_dict()})

    header = ["characteristic", "level", "published_prevalence", "published_rr", "prevalence", "rr", "rr_delta"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table"] + header)
        for name, res, pub in (("risk", rt, PUBLISHED), ("socio", soc, PUBLISHED_SOCIO)):
            for row in comparison_rows(res, pub):
                w.writerow([name] + ["" if v is None else v for v in row])
    matched = sum(1 for k in PUBLISHED if any((r.characteristic, r.level) == k for r in rt.rows))
    print(f"{matched}/{len(PUBLISHED)} published risk-table rows have a counterpart; "
          f"reports in {out} ({time.perf_counter() - t0:.1f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
