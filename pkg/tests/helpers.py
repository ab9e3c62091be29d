"""Shared builders for the test suite."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from hosputil.select import CovariateClass
from hosputil.serve.pipeline import ManifestEntry, PipelineConfig, sha256_file
from hosputil.synth import CovariateGen, SyntheticSpec, generate_synthetic
from hosputil.table import CATEGORICAL, NUMERIC, Column, SurveyTable
from hosputil.xport import write_xport

FIVE_CLASSES = (
    ("demographics", ("D1", "D2")),
    ("dietary", ("F1", "F2")),
    ("examination", ("E1", "E2")),
    ("laboratory", ("L1", "L2")),
    ("questionnaire", ("Q1", "Q2")),
)


def five_classes() -> list[CovariateClass]:
    return [CovariateClass(n, m) for n, m in FIVE_CLASSES]


def planted_table(seed: int, n: int = 2000, signal: dict | None = None) -> SurveyTable:
    """Ten standard-normal covariates in five classes; ``signal`` maps names to true log-odds slopes."""
    covs = [CovariateGen(v) for _, members in FIVE_CLASSES for v in members]
    return generate_synthetic(SyntheticSpec(n, covs, dict(signal or {}), seed=seed))


def two_by_two(events_exposed: int, n_exposed: int, events_unexposed: int, n_unexposed: int) -> SurveyTable:
    """Binary exposure EXP (levels "0" reference, "1") and outcome HIGH_UTIL."""
    exp = np.r_[np.ones(n_exposed, dtype=np.int64), np.zeros(n_unexposed, dtype=np.int64)]
    y = np.r_[np.ones(events_exposed), np.zeros(n_exposed - events_exposed),
              np.ones(events_unexposed), np.zeros(n_unexposed - events_unexposed)]
    n = len(y)
    return SurveyTable(np.arange(1, n + 1), {
        "EXP": Column(CATEGORICAL, exp, np.zeros(n, bool), ("0", "1")),
        "HIGH_UTIL": Column(NUMERIC, y, np.zeros(n, bool)),
    })


def random_table(rng: np.random.Generator, n_rows: int, n_num: int, n_cat: int, miss: float = 0.0) -> SurveyTable:
    cols = {}
    for j in range(n_num):
        v = rng.normal(0, 10, n_rows)
        m = rng.random(n_rows) < miss
        v[m] = np.nan
        cols[f"N{j}"] = Column(NUMERIC, v, m)
    for j in range(n_cat):
        levels = tuple(f"L{k}" for k in range(int(rng.integers(1, 4))))
        codes = rng.integers(0, len(levels), n_rows).astype(np.int64)
        m = rng.random(n_rows) < miss
        codes[m] = -1
        cols[f"C{j}"] = Column(CATEGORICAL, codes, m, levels)
    return SurveyTable(np.arange(1, n_rows + 1, dtype=np.int64), cols)


# ---------------------------------------------------------------------------
# watcher fixtures: one cycle = three XPT files (demographics, examination, questionnaire)

CYCLE_CLASSES = [CovariateClass("demographics", ("RIDAGEYR", "RIAGENDR")),
                 CovariateClass("examination", ("BMXBMI",))]


def cycle_config(seed: int = 0) -> PipelineConfig:
    return PipelineConfig(classes=list(CYCLE_CLASSES), outcome_source="VISITS", threshold=5,
                          references={"RIAGENDR": "1"}, seed=seed)


def write_cycle(directory: Path, cycle: str, seed: int, n: int = 1500, id_offset: int = 0,
                shuffle_outcome: bool = False) -> list[ManifestEntry]:
    """Synthetic cycle with a strong BMI and age signal; optionally label-shuffled."""
    rng = np.random.default_rng(seed)
    age = rng.uniform(1, 85, n).round()
    sex = rng.integers(0, 2, n)
    bmi = rng.normal(28, 6, n)
    eta = -1.0 + 0.25 * (bmi - 28) + 0.03 * (age - 45) + 0.3 * sex
    y = rng.random(n) < 1 / (1 + np.exp(-eta))
    if shuffle_outcome:
        y = rng.permutation(y)
    count = np.where(y, rng.integers(6, 16, n), rng.integers(0, 6, n)).astype(float)
    ids = np.arange(1, n + 1, dtype=np.int64) + id_offset
    z = np.zeros(n, bool)
    tables = {
        "demographics": {"RIDAGEYR": Column(NUMERIC, age, z),
                         "RIAGENDR": Column(CATEGORICAL, sex.astype(np.int64), z, ("1", "2"))},
        "examination": {"BMXBMI": Column(NUMERIC, bmi, z)},
        "questionnaire": {"VISITS": Column(NUMERIC, count, z)},
    }
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for role, cols in tables.items():
        path = directory / f"{cycle}_{role[:4]}.xpt"
        path.write_bytes(write_xport(SurveyTable(ids, cols, cycle), role[:8].upper()))
        entries.append(ManifestEntry(path.name, sha256_file(path), cycle, role))
    return entries
