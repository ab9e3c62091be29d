"""Prevalence, adjusted relative risks, risk-factor trends and admissions histograms.

Relative risks come from the case-base expansion: every analysis row enters
once with pseudo-outcome 0 and every event row enters again with
pseudo-outcome 1. The logistic odds ratio on that expanded data is a risk
ratio. Row duplication invalidates model-based standard errors, so
intervals come from a percentile bootstrap over the original rows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FitError, MissingVariable
from .glm import (
    DesignMatrix,
    FittedModel,
    ModelFormula,
    build_design,
    fit_formula,
    fit_logistic,
    resolve_formula,
)
from .select import CovariateClass, significance_stars, stepwise
from .table import CATEGORICAL, SurveyTable

NUMERIC_LEVEL = "N/A"

SIGNIFICANT = "significant"
NOT_SIGNIFICANT = "not significant"
NOT_AVAILABLE = "not available"

SOCIO_VARIABLES = ("EDU_GROUP", "PIR_GROUP", "INSURANCE", "SELF_HEALTH", "INCOME", "OCCUPATION")


def prevalence_table(table: SurveyTable, characteristic: str) -> dict[str, float]:
    """Percentage of non-missing rows in each level."""
    col = table[characteristic]
    if col.kind != CATEGORICAL:
        raise TypeError(f"{characteristic!r} is not categorical")
    codes = col.values[~col.missing]
    counts = np.bincount(codes, minlength=len(col.levels)) if codes.size else np.zeros(len(col.levels))
    total = counts.sum()
    return {lv: (100.0 * c / total if total else 0.0) for lv, c in zip(col.levels, counts)}


def case_base_expand(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None):
    """Stack the base (all rows, pseudo-outcome 0) over the cases (event rows, pseudo-outcome 1)."""
    cases = y == 1
    Xe = np.vstack([X, X[cases]])
    ye = np.concatenate([np.zeros(len(y)), np.ones(int(cases.sum()))])
    we = None if w is None else np.concatenate([w, w[cases]])
    return Xe, ye, we


@dataclass
class CaseBaseResult:
    column_map: tuple[tuple[str, str], ...]
    log_rr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_used: int
    bootstrap_requested: int
    bootstrap_used: int
    bootstrap_skipped: int
    model: FittedModel
    seed: int

    @property
    def rr(self) -> np.ndarray:
        return np.exp(self.log_rr)

    def get(self, term: str, level: str = "numeric") -> tuple[float, float, float]:
        j = self.column_map.index((term, level))
        return float(np.exp(self.log_rr[j])), float(self.ci_low[j]), float(self.ci_high[j])


def rr_case_base(table: SurveyTable, formula: ModelFormula, bootstrap_B: int = 1000, seed: int = 0,
                 rows: np.ndarray | None = None) -> CaseBaseResult:
    """Adjusted relative risks with percentile-bootstrap 95% intervals."""
    formula = resolve_formula(table, formula)
    design = build_design(table, formula, rows)
    y = table[formula.outcome].values[design.kept_rows]
    w = table.weights()[design.kept_rows] if table.weight is not None else None
    X = design.matrix
    Xe, ye, we = case_base_expand(X, y, w)
    model = fit_logistic(DesignMatrix(Xe, design.column_map, np.arange(len(ye))), ye, we, formula=formula)
    n = len(y)
    draws = []
    skipped = 0
    for b in range(bootstrap_B):
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, n, n)
        Xb, yb = X[idx], y[idx]
        if np.any(~Xb.any(axis=0)) or not yb.any():
            skipped += 1
            continue
        Xbe, ybe, wbe = case_base_expand(Xb, yb, None if w is None else w[idx])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_logistic(DesignMatrix(Xbe, design.column_map, np.arange(len(ybe))), ybe, wbe)
        except FitError:
            skipped += 1
            continue
        draws.append(fit.coefficients)
    if draws:
        D = np.exp(np.array(draws))
        lo, hi = np.percentile(D, [2.5, 97.5], axis=0)
    else:
        lo = hi = np.full(len(design.column_map), np.nan)
    return CaseBaseResult(design.column_map, model.coefficients.copy(), lo, hi, n, bootstrap_B,
                          len(draws), skipped, model, seed)


@dataclass
class RiskRow:
    characteristic: str
    level: str
    prevalence_pct: float | None
    rr: float
    ci_low: float | None
    ci_high: float | None
    starred: bool
    referent: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RiskTable:
    rows: list[RiskRow]
    n_analysis: int = 0
    bootstrap_used: int = 0
    bootstrap_skipped: int = 0
    notes: list[str] = field(default_factory=list)

    def find(self, characteristic: str, level: str) -> RiskRow:
        for r in self.rows:
            if r.characteristic == characteristic and r.level == level:
                return r
        raise KeyError((characteristic, level))

    def to_dict(self) -> dict:
        return {"n_analysis": self.n_analysis, "bootstrap_used": self.bootstrap_used,
                "bootstrap_skipped": self.bootstrap_skipped, "notes": list(self.notes),
                "rows": [r.to_dict() for r in self.rows]}


def build_risk_table(table: SurveyTable, formula: ModelFormula, characteristics: Sequence[str] | None = None,
                     bootstrap_B: int = 1000, seed: int = 0, alpha: float = 0.05,
                     rows: np.ndarray | None = None) -> RiskTable:
    """Table I-style report: prevalence over the analysis sample, RR (95% CI), stars."""
    formula = resolve_formula(table, formula)
    if not formula.terms:
        return RiskTable([], 0)
    kept = build_design(table, formula, rows).kept_rows
    cb = rr_case_base(table, formula, bootstrap_B, seed, kept)
    stars = significance_stars(fit_formula(table, formula, rows=kept), alpha)
    sample = table.take(kept)
    order = list(characteristics) if characteristics else [t.name for t in formula.terms]
    out = []
    for name in order:
        term = formula.term(name)
        if term.kind == CATEGORICAL:
            prev = prevalence_table(sample, name)
            out.append(RiskRow(name, term.reference, prev[term.reference], 1.0, None, None, False, True))
            for lv in sample[name].levels:
                if (name, lv) not in cb.column_map:
                    continue
                rr, lo, hi = cb.get(name, lv)
                out.append(RiskRow(name, lv, prev[lv], rr, lo, hi, stars[(name, lv)]))
        else:
            if (name, "numeric") not in cb.column_map:
                continue
            rr, lo, hi = cb.get(name)
            out.append(RiskRow(name, NUMERIC_LEVEL, None, rr, lo, hi, stars[(name, "numeric")]))
    notes = ["prevalence denominators are the analysis sample after listwise deletion"]
    return RiskTable(out, len(kept), cb.bootstrap_used, cb.bootstrap_skipped, notes)


def socio_model(table: SurveyTable, outcome: str, soc_vars: Sequence[str] = SOCIO_VARIABLES,
                references: dict | None = None, bootstrap_B: int = 1000, seed: int = 0) -> RiskTable:
    """Risk table restricted to the socio-economic covariates present in ``table``."""
    present = [v for v in soc_vars if v in table]
    if not present:
        raise MissingVariable(f"none of the socio-economic variables {list(soc_vars)} are present")
    formula = ModelFormula.for_table(table, outcome, present, references)
    rt = build_risk_table(table, formula, present, bootstrap_B, seed)
    missing = [v for v in soc_vars if v not in table]
    if missing:
        rt.notes.append(f"absent socio-economic variables: {', '.join(missing)}")
    return rt


@dataclass
class TrendMatrix:
    characteristics: list[str]
    cycles: list[str]
    cells: dict[tuple[str, str], str]
    notes: dict[str, str] = field(default_factory=dict)

    def cell(self, characteristic: str, cycle: str) -> str:
        return self.cells[(characteristic, cycle)]

    def to_dict(self) -> dict:
        return {"cycles": self.cycles, "notes": self.notes,
                "rows": [{"characteristic": c, **{cy: self.cells[(c, cy)] for cy in self.cycles}}
                         for c in self.characteristics]}


def trend_matrix(cycles: Sequence[tuple[str, SurveyTable]], outcome: str, classes: Sequence[CovariateClass],
                 alpha: float = 0.05, references: dict | None = None) -> TrendMatrix:
    """Run the stepwise pipeline per cycle and mark the characteristics that survive."""
    chars = list(dict.fromkeys(m for c in classes for m in c.members))
    labels = [label for label, _ in cycles]
    cells: dict[tuple[str, str], str] = {}
    notes: dict[str, str] = {}
    for label, table in cycles:
        try:
            result = stepwise(table, outcome, classes, alpha, references)
            final = set(result.terms)
        except Exception as exc:  # noqa: BLE001 - recorded per cycle
            notes[label] = f"pipeline failed: {exc}"
            final = None
        for ch in chars:
            if final is None or ch not in table or table[ch].missing.all():
                cells[(ch, label)] = NOT_AVAILABLE
            else:
                cells[(ch, label)] = SIGNIFICANT if ch in final else NOT_SIGNIFICANT
    return TrendMatrix(chars, labels, cells, notes)


@dataclass
class AdmissionsHistogram:
    cycles: list[str]
    bands: list[tuple[int, int | None]]
    counts: dict[str, list[int]]

    @staticmethod
    def band_label(band: tuple[int, int | None]) -> str:
        lo, hi = band
        return f"{lo}+" if hi is None else f"{lo}-{hi}"

    def to_dict(self) -> dict:
        return {"bands": [self.band_label(b) for b in self.bands],
                "counts": {c: self.counts[c] for c in self.cycles}}


def admissions_histogram(cycles: Sequence[tuple[str, SurveyTable]], variable: str,
                         bands: Sequence[tuple[int, int | None]] = ((4, 9), (10, None))) -> AdmissionsHistogram:
    """Per-cycle counts of non-missing rows falling in each inclusive band."""
    bands = [tuple(b) for b in bands]
    ordered = sorted(bands, key=lambda b: b[0])
    for a, b in zip(ordered, ordered[1:]):
        if a[1] is None or a[1] >= b[0]:
            raise ValueError("admission bands overlap")
    counts = {}
    for label, table in cycles:
        if variable not in table:
            if table.n_rows == 0:
                counts[label] = [0] * len(bands)
                continue
            raise MissingVariable(f"cycle {label!r} lacks {variable!r}")
        col = table[variable]
        v = col.values[~col.missing]
        counts[label] = [int(np.sum((v >= lo) & (True if hi is None else v <= hi))) for lo, hi in bands]
    return AdmissionsHistogram([label for label, _ in cycles], bands, counts)
