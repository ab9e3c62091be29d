"""Stepwise model construction: forward selection by covariate class, then backward elimination."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import FitError
from .glm import INTERCEPT, FittedModel, ModelFormula, Term, fit_formula, wald_test
from .table import SurveyTable

CLASS_ORDER = ("demographics", "dietary", "examination", "laboratory", "questionnaire")


@dataclass(frozen=True)
class CovariateClass:
    name: str
    members: tuple[str, ...]


def check_classes(classes: Sequence[CovariateClass]) -> None:
    seen: set[str] = set()
    for c in classes:
        overlap = seen & set(c.members)
        if overlap:
            raise ValueError(f"variable(s) {sorted(overlap)} appear in more than one class")
        seen |= set(c.members)


def load_classes(path: str | Path) -> tuple[list[CovariateClass], dict]:
    """YAML ``{classes: [{name, members}], references: {var: level}}``."""
    import yaml

    doc = yaml.safe_load(Path(path).read_text()) or {}
    classes = [CovariateClass(c["name"], tuple(c["members"])) for c in doc.get("classes", [])]
    check_classes(classes)
    return classes, dict(doc.get("references") or {})


@dataclass
class TraceStep:
    action: str  # add_class | reject_class | skip_class | drop_term
    target: str
    statistic: float | None = None
    df: int | None = None
    p_value: float | None = None
    ll_before: float | None = None
    ll_after: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class SelectionTrace:
    outcome: str
    alpha: float
    rows: list[int]
    steps: list[TraceStep] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "alpha": self.alpha, "n_rows": len(self.rows),
                "steps": [s.to_dict() for s in self.steps]}


@dataclass
class SelectionResult:
    model: FittedModel
    trace: SelectionTrace
    classes: list[CovariateClass]

    @property
    def terms(self) -> list[str]:
        return [t.name for t in self.model.formula.terms]

    def retained_classes(self) -> list[str]:
        kept = set(self.terms)
        return [c.name for c in self.classes if kept & set(c.members)]


def _terms_for(table: SurveyTable, names: Sequence[str], references: dict) -> list[Term]:
    return list(ModelFormula.for_table(table, "_", names, references).terms)


def analysis_rows(table: SurveyTable, outcome: str, classes: Sequence[CovariateClass]) -> np.ndarray:
    names = [outcome] + [m for c in classes for m in c.members if m in table]
    return np.flatnonzero(table.complete_rows(names))


def forward_by_class(table: SurveyTable, outcome: str, classes: Sequence[CovariateClass],
                     alpha: float = 0.05, references: dict | None = None,
                     rows: np.ndarray | None = None) -> SelectionResult:
    """Add whole covariate classes in order, keeping a class iff its likelihood-ratio p < alpha."""
    classes = list(classes)
    check_classes(classes)
    references = references or {}
    rows = analysis_rows(table, outcome, classes) if rows is None else np.asarray(rows)
    trace = SelectionTrace(outcome, alpha, [int(r) for r in rows])
    terms: list[Term] = []
    current = fit_formula(table, ModelFormula(outcome, ()), rows=rows)
    for cls in classes:
        present = [m for m in cls.members if m in table]
        if not present:
            trace.steps.append(TraceStep("skip_class", cls.name, note="no member variables in table"))
            continue
        cand_terms = terms + _terms_for(table, present, references)
        try:
            cand = fit_formula(table, ModelFormula(outcome, tuple(cand_terms)), rows=rows)
        except FitError as exc:
            trace.steps.append(TraceStep("skip_class", cls.name, note=f"fit failed: {exc}"))
            continue
        lr = max(2.0 * (cand.log_likelihood - current.log_likelihood), 0.0)
        df = cand.n_params - current.n_params
        p = float(stats.chi2.sf(lr, df)) if df > 0 else 1.0
        step = TraceStep("add_class" if p < alpha else "reject_class", cls.name, lr, df, p,
                         current.log_likelihood, cand.log_likelihood)
        trace.steps.append(step)
        if p < alpha:
            terms, current = cand_terms, cand
    return SelectionResult(current, trace, classes)


def _term_position(model: FittedModel, name: str) -> int:
    return [t.name for t in model.formula.terms].index(name)


def backward_eliminate(model: FittedModel, table: SurveyTable, alpha: float = 0.05,
                       trace: SelectionTrace | None = None) -> tuple[FittedModel, SelectionTrace]:
    """Drop the term with the largest (multi-df) Wald p >= alpha and refit, until none remain."""
    rows = model.kept_rows
    if trace is None:
        trace = SelectionTrace(model.formula.outcome, alpha, [int(r) for r in rows])
    while True:
        names = [t.name for t in model.formula.terms if model.columns_of(t.name)]
        if not names:
            return model, trace
        worst, worst_p, worst_res = None, -1.0, None
        for name in names:
            res = wald_test(model, name)
            # ">=" lets later terms win ties
            if res.p_value >= worst_p:
                worst, worst_p, worst_res = name, res.p_value, res
        if worst_p < alpha:
            return model, trace
        remaining = [t for t in model.formula.terms if t.name != worst]
        refit = fit_formula(table, model.formula.with_terms(remaining), rows=rows)
        trace.steps.append(TraceStep("drop_term", worst, worst_res.statistic, worst_res.df, worst_p,
                                     model.log_likelihood, refit.log_likelihood))
        model = refit


def stepwise(table: SurveyTable, outcome: str, classes: Sequence[CovariateClass], alpha: float = 0.05,
             references: dict | None = None) -> SelectionResult:
    """Forward by class, then backward elimination applied to the forward result."""
    fwd = forward_by_class(table, outcome, classes, alpha, references)
    model, trace = backward_eliminate(fwd.model, table, alpha, fwd.trace)
    return SelectionResult(model, trace, fwd.classes)


def replay(table: SurveyTable, classes: Sequence[CovariateClass], trace: SelectionTrace,
           references: dict | None = None) -> FittedModel:
    """Rebuild the final model from a trace without re-running any tests."""
    references = references or {}
    by_name = {c.name: c for c in classes}
    terms: list[Term] = []
    for step in trace.steps:
        if step.action == "add_class":
            present = [m for m in by_name[step.target].members if m in table]
            terms += _terms_for(table, present, references)
        elif step.action == "drop_term":
            terms = [t for t in terms if t.name != step.target]
    rows = np.asarray(trace.rows, dtype=np.int64)
    return fit_formula(table, ModelFormula(trace.outcome, tuple(terms)), rows=rows)


def significance_stars(model: FittedModel, alpha: float = 0.05) -> dict[tuple[str, str], bool]:
    """Per non-reference level (or numeric term): starred iff its Wald p < alpha."""
    out = {}
    for row in model.summary_rows():
        if row["term"] == INTERCEPT:
            continue
        out[(row["term"], row["level"])] = row["p_value"] < alpha
    return out
