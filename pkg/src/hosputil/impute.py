"""Missing-data policy: drop variables above a missingness threshold, impute the rest.

Numeric variables are imputed by predictive mean matching, categorical ones
by draws from a multinomial logistic model. One ordered pass, single
imputation, fully determined by the seed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FitError, ImputationWarning, NoDonors, SingleLevel
from .glm import DesignMatrix, fit_multinomial
from .table import CATEGORICAL, NUMERIC, OUTCOME, Column, SurveyTable

IMPUTE_PMM = "impute_pmm"
IMPUTE_POLYTOMOUS = "impute_polytomous"
LISTWISE_DELETE = "listwise_delete"
NONE = "none"


@dataclass
class VariableMissingness:
    kind: str
    missing_count: int
    missing_fraction: float


@dataclass
class MissingnessProfile:
    n_rows: int
    variables: dict[str, VariableMissingness]
    outcome: str | None = None

    def fraction(self, name: str) -> float:
        return self.variables[name].missing_fraction


def missingness_profile(table: SurveyTable, outcome: str | None = OUTCOME) -> MissingnessProfile:
    n = table.n_rows
    out = {}
    for name, col in table.columns.items():
        cnt = int(col.missing.sum())
        out[name] = VariableMissingness(col.kind, cnt, cnt / n if n else 0.0)
    return MissingnessProfile(n, out, outcome if outcome in table else None)


@dataclass
class ImputationPlan:
    actions: dict[str, str]
    predictors: dict[str, list[str]]
    order: list[str]
    k: int = 5
    seed: int = 0
    threshold: float = 0.05
    outcome: str | None = None


def build_plan(profile: MissingnessProfile, threshold: float = 0.05, k: int = 5, seed: int = 0,
               exclude: Sequence[str] = ()) -> ImputationPlan:
    """Decide an action per variable from its missing fraction.

    ``exclude`` names variables that are neither imputed nor used as predictors.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    actions: dict[str, str] = {}
    for name, v in profile.variables.items():
        if name == profile.outcome or name in exclude or v.missing_count == 0:
            actions[name] = NONE
        elif v.missing_fraction > threshold:
            actions[name] = LISTWISE_DELETE
        else:
            actions[name] = IMPUTE_PMM if v.kind == NUMERIC else IMPUTE_POLYTOMOUS
    complete = [n for n, v in profile.variables.items()
                if v.missing_count == 0 and n != profile.outcome and n not in exclude]
    targets = [n for n, a in actions.items() if a in (IMPUTE_PMM, IMPUTE_POLYTOMOUS)]
    order = sorted(targets, key=lambda n: (profile.variables[n].missing_fraction, list(profile.variables).index(n)))
    predictors: dict[str, list[str]] = {}
    available = list(complete)
    for name in order:
        predictors[name] = [p for p in available if p != name]
        available.append(name)
    return ImputationPlan(actions, predictors, order, k, seed, threshold, profile.outcome)


def predictor_matrix(table: SurveyTable, predictors: Sequence[str]) -> np.ndarray:
    """Intercept plus numeric columns and first-level-referenced dummies, for every row."""
    cols = [np.ones(table.n_rows)]
    for name in predictors:
        col = table[name]
        if col.missing.any():
            raise ValueError(f"predictor {name!r} has missing values")
        if col.is_numeric:
            cols.append(col.values.astype(float))
        else:
            present = np.unique(col.values)
            for code in present[1:]:
                cols.append((col.values == code).astype(float))
    return np.column_stack(cols)


def _full_rank(X: np.ndarray) -> bool:
    if X.shape[0] < X.shape[1]:
        return False
    sd = X.std(axis=0)
    sd[0] = 1.0
    if np.any(sd == 0):
        return False
    return np.linalg.matrix_rank(X / np.abs(X).max(axis=0)) == X.shape[1]


def pmm_impute(table: SurveyTable, target: str, predictors: Sequence[str], k: int = 5,
               seed: int | np.random.Generator = 0) -> tuple[SurveyTable, dict]:
    """Predictive mean matching for one numeric variable. Returns (table, note)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    col = table[target]
    if col.kind != NUMERIC:
        raise TypeError(f"{target!r} is not numeric")
    obs = np.flatnonzero(~col.missing)
    mis = np.flatnonzero(col.missing)
    note = {"variable": target, "action": IMPUTE_PMM, "n_imputed": int(mis.size), "k": k}
    if mis.size == 0:
        return table, note
    if obs.size == 0:
        raise NoDonors(f"{target!r} has no observed values")
    yobs = col.values[obs]
    X = predictor_matrix(table, predictors)
    if _full_rank(X[obs]):
        beta = np.linalg.lstsq(X[obs], yobs, rcond=None)[0]
        pred_obs, pred_mis = X[obs] @ beta, X[mis] @ beta
    else:
        msg = f"{target!r}: predictor matrix rank-deficient; matching on the observed mean"
        warnings.warn(msg, ImputationWarning, stacklevel=2)
        note["warning"] = msg
        pred_obs = np.full(obs.size, yobs.mean())
        pred_mis = np.full(mis.size, yobs.mean())
    kk = min(k, obs.size)
    note["donors_per_row"] = kk
    imputed = np.empty(mis.size)
    for start in range(0, mis.size, 256):
        chunk = slice(start, start + 256)
        dist = np.abs(pred_mis[chunk, None] - pred_obs[None, :])
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        pick = rng.integers(0, kk, size=nearest.shape[0])
        imputed[chunk] = yobs[nearest[np.arange(nearest.shape[0]), pick]]
    values = col.values.copy()
    values[mis] = imputed
    return table.with_column(target, Column(NUMERIC, values, np.zeros(len(values), dtype=bool))), note


def polytomous_impute(table: SurveyTable, target: str, predictors: Sequence[str],
                      seed: int | np.random.Generator = 0) -> tuple[SurveyTable, dict]:
    """Impute a categorical variable by draws from a fitted multinomial logistic model."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    col = table[target]
    if col.kind != CATEGORICAL:
        raise TypeError(f"{target!r} is not categorical")
    obs = np.flatnonzero(~col.missing)
    mis = np.flatnonzero(col.missing)
    note = {"variable": target, "action": IMPUTE_POLYTOMOUS, "n_imputed": int(mis.size)}
    present = np.unique(col.values[obs])
    if present.size < 2:
        raise SingleLevel(f"{target!r} has fewer than two observed levels")
    if mis.size == 0:
        return table, note
    codes = np.searchsorted(present, col.values[obs])
    X = predictor_matrix(table, predictors)
    try:
        design = DesignMatrix(X[obs], tuple(("(intercept)", "intercept") if j == 0 else (f"x{j}", "numeric")
                                            for j in range(X.shape[1])), obs)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = fit_multinomial(design, codes, [col.levels[c] for c in present])
        if caught:
            note["warning"] = "; ".join(str(w.message) for w in caught)
        probs = model.predict_proba(X[mis])
    except FitError as exc:
        msg = f"{target!r}: multinomial fit failed ({exc}); drawing from the observed marginal"
        warnings.warn(msg, ImputationWarning, stacklevel=2)
        note["warning"] = msg
        freq = np.bincount(codes, minlength=present.size) / codes.size
        probs = np.tile(freq, (mis.size, 1))
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(mis.size)
    draw = (u[:, None] >= cum).sum(axis=1)
    values = col.values.copy()
    values[mis] = present[draw]
    return table.with_column(target, Column(CATEGORICAL, values, np.zeros(len(values), dtype=bool),
                                            col.levels)), note


@dataclass
class ImputationReport:
    threshold: float
    seed: int
    k: int
    rows_dropped_missing_outcome: int
    variables: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "seed": self.seed, "k": self.k,
                "rows_dropped_missing_outcome": self.rows_dropped_missing_outcome,
                "variables": self.variables}


def impute_table(table: SurveyTable, plan: ImputationPlan) -> tuple[SurveyTable, ImputationReport]:
    """Run ``plan``: drop rows missing the outcome, then impute in plan order."""
    rng = np.random.default_rng(plan.seed)
    dropped = 0
    if plan.outcome is not None and plan.outcome in table:
        miss = table[plan.outcome].missing
        dropped = int(miss.sum())
        table = table.take(~miss)
    report = ImputationReport(plan.threshold, plan.seed, plan.k, dropped)
    done = set()
    for name in plan.order:
        preds = [p for p in plan.predictors[name] if p in table and not table[p].missing.any()]
        if plan.actions[name] == IMPUTE_PMM:
            table, note = pmm_impute(table, name, preds, plan.k, rng)
        else:
            try:
                table, note = polytomous_impute(table, name, preds, rng)
            except SingleLevel as exc:
                note = {"variable": name, "action": LISTWISE_DELETE, "note": str(exc)}
        note["predictors"] = preds
        report.variables.append(note)
        done.add(name)
    for name, action in plan.actions.items():
        if name not in done:
            entry = {"variable": name, "action": action}
            if name == plan.outcome:
                entry["note"] = "outcome: never imputed"
            report.variables.append(entry)
    return table, report


def impute(table: SurveyTable, threshold: float = 0.05, k: int = 5, seed: int = 0,
           outcome: str | None = OUTCOME, exclude: Sequence[str] = ()) -> tuple[SurveyTable, ImputationReport]:
    """Profile, plan and impute in one call."""
    plan = build_plan(missingness_profile(table, outcome), threshold, k, seed, exclude)
    return impute_table(table, plan)
