"""Binary and multinomial logistic regression by IRLS / Newton, Wald and Welch tests.

Design matrices use reference-level dummy coding. All solves go through a
Jacobi-equilibrated Cholesky factorisation; the only explicit inverse is the
final covariance matrix.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, special, stats

from .errors import (
    DegenerateSample,
    DidNotConverge,
    EmptyDesign,
    MissingVariable,
    RankDeficient,
    ReferenceLevelUnobserved,
    SeparationWarning,
    SingularSubcovariance,
    UnknownLevel,
)
from .table import CATEGORICAL, NUMERIC, SurveyTable

INTERCEPT = "(intercept)"
SEPARATION_BOUND = 15.0
RANK_TOL = 1e-10
MAX_HALVINGS = 10
# objective changes below this relative size are rounding noise
NOISE = 1e-13


@dataclass(frozen=True)
class Term:
    name: str
    kind: str = NUMERIC
    reference: str | None = None


@dataclass(frozen=True)
class ModelFormula:
    outcome: str
    terms: tuple[Term, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate terms in formula: {names}")
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def variables(self) -> list[str]:
        return [self.outcome] + [t.name for t in self.terms]

    def with_terms(self, terms: Sequence[Term]) -> "ModelFormula":
        return ModelFormula(self.outcome, tuple(terms), self.intercept)

    def term(self, name: str) -> Term:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "intercept": self.intercept,
            "terms": [{"name": t.name, "kind": t.kind, "reference": t.reference} for t in self.terms],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelFormula":
        terms = []
        for t in doc.get("terms", []):
            if isinstance(t, str):
                terms.append(Term(t))
            else:
                terms.append(Term(t["name"], t.get("kind", NUMERIC), t.get("reference")))
        return cls(doc["outcome"], tuple(terms), doc.get("intercept", True))

    @classmethod
    def for_table(cls, table: SurveyTable, outcome: str, names: Sequence[str],
                  references: dict | None = None) -> "ModelFormula":
        """Infer term kinds from the table; categorical references default to the first level."""
        references = references or {}
        terms = []
        for n in names:
            col = table[n]
            if col.is_numeric:
                terms.append(Term(n))
            else:
                terms.append(Term(n, CATEGORICAL, references.get(n, col.levels[0] if col.levels else None)))
        return cls(outcome, tuple(terms))


def load_formula(path: str | Path) -> ModelFormula:
    import yaml

    return ModelFormula.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    matrix: np.ndarray
    column_map: tuple[tuple[str, str], ...]
    kept_rows: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def columns_of(self, term: str) -> list[int]:
        return [i for i, (t, _) in enumerate(self.column_map) if t == term]


def _reference(term: Term, levels: Sequence[str]) -> str:
    ref = term.reference if term.reference is not None else (levels[0] if levels else None)
    if ref is None or ref not in levels:
        raise ReferenceLevelUnobserved(f"reference level {term.reference!r} of {term.name!r} not in {list(levels)}")
    return ref


def build_design(table: SurveyTable, formula: ModelFormula, rows: np.ndarray | None = None) -> DesignMatrix:
    """Dummy-code ``formula`` over ``table``.

    Rows missing any formula variable (outcome included) are dropped. Only
    levels observed among the kept rows receive a column; the reference level
    must be observed.
    """
    for name in formula.variables:
        if name not in table:
            raise MissingVariable(f"formula variable {name!r} not in table")
    keep = table.complete_rows(formula.variables)
    if rows is not None:
        mask = np.zeros(table.n_rows, dtype=bool)
        mask[rows] = True
        keep &= mask
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        raise EmptyDesign("no rows left after listwise deletion")
    cols: list[np.ndarray] = []
    cmap: list[tuple[str, str]] = []
    if formula.intercept:
        cols.append(np.ones(kept.size))
        cmap.append((INTERCEPT, "intercept"))
    for term in formula.terms:
        col = table[term.name]
        if term.kind == NUMERIC:
            if not col.is_numeric:
                raise ValueError(f"term {term.name!r} declared numeric but column is categorical")
            cols.append(col.values[kept].astype(float))
            cmap.append((term.name, "numeric"))
            continue
        if col.is_numeric:
            raise ValueError(f"term {term.name!r} declared categorical but column is numeric")
        ref = _reference(term, col.levels)
        codes = col.values[kept]
        counts = np.bincount(codes, minlength=len(col.levels))
        ref_code = col.levels.index(ref)
        if counts[ref_code] == 0:
            raise ReferenceLevelUnobserved(f"reference level {ref!r} of {term.name!r} has no rows")
        for code, level in enumerate(col.levels):
            if code == ref_code or counts[code] == 0:
                continue
            cols.append((codes == code).astype(float))
            cmap.append((term.name, level))
    X = np.column_stack(cols) if cols else np.zeros((kept.size, 0))
    return DesignMatrix(X, tuple(cmap), kept)


def design_rows(column_map: Sequence[tuple[str, str]], terms: Sequence[Term], table: SurveyTable) -> np.ndarray:
    """Rebuild design rows for new data against a fitted column map."""
    known: dict[str, set] = {}
    for t, lv in column_map:
        known.setdefault(t, set()).add(lv)
    refs = {t.name: t.reference for t in terms}
    X = np.zeros((table.n_rows, len(column_map)))
    cache: dict[str, object] = {}
    for j, (t, lv) in enumerate(column_map):
        if t == INTERCEPT:
            X[:, j] = 1.0
            continue
        if t not in cache:
            if t not in table:
                raise MissingVariable(f"feature {t!r} missing")
            col = table[t]
            if col.missing.any():
                raise MissingVariable(f"feature {t!r} has missing values")
            if lv != "numeric":
                labels = np.array(col.labels(), dtype=object)
                allowed = known[t] | {refs.get(t)}
                unseen = [x for x in labels if x not in allowed]
                if unseen:
                    raise UnknownLevel(f"feature {t!r} has level {unseen[0]!r} unseen at training time")
                cache[t] = labels
            else:
                if not col.is_numeric:
                    raise MissingVariable(f"feature {t!r} must be numeric")
                cache[t] = col.values
        data = cache[t]
        X[:, j] = data if lv == "numeric" else (data == lv).astype(float)
    return X


# ---------------------------------------------------------------------------
# likelihood pieces (exposed for tests)


def logistic_loglik(beta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> float:
    eta = X @ beta
    w = np.ones(len(y)) if w is None else w
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logistic_gradient(beta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    w = np.ones(len(y)) if w is None else w
    return X.T @ (w * (y - special.expit(X @ beta)))


def check_rank(X: np.ndarray, names: Sequence | None = None) -> None:
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(f"{X.shape[0]} rows for {X.shape[1]} columns")
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise RankDeficient(f"column {names[bad] if names else bad} is all zero")
    _, R, piv = linalg.qr(X / norms, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_TOL * d[0]))
    if rank < X.shape[1]:
        dropped = [names[i] if names else int(i) for i in piv[rank:]]
        raise RankDeficient(f"design has rank {rank} < {X.shape[1]}; dependent columns {dropped}")


def _newton_step(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.clip(np.diag(H), 1e-300, None))
    Hs = H / d[:, None] / d[None, :]
    try:
        z = linalg.cho_solve(linalg.cho_factor(Hs), g / d)
    except linalg.LinAlgError:
        z = linalg.lstsq(Hs, g / d)[0]
    return z / d


def _inverse(H: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.clip(np.diag(H), 1e-300, None))
    Hs = H / d[:, None] / d[None, :]
    inv = linalg.inv(Hs) / d[:, None] / d[None, :]
    return (inv + inv.T) / 2


def _effect_scale(X: np.ndarray, intercept_col: int | None) -> np.ndarray:
    """Per-column scale used for the separation check: sd for numeric columns, 1 for dummies."""
    scale = np.ones(X.shape[1])
    for j in range(X.shape[1]):
        if j == intercept_col:
            scale[j] = 0.0
            continue
        col = X[:, j]
        if not np.all((col == 0) | (col == 1)):
            scale[j] = float(np.std(col)) or 1.0
    return scale


@dataclass
class IrlsResult:
    beta: np.ndarray
    hessian: np.ndarray
    loglik: float
    objective: float
    iterations: int
    converged: bool
    separated: bool
    history: list[float]
    grad_norm: float


def _irls(X, y, w, *, max_iter, tol, ridge, intercept_col, check_separation):
    n, p = X.shape
    beta = np.zeros(p)
    if intercept_col is not None:
        ybar = float(np.sum(w * y) / np.sum(w))
        ybar = min(max(ybar, 1e-8), 1 - 1e-8)
        beta[intercept_col] = math.log(ybar / (1 - ybar))
    pen = np.full(p, ridge)
    if intercept_col is not None:
        pen[intercept_col] = 0.0
    scale = _effect_scale(X, intercept_col)

    def objective(b):
        return logistic_loglik(b, X, y, w) - 0.5 * float(np.sum(pen * b * b))

    obj = objective(beta)
    history = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = special.expit(X @ beta)
        g = X.T @ (w * (y - mu)) - pen * beta
        if np.max(np.abs(g), initial=0.0) <= tol:
            converged = True
            it -= 1
            break
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X + np.diag(pen)
        step = _newton_step(H, g)
        t, new = 1.0, beta + step
        new_obj, halvings = objective(new), 0
        while new_obj < obj and halvings < MAX_HALVINGS:
            t /= 2
            new = beta + t * step
            new_obj, halvings = objective(new), halvings + 1
        if new_obj < obj:
            # no ascent at working precision: optimal if the predicted gain is below round-off
            converged = 0.5 * float(step @ g) <= NOISE * (1.0 + abs(obj))
            break
        history.append(new_obj)
        beta, obj = new, new_obj
        if check_separation and np.any(np.abs(beta) * scale >= SEPARATION_BOUND):
            return None
    mu = special.expit(X @ beta)
    g = X.T @ (w * (y - mu)) - pen * beta
    H = (X * (w * mu * (1 - mu))[:, None]).T @ X + np.diag(pen)
    gnorm = float(np.max(np.abs(g), initial=0.0))
    converged = converged or gnorm <= tol
    return IrlsResult(beta, H, logistic_loglik(beta, X, y, w), obj, it, converged, False, history, gnorm)


@dataclass(eq=False)
class FittedModel:
    formula: ModelFormula | None
    column_map: tuple[tuple[str, str], ...]
    coefficients: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    n_used: int
    iterations: int
    converged: bool
    weights_used: bool = False
    ridge: float = 0.0
    history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    gradient_norm: float = 0.0
    kept_rows: np.ndarray | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def n_params(self) -> int:
        return len(self.coefficients)

    def columns_of(self, term: str) -> list[int]:
        return [i for i, (t, _) in enumerate(self.column_map) if t == term]

    @property
    def term_names(self) -> list[str]:
        return list(dict.fromkeys(t for t, _ in self.column_map if t != INTERCEPT))

    def coef(self, term: str, level: str = "numeric") -> float:
        return float(self.coefficients[self.column_map.index((term, level))])

    def summary_rows(self) -> list[dict]:
        """Per-coefficient rows: term, level, beta, SE, Wald chi-square, p, star."""
        out = []
        for j, (t, lv) in enumerate(self.column_map):
            b, s = float(self.coefficients[j]), float(self.se[j])
            chi = (b / s) ** 2 if s > 0 else (0.0 if b == 0 else math.inf)
            p = float(stats.chi2.sf(chi, 1))
            out.append({"term": t, "level": lv, "beta": b, "se": s, "wald_chi2": chi, "p_value": p,
                        "significant": p < 0.05})
        return out


def fit_logistic(design: DesignMatrix, y: np.ndarray, weights: np.ndarray | None = None,
                 formula: ModelFormula | None = None, max_iter: int = 50, tol: float = 1e-8,
                 ridge_fallback: float = 1e-6) -> FittedModel:
    """Maximum-likelihood logistic regression by IRLS with step-halving.

    ``y`` and ``weights`` are aligned with the design rows. On quasi-separation
    the fit is redone once with a small ridge penalty and a SeparationWarning.
    """
    X = design.matrix
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise EmptyDesign("design has no rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("outcome must be coded 0/1")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    names = [f"{t}:{lv}" for t, lv in design.column_map]
    check_rank(X[w > 0], names)
    icol = design.column_map.index((INTERCEPT, "intercept")) if (INTERCEPT, "intercept") in design.column_map else None
    notes = []
    res = _irls(X, y, w, max_iter=max_iter, tol=tol, ridge=0.0, intercept_col=icol, check_separation=True)
    ridge = 0.0
    if res is None:
        ridge = ridge_fallback
        msg = f"quasi-separation detected (|standardised beta| >= {SEPARATION_BOUND}); refit with ridge {ridge}"
        warnings.warn(msg, SeparationWarning, stacklevel=2)
        notes.append(msg)
        res = _irls(X, y, w, max_iter=max_iter * 4, tol=tol, ridge=ridge, intercept_col=icol,
                    check_separation=False)
    if not res.converged:
        raise DidNotConverge(f"IRLS did not converge in {res.iterations} iterations "
                             f"(max |gradient| {res.grad_norm:.3g})")
    return FittedModel(formula, design.column_map, res.beta, _inverse(res.hessian), res.loglik,
                       int(np.sum(w > 0)), res.iterations, True, weights is not None, ridge,
                       res.history, notes, res.grad_norm, design.kept_rows)


def resolve_formula(table: SurveyTable, formula: ModelFormula) -> ModelFormula:
    """Fill in default reference levels (first dictionary level) from ``table``."""
    terms = []
    for t in formula.terms:
        if t.kind == CATEGORICAL and t.reference is None:
            t = Term(t.name, CATEGORICAL, _reference(t, table[t.name].levels))
        terms.append(t)
    return formula.with_terms(terms)


def fit_formula(table: SurveyTable, formula: ModelFormula, rows: np.ndarray | None = None,
                use_weights: bool = False, **opts) -> FittedModel:
    """Build the design for ``formula`` on ``table`` and fit it."""
    formula = resolve_formula(table, formula)
    design = build_design(table, formula, rows)
    y = table[formula.outcome].values[design.kept_rows]
    w = table.weights()[design.kept_rows] if (use_weights or table.weight is not None) else None
    return fit_logistic(design, y, w, formula=formula, **opts)


def predict_prob(model: FittedModel, rows: SurveyTable) -> np.ndarray:
    terms = model.formula.terms if model.formula else ()
    X = design_rows(model.column_map, terms, rows)
    return special.expit(X @ model.coefficients)


# ---------------------------------------------------------------------------
# multinomial


@dataclass(eq=False)
class FittedMultinomial:
    levels: tuple[str, ...]
    column_map: tuple[tuple[str, str], ...]
    coefficients: np.ndarray  # (p, K-1); category 0 is the baseline
    covariance: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    ridge: float = 0.0
    warnings: list = field(default_factory=list)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        eta = np.column_stack([np.zeros(X.shape[0]), X @ self.coefficients])
        return special.softmax(eta, axis=1)


def _mn_loglik(B, X, Y, w):
    eta = np.column_stack([np.zeros(X.shape[0]), X @ B])
    return float(np.sum(w * (np.sum(Y * eta, axis=1) - special.logsumexp(eta, axis=1))))


def fit_multinomial(design: DesignMatrix, y: np.ndarray, levels: Sequence[str],
                    weights: np.ndarray | None = None, max_iter: int = 100, tol: float = 1e-8,
                    ridge_fallback: float = 1e-6) -> FittedMultinomial:
    """Baseline-category logits by Newton iteration. ``y`` holds integer codes into ``levels``."""
    X = design.matrix
    n, p = X.shape
    y = np.asarray(y, dtype=np.int64)
    K = len(levels)
    if n == 0:
        raise EmptyDesign("design has no rows")
    if len(np.unique(y)) < 2:
        raise ValueError("multinomial fit needs at least two observed levels")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    check_rank(X, [f"{t}:{lv}" for t, lv in design.column_map])
    Y = np.zeros((n, K))
    Y[np.arange(n), y] = 1.0
    icol = design.column_map.index((INTERCEPT, "intercept")) if (INTERCEPT, "intercept") in design.column_map else None
    scale = _effect_scale(X, icol)

    def run(ridge, check):
        B = np.zeros((p, K - 1))
        if icol is not None:
            counts = np.maximum(np.bincount(y, weights=w, minlength=K), 1e-8)
            B[icol] = np.log(counts[1:] / counts[0])
        pen = np.full(p, ridge)
        if icol is not None:
            pen[icol] = 0.0
        P = np.repeat(pen[:, None], K - 1, axis=1)

        def obj(Bx):
            return _mn_loglik(Bx, X, Y, w) - 0.5 * float(np.sum(P * Bx * Bx))

        cur = obj(B)
        it = 0
        conv = False
        for it in range(1, max_iter + 1):
            probs = special.softmax(np.column_stack([np.zeros(n), X @ B]), axis=1)[:, 1:]
            G = X.T @ (w[:, None] * (Y[:, 1:] - probs)) - P * B
            if np.max(np.abs(G)) <= tol:
                conv = True
                it -= 1
                break
            H = _mn_hessian(X, probs, w) + np.diag(P.T.ravel())
            step = _newton_step(H, G.T.ravel()).reshape(K - 1, p).T
            t, new = 1.0, B + step
            new_obj, h = obj(new), 0
            while new_obj < cur and h < MAX_HALVINGS:
                t /= 2
                new = B + t * step
                new_obj, h = obj(new), h + 1
            if new_obj < cur:
                conv = 0.5 * float(step.T.ravel() @ G.T.ravel()) <= NOISE * (1.0 + abs(cur))
                break
            B, cur = new, new_obj
            if check and np.any(np.abs(B) * scale[:, None] >= SEPARATION_BOUND):
                return None
        probs = special.softmax(np.column_stack([np.zeros(n), X @ B]), axis=1)[:, 1:]
        G = X.T @ (w[:, None] * (Y[:, 1:] - probs)) - P * B
        conv = conv or np.max(np.abs(G)) <= tol
        H = _mn_hessian(X, probs, w) + np.diag(P.T.ravel())
        return B, H, it, conv

    notes = []
    ridge = 0.0
    out = run(0.0, True)
    if out is None:
        ridge = ridge_fallback
        msg = f"quasi-separation in multinomial fit; refit with ridge {ridge}"
        warnings.warn(msg, SeparationWarning, stacklevel=2)
        notes.append(msg)
        out = run(ridge, False)
    B, H, it, conv = out
    if not conv:
        raise DidNotConverge(f"multinomial Newton did not converge in {it} iterations")
    return FittedMultinomial(tuple(levels), design.column_map, B, _inverse(H), _mn_loglik(B, X, Y, w),
                             it, True, ridge, notes)


def _mn_hessian(X, probs, w):
    n, p = X.shape
    k1 = probs.shape[1]
    H = np.zeros((k1 * p, k1 * p))
    for a in range(k1):
        for b in range(a, k1):
            r = w * probs[:, a] * ((a == b) - probs[:, b])
            blk = (X * r[:, None]).T @ X
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
            H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
    return H


# ---------------------------------------------------------------------------
# tests of association


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float


def wald_test(model: FittedModel, term: str) -> WaldResult:
    """Joint Wald chi-square for all coefficients belonging to ``term``."""
    idx = model.columns_of(term)
    if not idx:
        raise KeyError(f"term {term!r} not in model")
    b = model.coefficients[idx]
    S = model.covariance[np.ix_(idx, idx)]
    if not np.any(b):
        return WaldResult(0.0, len(idx), 1.0)
    try:
        stat = float(b @ linalg.solve(S, b, assume_a="pos"))
    except (linalg.LinAlgError, ValueError):
        raise SingularSubcovariance(f"covariance block of {term!r} is singular") from None
    return WaldResult(stat, len(idx), float(stats.chi2.sf(stat, len(idx))))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_value: float


def two_sample_t(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """Welch's unequal-variance t test, two-sided."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or y.size < 2:
        raise DegenerateSample("each sample needs at least two values")
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    if vx == 0 and vy == 0:
        raise DegenerateSample("both samples have zero variance")
    se = math.sqrt(vx + vy)
    t = (x.mean() - y.mean()) / se
    df = (vx + vy) ** 2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    return TTestResult(float(t), float(df), float(2 * stats.t.sf(abs(t), df)))


def chi_square_association(table: SurveyTable, variable: str, outcome: str) -> WaldResult:
    """Wald chi-square for a categorical variable against a binary outcome (univariate logistic)."""
    formula = ModelFormula.for_table(table, outcome, [variable])
    model = fit_formula(table, formula)
    return wald_test(model, variable)


def bivariate_tests(table: SurveyTable, outcome: str, variables: Sequence[str]) -> list[dict]:
    """Chi-square for categorical, Welch t for numeric variables versus the outcome."""
    out = []
    y = table[outcome]
    for v in variables:
        col = table[v]
        ok = ~col.missing & ~y.missing
        try:
            if col.is_numeric:
                r = two_sample_t(col.values[ok & (y.values == 1)], col.values[ok & (y.values == 0)])
                out.append({"variable": v, "test": "welch_t", "statistic": r.t, "df": r.df, "p_value": r.p_value})
            else:
                r = chi_square_association(table, v, outcome)
                out.append({"variable": v, "test": "wald_chi2", "statistic": r.statistic, "df": r.df,
                            "p_value": r.p_value})
        except Exception as exc:  # noqa: BLE001 - reported per variable
            out.append({"variable": v, "test": "failed", "note": str(exc)})
    return out
