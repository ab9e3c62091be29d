"""Synthetic survey tables with planted logistic effects, for tests and demos."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .errors import InvalidSpec
from .table import CATEGORICAL, NUMERIC, OUTCOME, Column, SurveyTable


@dataclass
class CovariateGen:
    name: str
    kind: str = NUMERIC
    mean: float = 0.0
    sd: float = 1.0
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()


@dataclass
class SyntheticSpec:
    """Generator description.

    ``coefficients`` maps ``"intercept"``, numeric covariate names (per unit)
    and ``"name:level"`` for non-reference categorical levels (the first level
    is the reference) to true log-odds effects.
    """

    n: int
    covariates: list[CovariateGen]
    coefficients: dict[str, float] = field(default_factory=dict)
    missingness: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    outcome: str = OUTCOME
    count_variable: str | None = None
    count_threshold: int = 5
    cycle: str = "synthetic"
    id_offset: int = 0

    def validate(self) -> None:
        if self.n < 1:
            raise InvalidSpec("n must be >= 1")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise InvalidSpec("duplicate covariate names")
        for c in self.covariates:
            if c.kind == CATEGORICAL:
                if len(c.levels) < 1 or len(c.levels) != len(c.probs):
                    raise InvalidSpec(f"{c.name}: levels and probs must match")
                if any(p < 0 for p in c.probs) or abs(sum(c.probs) - 1.0) > 1e-9:
                    raise InvalidSpec(f"{c.name}: probabilities must be >= 0 and sum to 1")
            elif c.kind == NUMERIC:
                if c.sd < 0:
                    raise InvalidSpec(f"{c.name}: sd must be >= 0")
            else:
                raise InvalidSpec(f"{c.name}: unknown kind {c.kind!r}")
        known = {"intercept"} | {c.name for c in self.covariates if c.kind == NUMERIC}
        known |= {f"{c.name}:{lv}" for c in self.covariates if c.kind == CATEGORICAL for lv in c.levels[1:]}
        unknown = set(self.coefficients) - known
        if unknown:
            raise InvalidSpec(f"coefficients for unknown terms {sorted(unknown)}")
        for k, r in self.missingness.items():
            if not 0 <= r <= 1:
                raise InvalidSpec(f"missingness rate for {k!r} outside [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        covs = []
        for c in doc.get("covariates", []):
            c = dict(c)
            if "levels" in c:
                c["levels"] = tuple(c["levels"])
                c["probs"] = tuple(c.get("probs", ()))
                c.setdefault("kind", CATEGORICAL)
            covs.append(CovariateGen(**c))
        body = {k: v for k, v in doc.items() if k != "covariates"}
        try:
            return cls(covariates=covs, **body)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "n": self.n, "seed": self.seed, "outcome": self.outcome, "cycle": self.cycle,
            "count_variable": self.count_variable, "count_threshold": self.count_threshold,
            "id_offset": self.id_offset, "coefficients": dict(self.coefficients),
            "missingness": dict(self.missingness),
            "covariates": [
                {"name": c.name, "kind": c.kind, "mean": c.mean, "sd": c.sd}
                if c.kind == NUMERIC else
                {"name": c.name, "kind": c.kind, "levels": list(c.levels), "probs": list(c.probs)}
                for c in self.covariates
            ],
        }


def load_spec(path: str | Path) -> SyntheticSpec:
    import yaml

    return SyntheticSpec.from_dict(yaml.safe_load(Path(path).read_text()))


def generate_synthetic(spec: SyntheticSpec) -> SurveyTable:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    eta = np.full(n, float(spec.coefficients.get("intercept", 0.0)))
    cols: dict[str, Column] = {}
    for c in spec.covariates:
        if c.kind == NUMERIC:
            x = rng.normal(c.mean, c.sd, n)
            eta += spec.coefficients.get(c.name, 0.0) * x
            cols[c.name] = Column(NUMERIC, x, np.zeros(n, dtype=bool))
        else:
            codes = rng.choice(len(c.levels), size=n, p=np.asarray(c.probs, dtype=float))
            effects = np.array([0.0] + [spec.coefficients.get(f"{c.name}:{lv}", 0.0) for lv in c.levels[1:]])
            eta += effects[codes]
            cols[c.name] = Column(CATEGORICAL, codes.astype(np.int64), np.zeros(n, dtype=bool), tuple(c.levels))
    y = (rng.random(n) < special.expit(eta)).astype(float)
    if spec.count_variable:
        t = spec.count_threshold
        counts = np.where(y == 1, rng.integers(t + 1, 3 * t + 1, n), rng.integers(0, t + 1, n)).astype(float)
        cols[spec.count_variable] = Column(NUMERIC, counts, np.zeros(n, dtype=bool))
    cols[spec.outcome] = Column(NUMERIC, y, np.zeros(n, dtype=bool))
    for name, rate in spec.missingness.items():
        if name not in cols or rate == 0:
            continue
        col = cols[name]
        hole = rng.random(n) < rate
        vals = col.values.copy()
        vals[hole] = np.nan if col.is_numeric else -1
        cols[name] = Column(col.kind, vals, hole, col.levels)
    ids = np.arange(1, n + 1, dtype=np.int64) + spec.id_offset
    return SurveyTable(ids, cols, spec.cycle)
