"""Columnar survey tables: merging, cycle stacking, recodes, outcome and subgroup derivation.

Tables are immutable values. Every operation returns a new table.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ColumnCollision,
    CycleMismatch,
    MissingVariable,
    TableError,
    TableFormatError,
    UnharmonizableVariable,
    UnmappedLevel,
)

NUMERIC = "numeric"
CATEGORICAL = "categorical"
OUTCOME = "HIGH_UTIL"

TABLE_FORMAT = "hosputil-table"
TABLE_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Column:
    """One variable. Numeric values are float64 (NaN where missing); categorical
    values are int64 codes into ``levels`` (-1 where missing)."""

    kind: str
    values: np.ndarray
    missing: np.ndarray
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise TableError(f"unknown column kind {self.kind!r}")
        if len(self.values) != len(self.missing):
            raise TableError("missing mask length differs from column length")
        if self.kind == CATEGORICAL:
            codes = self.values[~self.missing]
            if codes.size and (codes.min() < 0 or codes.max() >= len(self.levels)):
                raise TableError("level code out of range")

    @classmethod
    def numeric(cls, values: Iterable, missing: Iterable | None = None) -> "Column":
        arr = np.array([np.nan if v is None else v for v in values], dtype=float)
        mask = np.isnan(arr) if missing is None else np.asarray(missing, dtype=bool)
        arr = arr.copy()
        arr[mask] = np.nan
        return cls(NUMERIC, arr, mask)

    @classmethod
    def categorical(cls, labels: Iterable, levels: Sequence[str] | None = None) -> "Column":
        """Build from labels; ``None`` marks missing. Levels default to sorted distinct labels."""
        labels = list(labels)
        if levels is None:
            levels = sorted({str(x) for x in labels if x is not None})
        levels = tuple(str(x) for x in levels)
        index = {lv: i for i, lv in enumerate(levels)}
        codes = np.full(len(labels), -1, dtype=np.int64)
        for i, lab in enumerate(labels):
            if lab is None:
                continue
            try:
                codes[i] = index[str(lab)]
            except KeyError:
                raise TableError(f"label {lab!r} not among levels {levels}") from None
        return cls(CATEGORICAL, codes, codes < 0, levels)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def is_numeric(self) -> bool:
        return self.kind == NUMERIC

    def labels(self) -> list:
        """Per-row python values: floats for numeric, strings for categorical, None when missing."""
        if self.is_numeric:
            return [None if m else float(v) for v, m in zip(self.values, self.missing)]
        return [None if m else self.levels[c] for c, m in zip(self.values, self.missing)]

    def take(self, idx: np.ndarray) -> "Column":
        return Column(self.kind, self.values[idx], self.missing[idx], self.levels)

    def with_levels(self, levels: Sequence[str]) -> "Column":
        """Re-express codes against a superset dictionary ``levels``."""
        if self.is_numeric:
            raise TableError("numeric column has no levels")
        index = {lv: i for i, lv in enumerate(levels)}
        remap = np.array([index[lv] for lv in self.levels], dtype=np.int64)
        codes = np.where(self.missing, -1, remap[np.where(self.missing, 0, self.values)] if len(remap) else -1)
        return Column(CATEGORICAL, codes.astype(np.int64), self.missing.copy(), tuple(levels))

    def equals(self, other: "Column") -> bool:
        if self.kind != other.kind or len(self) != len(other):
            return False
        if not np.array_equal(self.missing, other.missing):
            return False
        if self.is_numeric:
            a = self.values[~self.missing]
            b = other.values[~other.missing]
            return a.tobytes() == b.tobytes()
        return self.labels() == other.labels()


@dataclass(frozen=True, eq=False)
class SurveyTable:
    row_ids: np.ndarray
    columns: dict[str, Column]
    cycle: str = ""
    weight: np.ndarray | None = None
    synthetic_ids: bool = False

    def __post_init__(self):
        n = len(self.row_ids)
        for name, col in self.columns.items():
            if len(col) != n:
                raise TableError(f"column {name!r} has {len(col)} rows, expected {n}")
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=float)
            if len(w) != n or not np.all(np.isfinite(w)) or np.any(w < 0):
                raise TableError("weights must be finite, nonnegative, one per row")

    @classmethod
    def from_dict(cls, data: Mapping[str, Iterable], row_ids: Iterable | None = None,
                  cycle: str = "", kinds: Mapping[str, str] | None = None) -> "SurveyTable":
        """Convenience constructor. Columns whose values are all str/None become categorical."""
        kinds = dict(kinds or {})
        cols: dict[str, Column] = {}
        for name, vals in data.items():
            vals = list(vals)
            kind = kinds.get(name)
            if kind is None:
                observed = [v for v in vals if v is not None]
                kind = CATEGORICAL if observed and all(isinstance(v, str) for v in observed) else NUMERIC
            cols[name] = Column.categorical(vals) if kind == CATEGORICAL else Column.numeric(vals)
        n = len(next(iter(cols.values()))) if cols else 0
        synthetic = row_ids is None
        ids = np.arange(1, n + 1, dtype=np.int64) if synthetic else np.asarray(list(row_ids), dtype=np.int64)
        return cls(ids, cols, cycle, None, False)

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingVariable(f"variable {name!r} not in table") from None

    def weights(self) -> np.ndarray:
        return np.ones(self.n_rows) if self.weight is None else np.asarray(self.weight, dtype=float)

    def take(self, idx) -> "SurveyTable":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SurveyTable(
            self.row_ids[idx],
            {k: c.take(idx) for k, c in self.columns.items()},
            self.cycle,
            None if self.weight is None else np.asarray(self.weight)[idx],
            self.synthetic_ids,
        )

    def with_column(self, name: str, col: Column) -> "SurveyTable":
        cols = dict(self.columns)
        cols[name] = col
        return replace(self, columns=cols)

    def select(self, names: Iterable[str]) -> "SurveyTable":
        return replace(self, columns={n: self[n] for n in names})

    def drop(self, names: Iterable[str]) -> "SurveyTable":
        names = set(names)
        return replace(self, columns={k: v for k, v in self.columns.items() if k not in names})

    def complete_rows(self, names: Iterable[str]) -> np.ndarray:
        """Boolean mask of rows observed on every variable in ``names``."""
        mask = np.ones(self.n_rows, dtype=bool)
        for n in names:
            mask &= ~self[n].missing
        return mask

    def equals(self, other: "SurveyTable") -> bool:
        return (
            np.array_equal(self.row_ids, other.row_ids)
            and self.names == other.names
            and self.cycle == other.cycle
            and all(self.columns[k].equals(other.columns[k]) for k in self.columns)
        )


# ---------------------------------------------------------------------------
# specs


@dataclass
class OutcomeSpec:
    source_variable: str
    threshold: int = 5
    name: str = OUTCOME

    def __post_init__(self):
        if self.threshold < 0:
            raise TableError("outcome threshold must be >= 0")


@dataclass
class RecodeSpec:
    """Recode one variable into a categorical column.

    Either ``bands`` (numeric source: list of ``(label, interval)`` where
    interval is written like ``"[18, 60]"`` or ``"(60, inf)"``) or ``mapping``
    (source level or numeric code -> target level). ``default`` catches
    unmapped observed levels; ``missing_target`` sends missing cells to a level
    instead of leaving them missing. ``source`` names the input column when
    the result is written to a different ``variable``.
    """

    variable: str
    mapping: dict = field(default_factory=dict)
    bands: list = field(default_factory=list)
    default: str | None = None
    missing_target: str | None = None
    source: str | None = None
    levels: list | None = None

    def __post_init__(self):
        self.bands = [(str(label), Interval.parse(iv) if isinstance(iv, str) else iv)
                      for label, iv in self.bands]
        targets = list(self.mapping.values()) + [b[0] for b in self.bands]
        if any(t is None or str(t) == "" for t in targets):
            raise TableError(f"recode for {self.variable!r} has an empty target level")


_INTERVAL = re.compile(r"^\s*([\[(])\s*([^,]+?)\s*,\s*([^\])]+?)\s*([\])])\s*$")


@dataclass(frozen=True)
class Interval:
    low: float
    high: float
    low_closed: bool = True
    high_closed: bool = False

    @classmethod
    def parse(cls, text: str) -> "Interval":
        m = _INTERVAL.match(text)
        if not m:
            raise TableError(f"bad interval {text!r}")
        return cls(float(m.group(2)), float(m.group(3)), m.group(1) == "[", m.group(4) == "]")

    def contains(self, v: np.ndarray) -> np.ndarray:
        lo = v >= self.low if self.low_closed else v > self.low
        hi = v <= self.high if self.high_closed else v < self.high
        return lo & hi


# 18 belongs to the middle band; "60+" means strictly above 60.
AGE_BANDS = [("0-17", "(-inf, 18)"), ("18-60", "[18, 60]"), ("60+", "(60, inf)")]
PIR_BANDS = [("<1.2", "(-inf, 1.2)"), ("1.2-2.0", "[1.2, 2.1)"),
             ("2.1-3.3", "[2.1, 3.3]"), (">3.3", "(3.3, inf)")]


def age_recode(variable: str = "AGE_GROUP", source: str = "RIDAGEYR") -> RecodeSpec:
    return RecodeSpec(variable, bands=list(AGE_BANDS), source=source)


def pir_recode(variable: str = "PIR_GROUP", source: str = "INDFMPIR") -> RecodeSpec:
    return RecodeSpec(variable, bands=list(PIR_BANDS), source=source)


# ---------------------------------------------------------------------------
# operations


def merge_by_id(tables: Sequence[SurveyTable], base: int = 0) -> SurveyTable:
    """Left-join every table onto ``tables[base]`` by respondent id."""
    if not tables:
        raise TableError("nothing to merge")
    base_t = tables[base]
    for t in tables:
        if t.cycle != base_t.cycle:
            raise CycleMismatch(f"cannot merge cycle {t.cycle!r} into {base_t.cycle!r}")
    if len(tables) == 1:
        return base_t
    cols = dict(base_t.columns)
    pos = {int(r): i for i, r in enumerate(base_t.row_ids)}
    for j, t in enumerate(tables):
        if j == base:
            continue
        src = np.full(base_t.n_rows, -1, dtype=np.int64)
        for i, r in enumerate(t.row_ids):
            k = pos.get(int(r))
            if k is not None:
                src[k] = i
        hit = src >= 0
        for name, col in t.columns.items():
            if name in cols:
                raise ColumnCollision(f"column {name!r} present in more than one table")
            take = np.where(hit, src, 0)
            if len(col) == 0:
                values = np.full(base_t.n_rows, np.nan if col.is_numeric else -1,
                                 dtype=col.values.dtype)
                missing = np.ones(base_t.n_rows, dtype=bool)
            else:
                values = col.values[take].copy()
                missing = col.missing[take] | ~hit
            if col.is_numeric:
                values[missing] = np.nan
            else:
                values[missing] = -1
            cols[name] = Column(col.kind, values, missing, col.levels)
    return replace(base_t, columns=cols)


def _harmonize_one(t: SurveyTable, spec: Mapping) -> SurveyTable:
    rename = dict(spec.get("rename", {}))
    out = {}
    for name, col in t.columns.items():
        new = rename.get(name, name)
        if new in out:
            raise ColumnCollision(f"harmonization maps two columns onto {new!r}")
        out[new] = col
    t = replace(t, columns=out)
    recodes = [r if isinstance(r, RecodeSpec) else RecodeSpec(**r) for r in spec.get("recode", [])]
    if recodes:
        t = apply_recodes(t, recodes)
    return t


def stack_cycles(tables: Sequence[SurveyTable],
                 harmonization: Mapping[str, Mapping] | None = None) -> SurveyTable:
    """Row-wise concatenation over the common variable subset.

    ``harmonization`` maps cycle label → ``{"rename": {...}, "recode": [...]}``.
    The stacked table gets a categorical ``CYCLE`` column and the cycle label
    ``"+"``-joined from the inputs.
    """
    if not tables:
        raise TableError("nothing to stack")
    harmonization = harmonization or {}
    tables = [_harmonize_one(t, harmonization.get(t.cycle, {})) for t in tables]
    common = [n for n in tables[0].names if all(n in t for t in tables[1:])]
    out: dict[str, Column] = {}
    for name in common:
        kinds = {t[name].kind for t in tables}
        if len(kinds) > 1:
            raise UnharmonizableVariable(f"{name!r} is numeric in some cycles and categorical in others")
        kind = kinds.pop()
        if kind == NUMERIC:
            out[name] = Column(NUMERIC, np.concatenate([t[name].values for t in tables]),
                               np.concatenate([t[name].missing for t in tables]))
        else:
            levels: list[str] = []
            for t in tables:
                levels.extend(lv for lv in t[name].levels if lv not in levels)
            parts = [t[name].with_levels(levels) for t in tables]
            out[name] = Column(CATEGORICAL, np.concatenate([p.values for p in parts]),
                               np.concatenate([p.missing for p in parts]), tuple(levels))
    cycles = [t.cycle for t in tables]
    cyc_levels = list(dict.fromkeys(cycles))
    out["CYCLE"] = Column.categorical([t.cycle for t in tables for _ in range(t.n_rows)], cyc_levels)
    weight = None
    if any(t.weight is not None for t in tables):
        weight = np.concatenate([t.weights() for t in tables])
    return SurveyTable(np.concatenate([t.row_ids for t in tables]), out,
                       "+".join(cyc_levels), weight, any(t.synthetic_ids for t in tables))


def derive_outcome(table: SurveyTable, spec: OutcomeSpec) -> SurveyTable:
    """Add the binary outcome: 1 iff count > threshold; missing count → missing outcome."""
    src = table[spec.source_variable]
    if src.is_numeric:
        counts = src.values
    else:
        try:
            counts = np.array([float(lv) for lv in src.levels])[np.where(src.missing, 0, src.values)]
        except ValueError:
            raise TableError(f"{spec.source_variable!r} levels are not numeric codes") from None
    y = np.where(src.missing, np.nan, (counts > spec.threshold).astype(float))
    return table.with_column(spec.name, Column(NUMERIC, y, src.missing.copy()))


# Defining variables per clinical subgroup. NHANES codes: DIQ010 / MCQ160E / MCQ160C 1 = yes.
SUBGROUPS: dict[str, dict] = {
    "diabetes": {"any_of": [("DIQ010", "eq", 1)]},
    "obesity": {"any_of": [("BMXBMI", "gt", 30)]},
    "cardiovascular": {"any_of": [("MCQ160E", "eq", 1), ("MCQ160C", "eq", 1)]},
}


def _predicate(col: Column, op: str, value) -> np.ndarray:
    if col.is_numeric:
        v = col.values
    else:
        lab = np.array(col.levels + ("",), dtype=object)[np.where(col.missing, len(col.levels), col.values)]
        v = lab
        value = str(value)
    with np.errstate(invalid="ignore"):
        if op == "eq":
            hit = v == value
        elif op == "gt":
            hit = v > value
        elif op == "ge":
            hit = v >= value
        elif op == "lt":
            hit = v < value
        else:
            raise TableError(f"unknown predicate op {op!r}")
    return np.asarray(hit, dtype=bool) & ~col.missing


def filter_subgroup(table: SurveyTable, group: str,
                    definitions: Mapping[str, dict] | None = None) -> SurveyTable:
    """Rows belonging to a clinical subgroup.

    A row qualifies when any defining condition holds. For single-variable
    groups a missing value excludes the row; for multi-variable groups a row
    is excluded only when it is missing on every defining variable and no
    condition holds.
    """
    defs = dict(SUBGROUPS)
    defs.update(definitions or {})
    if group not in defs:
        raise TableError(f"unknown subgroup {group!r}")
    conds = defs[group]["any_of"]
    for var, _, _ in conds:
        if var not in table:
            raise MissingVariable(f"subgroup {group!r} needs variable {var!r}")
    hit = np.zeros(table.n_rows, dtype=bool)
    for var, op, value in conds:
        hit |= _predicate(table[var], op, value)
    return table.take(hit)


def _band_labels(col: Column, bands: list) -> list:
    labels: list = [None] * len(col)
    assigned = col.missing.copy()
    with np.errstate(invalid="ignore"):
        for label, iv in bands:
            hit = iv.contains(col.values) & ~assigned
            for i in np.flatnonzero(hit):
                labels[i] = label
            assigned |= hit
    for i in np.flatnonzero(~assigned):
        labels[i] = KeyError(float(col.values[i]))
    return labels


def _normalise_key(k, numeric: bool):
    return float(k) if numeric else str(k)


def apply_recodes(table: SurveyTable, specs: Sequence[RecodeSpec]) -> SurveyTable:
    """Apply recodes in order; each produces a categorical column."""
    for spec in specs:
        src = table[spec.source or spec.variable]
        if spec.bands:
            if not src.is_numeric:
                raise TableError(f"band recode of {spec.variable!r} needs a numeric source")
            labels = _band_labels(src, spec.bands)
            target_levels = [b[0] for b in spec.bands]
        elif spec.mapping:
            mapping = {_normalise_key(k, src.is_numeric): str(v) for k, v in spec.mapping.items()}
            labels = [None if x is None else mapping.get(x, KeyError(x)) for x in src.labels()]
            target_levels = list(dict.fromkeys(mapping.values()))
        else:
            # identity: numeric codes become their integer labels
            if src.is_numeric:
                labels = [None if x is None else (str(int(x)) if x.is_integer() else repr(x))
                          for x in src.labels()]
                target_levels = sorted({x for x in labels if x is not None})
            else:
                labels = src.labels()
                target_levels = list(src.levels)
        if any(isinstance(x, KeyError) for x in labels):
            if spec.default is None:
                bad = next(x for x in labels if isinstance(x, KeyError)).args[0]
                raise UnmappedLevel(f"{spec.variable!r}: no mapping for observed value {bad!r}")
            labels = [spec.default if isinstance(x, KeyError) else x for x in labels]
        if spec.missing_target is not None:
            labels = [spec.missing_target if x is None else x for x in labels]
        levels = list(spec.levels) if spec.levels else target_levels + [
            e for e in (spec.default, spec.missing_target) if e is not None]
        levels = list(dict.fromkeys(levels))
        levels += [x for x in dict.fromkeys(labels) if x is not None and x not in levels]
        table = table.with_column(spec.variable, Column.categorical(labels, levels))
    return table


def recode_specs_from_doc(doc: Mapping) -> list[RecodeSpec]:
    """``{variable: {bands|mapping|default|missing_target|source|levels}}`` → specs.

    Bands are written ``{label: "[low, high)"}`` in order; ``inf`` marks open ends.
    """
    specs = []
    for var, body in (doc or {}).items():
        body = dict(body or {})
        if isinstance(body.get("bands"), dict):
            body["bands"] = list(body["bands"].items())
        specs.append(RecodeSpec(variable=var, **body))
    return specs


def load_recode_specs(path: str | Path) -> list[RecodeSpec]:
    """Read a YAML/JSON recode file (see ``recode_specs_from_doc``)."""
    import yaml

    return recode_specs_from_doc(yaml.safe_load(Path(path).read_text()) or {})


# ---------------------------------------------------------------------------
# persistence


def _num(v: float):
    return None if (isinstance(v, float) and math.isnan(v)) else float(v)


def table_to_dict(table: SurveyTable) -> dict:
    cols = []
    for name, col in table.columns.items():
        entry = {"name": name, "kind": col.kind, "missing": [int(i) for i in np.flatnonzero(col.missing)]}
        if col.is_numeric:
            entry["values"] = [_num(v) for v in col.values]
        else:
            entry["levels"] = list(col.levels)
            entry["codes"] = [int(c) for c in col.values]
        cols.append(entry)
    return {
        "format": TABLE_FORMAT,
        "version": TABLE_FORMAT_VERSION,
        "cycle": table.cycle,
        "n_rows": table.n_rows,
        "synthetic_ids": table.synthetic_ids,
        "row_ids": [int(r) for r in table.row_ids],
        "weight": None if table.weight is None else [float(w) for w in table.weight],
        "columns": cols,
    }


def table_from_dict(doc: Mapping) -> SurveyTable:
    if doc.get("format") != TABLE_FORMAT:
        raise TableFormatError("not a hosputil table file")
    if doc.get("version") != TABLE_FORMAT_VERSION:
        raise TableFormatError(f"unsupported table format version {doc.get('version')!r}")
    n = doc["n_rows"]
    cols = {}
    for entry in doc["columns"]:
        missing = np.zeros(n, dtype=bool)
        missing[np.asarray(entry["missing"], dtype=np.int64)] = True
        if entry["kind"] == NUMERIC:
            vals = np.array([np.nan if v is None else v for v in entry["values"]], dtype=float)
            cols[entry["name"]] = Column(NUMERIC, vals, missing)
        else:
            cols[entry["name"]] = Column(CATEGORICAL, np.asarray(entry["codes"], dtype=np.int64),
                                         missing, tuple(entry["levels"]))
    weight = None if doc.get("weight") is None else np.asarray(doc["weight"], dtype=float)
    return SurveyTable(np.asarray(doc["row_ids"], dtype=np.int64), cols, doc.get("cycle", ""),
                       weight, bool(doc.get("synthetic_ids", False)))


def save_table(table: SurveyTable, path: str | Path) -> None:
    """Write the versioned column-oriented JSON table format."""
    Path(path).write_text(json.dumps(table_to_dict(table), separators=(",", ":")) + "\n")


def load_table(path: str | Path) -> SurveyTable:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        from .xport import read_csv

        return read_csv(path)
    if path.suffix.lower() == ".xpt":
        from .xport import read_xpt

        return read_xpt(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path}: not a table file ({exc})") from None
    return table_from_dict(doc)
