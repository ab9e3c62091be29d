"""Train/validate/test cycle, manifests and the end-to-end retraining pipeline."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from urllib.parse import urlparse

import numpy as np
from scipy import special, stats

from ..errors import ManifestError, SplitTooSmall
from ..glm import ModelFormula, build_design, design_rows, fit_formula, resolve_formula
from ..impute import impute
from ..select import CovariateClass, stepwise
from ..table import OUTCOME, OutcomeSpec, RecodeSpec, SurveyTable, apply_recodes, derive_outcome, merge_by_id, \
    recode_specs_from_doc, stack_cycles
from ..xport import read_any
from .artifact import ModelArtifact, artifact_from_model

log = logging.getLogger(__name__)

ROLES = ("demographics", "dietary", "examination", "laboratory", "questionnaire")


# ---------------------------------------------------------------------------
# metrics


def auc_score(y: np.ndarray, p: np.ndarray) -> float | None:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    y = np.asarray(y)
    n1 = int(np.sum(y == 1))
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        return None
    ranks = stats.rankdata(p)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def classification_metrics(y: np.ndarray, p: np.ndarray) -> dict:
    pc = np.clip(p, 1e-15, 1 - 1e-15)
    return {
        "n": int(len(y)),
        "accuracy": float(np.mean((p >= 0.5) == (y == 1))),
        "auc": auc_score(y, p),
        "log_loss": float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))),
    }


# ---------------------------------------------------------------------------
# train / validate / test


@dataclass
class TvtResult:
    model: object
    artifact: ModelArtifact
    train_rows: np.ndarray
    validation_rows: np.ndarray
    test_rows: np.ndarray
    table: SurveyTable | None = None


def split_indices(rows: np.ndarray, split: Sequence[float], seed: int):
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError("split must be three nonnegative fractions summing to 1")
    perm = np.random.default_rng(seed).permutation(rows)
    n_train = int(np.floor(split[0] * len(rows)))
    n_val = int(np.floor(split[1] * len(rows)))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def train_validate_test(table: SurveyTable, formula: ModelFormula, split=(0.6, 0.2, 0.2), seed: int = 0,
                        manifest_hash: str = "", created_at: str | None = None) -> TvtResult:
    formula = resolve_formula(table, formula)
    kept = build_design(table, formula).kept_rows
    train, val, test = split_indices(kept, split, seed)
    if min(len(train), len(val), len(test)) < 2:
        raise SplitTooSmall(f"split sizes {len(train)}/{len(val)}/{len(test)} are too small")
    model = fit_formula(table, formula, rows=np.sort(train))
    y = table[formula.outcome].values
    metrics = {}
    for name, idx in (("validation", val), ("test", test)):
        sub = table.take(np.sort(idx))
        try:
            X = design_rows(model.column_map, formula.terms, sub)
        except Exception as exc:
            raise SplitTooSmall(f"{name} split has levels absent from training: {exc}") from None
        p = special.expit(X @ model.coefficients)
        metrics[name] = classification_metrics(y[np.sort(idx)], p)
    art = artifact_from_model(model, metrics, manifest_hash, created_at)
    return TvtResult(model, art, np.sort(train), np.sort(val), np.sort(test), table)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    checksum: str
    cycle: str
    role: str


@dataclass
class CycleManifest:
    entries: list[ManifestEntry]
    base: str = ""

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not _is_sha256(e.checksum):
                raise ManifestError(f"malformed checksum for {e.path!r}")
            if e.role not in ROLES:
                raise ManifestError(f"unknown role {e.role!r} for {e.path!r}")
            key = (e.cycle, e.role, e.path)
            if key in seen:
                raise ManifestError(f"duplicate manifest entry {key}")
            seen.add(key)

    @property
    def hash(self) -> str:
        lines = sorted(f"{e.cycle}|{e.role}|{e.path}|{e.checksum}" for e in self.entries)
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    @property
    def cycles(self) -> list[str]:
        return sorted({e.cycle for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> str:
        if urlparse(entry.path).scheme in ("http", "https") or Path(entry.path).is_absolute() or not self.base:
            return entry.path
        if urlparse(self.base).scheme in ("http", "https"):
            return self.base.rsplit("/", 1)[0] + "/" + entry.path
        return str(Path(self.base).parent / entry.path)

    def to_dict(self) -> dict:
        return {"entries": [e.__dict__ for e in self.entries]}


def _is_sha256(s: str) -> bool:
    return isinstance(s, str) and len(s) == 64 and all(c in "0123456789abcdef" for c in s)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fetch(source: str) -> bytes:
    if urlparse(source).scheme in ("http", "https"):
        import httpx

        r = httpx.get(source, timeout=30)
        r.raise_for_status()
        return r.content
    return Path(source).read_bytes()


def load_manifest(source: str) -> CycleManifest:
    import yaml

    try:
        doc = yaml.safe_load(_fetch(source)) or {}
    except Exception as exc:
        raise ManifestError(f"cannot read manifest {source}: {exc}") from None
    entries = [ManifestEntry(str(e["path"]), str(e["checksum"]), str(e["cycle"]), str(e["role"]))
               for e in doc.get("entries", [])]
    return CycleManifest(entries, source)


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    import yaml

    Path(path).write_text(yaml.safe_dump({"entries": [e.__dict__ for e in entries]}, sort_keys=False))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineConfig:
    classes: list[CovariateClass]
    outcome: str = OUTCOME
    outcome_source: str | None = None
    threshold: int = 5
    references: dict = field(default_factory=dict)
    recodes: list[RecodeSpec] = field(default_factory=list)
    impute_threshold: float = 0.05
    k: int = 5
    alpha: float = 0.05
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        doc["classes"] = [CovariateClass(c["name"], tuple(c["members"])) for c in doc.get("classes", [])]
        recodes = recode_specs_from_doc(doc.get("recodes") or {})
        doc["recodes"] = recodes
        if "split" in doc:
            doc["split"] = tuple(doc["split"])
        return cls(**doc)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    import yaml

    return PipelineConfig.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def assemble(manifest: CycleManifest, verify: bool = True) -> SurveyTable:
    """Read every manifest file, merge roles per cycle on SEQN, stack the cycles."""
    per_cycle = []
    for cycle in manifest.cycles:
        entries = sorted((e for e in manifest.entries if e.cycle == cycle), key=lambda e: ROLES.index(e.role))
        tables = []
        for e in entries:
            path = manifest.resolve(e)
            if urlparse(path).scheme in ("http", "https"):
                raise ManifestError("remote data files are not fetched; mirror them locally first")
            if verify and sha256_file(path) != e.checksum:
                raise ManifestError(f"checksum mismatch for {path}")
            tables.append(read_any(path, cycle))
        per_cycle.append(merge_by_id(tables, 0))
    if not per_cycle:
        raise ManifestError("manifest has no entries")
    return per_cycle[0] if len(per_cycle) == 1 else stack_cycles(per_cycle)


def prepare(table: SurveyTable, config: PipelineConfig) -> tuple[SurveyTable, dict]:
    if config.outcome_source:
        table = derive_outcome(table, OutcomeSpec(config.outcome_source, config.threshold, config.outcome))
    if config.recodes:
        table = apply_recodes(table, config.recodes)
    exclude = [config.outcome_source] if config.outcome_source else []
    table, report = impute(table, config.impute_threshold, config.k, config.seed, config.outcome, exclude)
    return table, report.to_dict()


def run_pipeline(manifest: CycleManifest, config: PipelineConfig, created_at: str | None = None):
    """ingest → merge → impute → stepwise → train/validate/test. Returns (TvtResult, selection)."""
    table = assemble(manifest)
    table, _ = prepare(table, config)
    sel = stepwise(table, config.outcome, config.classes, config.alpha, config.references)
    tvt = train_validate_test(table, sel.model.formula, config.split, config.seed, manifest.hash, created_at)
    log.info("pipeline trained on %d rows; terms %s; test metrics %s", table.n_rows, sel.terms,
             tvt.artifact.train_metrics.get("test"))
    return tvt, sel
