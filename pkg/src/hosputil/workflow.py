"""End-to-end analysis run: ingest, merge, recode, impute, stepwise, every report."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import HosputilError, InvalidSpec
from .glm import bivariate_tests
from .impute import impute
from .report import emit_report, report_metadata, write_json
from .risk import SOCIO_VARIABLES, admissions_histogram, build_risk_table, socio_model, trend_matrix
from .select import CovariateClass, check_classes, stepwise
from .table import (
    OUTCOME,
    OutcomeSpec,
    RecodeSpec,
    SurveyTable,
    apply_recodes,
    derive_outcome,
    filter_subgroup,
    merge_by_id,
    recode_specs_from_doc,
    stack_cycles,
)
from .xport import read_any

log = logging.getLogger(__name__)


@dataclass
class CycleInput:
    cycle: str
    files: list[str]


@dataclass
class WorkflowConfig:
    inputs: list[CycleInput]
    classes: list[CovariateClass]
    out_dir: str = "reports"
    outcome: str = OUTCOME
    outcome_source: str | None = None
    threshold: int = 5
    recodes: list[RecodeSpec] = field(default_factory=list)
    references: dict = field(default_factory=dict)
    harmonization: dict = field(default_factory=dict)
    alpha: float = 0.05
    seed: int = 0
    bootstrap: int = 1000
    impute_threshold: float = 0.05
    k: int = 5
    histogram_variable: str | None = None
    histogram_bands: list = field(default_factory=lambda: [(4, 9), (10, None)])
    subgroups: list[str] = field(default_factory=list)
    socio_variables: list[str] = field(default_factory=lambda: list(SOCIO_VARIABLES))

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "WorkflowConfig":
        doc = dict(doc)
        base = base or Path(".")

        def rel(p):
            p = Path(p)
            return str(p if p.is_absolute() else base / p)

        inputs = []
        for i, item in enumerate(doc.pop("inputs", []) or []):
            if isinstance(item, str):
                inputs.append(CycleInput(Path(item).stem, [rel(item)]))
            else:
                files = item.get("files") or [item["path"]]
                inputs.append(CycleInput(str(item.get("cycle", f"cycle{i + 1}")), [rel(f) for f in files]))
        classes_doc = doc.pop("classes", []) or []
        refs = dict(doc.pop("references", {}) or {})
        if isinstance(classes_doc, str):
            cdoc = yaml.safe_load(Path(rel(classes_doc)).read_text()) or {}
            classes_doc = cdoc.get("classes", [])
            refs = {**(cdoc.get("references") or {}), **refs}
        classes = [CovariateClass(c["name"], tuple(c["members"])) for c in classes_doc]
        check_classes(classes)
        recodes = doc.pop("recodes", {}) or {}
        if isinstance(recodes, str):
            recodes = yaml.safe_load(Path(rel(recodes)).read_text()) or {}
        if "histogram_bands" in doc:
            doc["histogram_bands"] = [tuple(b) for b in doc["histogram_bands"]]
        if "out_dir" in doc:
            doc["out_dir"] = rel(doc["out_dir"])
        try:
            return cls(inputs=inputs, classes=classes, references=refs,
                       recodes=recode_specs_from_doc(recodes), **doc)
        except TypeError as exc:
            raise InvalidSpec(f"bad workflow configuration: {exc}") from None


def load_workflow_config(path: str | Path) -> WorkflowConfig:
    path = Path(path)
    return WorkflowConfig.from_dict(yaml.safe_load(path.read_text()) or {}, path.parent)


def load_cycle(ci: CycleInput, cfg: WorkflowConfig) -> SurveyTable:
    table = merge_by_id([read_any(f, ci.cycle) for f in ci.files], 0)
    if cfg.outcome_source:
        table = derive_outcome(table, OutcomeSpec(cfg.outcome_source, cfg.threshold, cfg.outcome))
    applicable = [r for r in cfg.recodes if (r.source or r.variable) in table]
    return apply_recodes(table, applicable) if applicable else table


def _impute(table: SurveyTable, cfg: WorkflowConfig):
    exclude = [v for v in (cfg.outcome_source, cfg.histogram_variable) if v]
    return impute(table, cfg.impute_threshold, cfg.k, cfg.seed, cfg.outcome, exclude)


def run_workflow(cfg: WorkflowConfig) -> dict:
    """Run every analysis and write reports under ``cfg.out_dir``. Returns a summary."""
    if not cfg.inputs:
        raise InvalidSpec("workflow needs at least one input")
    out = Path(cfg.out_dir)
    files = [f for ci in cfg.inputs for f in ci.files]
    meta = report_metadata(files, cfg.seed, alpha=cfg.alpha, bootstrap=cfg.bootstrap)
    written: list[str] = []
    notes: dict[str, str] = {}

    raw = [(ci.cycle, load_cycle(ci, cfg)) for ci in cfg.inputs]

    if cfg.histogram_variable:
        hist = admissions_histogram(raw, cfg.histogram_variable, cfg.histogram_bands)
        written += map(str, emit_report(hist, out / "admissions_histogram", meta,
                                        title=f"{cfg.histogram_variable} by cycle"))

    pooled_raw = raw[0][1] if len(raw) == 1 else stack_cycles([t for _, t in raw], cfg.harmonization)
    pooled, imp_report = _impute(pooled_raw, cfg)
    write_json(out / "imputation.json", {"metadata": meta, **imp_report.to_dict()})
    written.append(str(out / "imputation.json"))

    members = [m for c in cfg.classes for m in c.members if m in pooled]
    write_json(out / "bivariate.json", {"metadata": meta, "tests": bivariate_tests(pooled, cfg.outcome, members)})
    written.append(str(out / "bivariate.json"))

    sel = stepwise(pooled, cfg.outcome, cfg.classes, cfg.alpha, cfg.references)
    write_json(out / "selection.json", {"metadata": meta, "trace": sel.trace.to_dict(),
                                        "formula": sel.model.formula.to_dict(),
                                        "coefficients": sel.model.summary_rows()})
    written.append(str(out / "selection.json"))
    rt = build_risk_table(pooled, sel.model.formula, bootstrap_B=cfg.bootstrap, seed=cfg.seed, alpha=cfg.alpha)
    written += map(str, emit_report(rt, out / "risk_table", meta))

    if len(raw) > 1:
        per_cycle = [(label, _impute(t, cfg)[0]) for label, t in raw]
        tm = trend_matrix(per_cycle, cfg.outcome, cfg.classes, cfg.alpha, cfg.references)
        written += map(str, emit_report(tm, out / "trend_matrix", meta))

    if any(v in pooled for v in cfg.socio_variables):
        try:
            soc = socio_model(pooled, cfg.outcome, cfg.socio_variables, cfg.references, cfg.bootstrap, cfg.seed)
            written += map(str, emit_report(soc, out / "socio_table", meta))
        except HosputilError as exc:
            notes["socio"] = str(exc)

    for group in cfg.subgroups:
        try:
            sub = filter_subgroup(pooled, group)
            gsel = stepwise(sub, cfg.outcome, cfg.classes, cfg.alpha, cfg.references)
            grt = build_risk_table(sub, gsel.model.formula, bootstrap_B=cfg.bootstrap, seed=cfg.seed,
                                   alpha=cfg.alpha)
            written += map(str, emit_report(grt, out / f"risk_table_{group}", {**meta, "subgroup": group}))
        except HosputilError as exc:
            notes[f"subgroup:{group}"] = str(exc)

    summary = {"metadata": meta, "n_pooled": pooled.n_rows, "selected_terms": sel.terms,
               "retained_classes": sel.retained_classes(), "files": sorted(written), "notes": notes}
    write_json(out / "summary.json", summary)
    return summary
