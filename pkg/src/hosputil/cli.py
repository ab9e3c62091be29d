"""``hosputil`` command line: one entry point, one subcommand per workflow step.

Exit codes: 0 success, 1 domain or I/O error, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import yaml

from .errors import HosputilError

log = logging.getLogger("hosputil")


def _model_doc(model) -> dict:
    return {"formula": model.formula.to_dict(), "column_map": [list(c) for c in model.column_map],
            "coefficients": [float(b) for b in model.coefficients],
            "covariance": [[float(v) for v in row] for row in model.covariance],
            "log_likelihood": model.log_likelihood, "n_used": model.n_used, "iterations": model.iterations,
            "converged": model.converged, "ridge": model.ridge, "warnings": list(model.warnings)}


def _read_formula(path: str):
    from .glm import ModelFormula

    doc = yaml.safe_load(Path(path).read_text())
    if isinstance(doc, dict) and "formula" in doc:
        doc = doc["formula"]
    return ModelFormula.from_dict(doc)


def _save(table, path: str) -> None:
    from .table import save_table
    from .xport import write_csv

    if path.lower().endswith(".csv"):
        write_csv(table, path)
    elif path.lower().endswith(".xpt"):
        from .xport import write_xport

        Path(path).write_bytes(write_xport(table))
    else:
        save_table(table, path)


def _load(path: str):
    from .table import load_table

    if not Path(path).exists():
        raise FileNotFoundError(path)
    return load_table(path)


def _meta(args, inputs) -> dict:
    from .report import report_metadata

    return report_metadata(inputs, getattr(args, "seed", None), command=args.command)


def _cycles(paths):
    """Cycle label per table: its stored label, else the file stem."""
    out = []
    for p in paths:
        t = _load(p)
        out.append((t.cycle or Path(p).stem, t))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    from .xport import read_any

    if not Path(args.inp).exists():
        raise FileNotFoundError(args.inp)
    _save(read_any(args.inp, args.cycle), args.out)


def cmd_merge(args):
    from .table import merge_by_id

    _save(merge_by_id([_load(p) for p in args.inp], args.base), args.out)


def cmd_stack(args):
    from .table import stack_cycles

    harm = yaml.safe_load(Path(args.harmonization).read_text()) if args.harmonization else None
    _save(stack_cycles([_load(p) for p in args.inp], harm), args.out)


def cmd_recode(args):
    from .table import apply_recodes, load_recode_specs

    specs = load_recode_specs(args.spec)
    _save(apply_recodes(_load(args.inp), specs), args.out)


def cmd_derive_outcome(args):
    from .table import OutcomeSpec, derive_outcome

    _save(derive_outcome(_load(args.inp), OutcomeSpec(args.source, args.threshold, args.name)), args.out)


def cmd_subgroup(args):
    from .table import filter_subgroup

    defs = yaml.safe_load(Path(args.definitions).read_text()) if args.definitions else None
    _save(filter_subgroup(_load(args.inp), args.group, defs), args.out)


def cmd_impute(args):
    from .impute import impute
    from .report import write_json

    exclude = [v for v in (args.exclude or []) if v]
    table, report = impute(_load(args.inp), args.threshold, args.k, args.seed, args.outcome, exclude)
    _save(table, args.out)
    if args.report:
        write_json(args.report, {"metadata": _meta(args, [args.inp]), **report.to_dict()})


def cmd_fit(args):
    from .glm import fit_formula, resolve_formula
    from .report import write_json

    table = _load(args.inp)
    formula = resolve_formula(table, _read_formula(args.formula))
    model = fit_formula(table, formula, use_weights=args.weights)
    write_json(args.out, _model_doc(model))
    if args.report:
        write_json(args.report, {"metadata": _meta(args, [args.inp, args.formula]),
                                 "n_used": model.n_used, "log_likelihood": model.log_likelihood,
                                 "coefficients": model.summary_rows(), "warnings": list(model.warnings)})


def cmd_stepwise(args):
    from .report import write_json
    from .select import load_classes, stepwise

    table = _load(args.inp)
    classes, refs = load_classes(args.classes)
    res = stepwise(table, args.outcome, classes, args.alpha, refs)
    write_json(args.out, _model_doc(res.model))
    if args.trace:
        write_json(args.trace, {"metadata": _meta(args, [args.inp, args.classes]), **res.trace.to_dict(),
                                "retained_classes": res.retained_classes()})


def cmd_rr_table(args):
    from .report import emit_report
    from .risk import build_risk_table

    table = _load(args.inp)
    rt = build_risk_table(table, _read_formula(args.formula), args.characteristics, args.bootstrap, args.seed,
                          args.alpha)
    emit_report(rt, args.out, _meta(args, [args.inp, args.formula]))


def cmd_trend(args):
    from .report import emit_report
    from .risk import trend_matrix
    from .select import load_classes

    classes, refs = load_classes(args.classes)
    tm = trend_matrix(_cycles(args.inp), args.outcome, classes, args.alpha, refs)
    emit_report(tm, args.out, _meta(args, list(args.inp) + [args.classes]))


def _bands(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if part.endswith("+"):
            out.append((int(part[:-1]), None))
        else:
            lo, hi = part.split("-")
            out.append((int(lo), int(hi)))
    return out


def cmd_histogram(args):
    from .report import emit_report
    from .risk import admissions_histogram

    h = admissions_histogram(_cycles(args.inp), args.variable, _bands(args.bands))
    emit_report(h, args.out, _meta(args, list(args.inp)), title=args.title or f"{args.variable} by cycle")


def cmd_socio(args):
    from .report import emit_report
    from .risk import SOCIO_VARIABLES, socio_model

    refs = {}
    if args.references:
        refs = yaml.safe_load(Path(args.references).read_text()) or {}
    rt = socio_model(_load(args.inp), args.outcome, args.variables or SOCIO_VARIABLES, refs, args.bootstrap,
                     args.seed)
    emit_report(rt, args.out, _meta(args, [args.inp]))


def cmd_synth(args):
    from .synth import generate_synthetic, load_spec

    spec = load_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    _save(generate_synthetic(spec), args.out)


def cmd_pipeline(args):
    from .workflow import WorkflowConfig, load_workflow_config, run_workflow

    if args.config:
        cfg = load_workflow_config(args.config)
    else:
        if not args.inp or not args.classes:
            raise _Usage("pipeline needs --config, or --in with --classes")
        cfg = WorkflowConfig.from_dict({"inputs": list(args.inp), "classes": args.classes})
    for name in ("out_dir", "seed", "alpha", "bootstrap", "outcome_source", "threshold", "histogram_variable"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.subgroup:
        cfg.subgroups = list(args.subgroup)
    for ci in cfg.inputs:
        for f in ci.files:
            if not Path(f).exists():
                raise FileNotFoundError(f)
    summary = run_workflow(cfg)
    print(f"wrote {len(summary['files'])} report files to {cfg.out_dir}; selected terms: "
          f"{', '.join(summary['selected_terms']) or '(none)'}")


def _admin_token(args) -> str | None:
    from .serve.service import TOKEN_ENV

    return args.admin_token or os.environ.get(TOKEN_ENV)


def _watcher(args, on_promote):
    from .serve.pipeline import load_pipeline_config
    from .serve.watcher import GatePolicy, Watcher

    cfg = load_pipeline_config(args.pipeline_config)
    gate = GatePolicy.parse(args.gate, args.min_test_rows)
    audit = args.audit or str(Path(args.artifact).with_suffix(".audit.jsonl"))
    return Watcher(args.manifest, cfg, args.artifact, audit, gate, args.interval, on_promote)


def cmd_serve(args):
    import uvicorn

    from .serve.service import create_app

    port = args.port if args.port is not None else int(os.environ.get("HOSPUTIL_PORT", "8000"))
    watcher = None
    notifier = None
    if args.manifest:
        if not args.pipeline_config:
            raise _Usage("--manifest requires --pipeline-config")
        holder_ref = {}
        watcher = _watcher(args, lambda: holder_ref["holder"].reload())
        notifier = watcher.notify
    app = create_app(args.artifact, _admin_token(args), notifier)
    if watcher is not None:
        holder_ref["holder"] = app.state.holder
        watcher.start()
    try:
        uvicorn.run(app, host=args.host, port=port, log_level="info" if args.verbose else "warning")
    finally:
        if watcher is not None:
            watcher.stop()


def _reload_poster(url, token):
    import httpx

    def post():
        r = httpx.post(url, headers={"X-Admin-Token": token or ""}, timeout=30)
        r.raise_for_status()

    return post


def cmd_watch(args):
    w = _watcher(args, _reload_poster(args.reload_url, _admin_token(args)) if args.reload_url else None)
    if args.once:
        rec = w.tick()
        print("no change" if rec is None else f"run: promoted={rec['promoted']} error={rec['error']}")
        return
    w.start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        w.stop()


# ---------------------------------------------------------------------------
# parser


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hosputil", description="Survey hospital-utilization risk-factor toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    def io(sp, many=False):
        if many:
            sp.add_argument("--in", dest="inp", nargs="+", required=True)
        else:
            sp.add_argument("--in", dest="inp", required=True)
        sp.add_argument("--out", required=True)

    sp = add("ingest", cmd_ingest, "read an XPT or CSV file into a table")
    io(sp)
    sp.add_argument("--cycle", default="")

    sp = add("merge", cmd_merge, "left-join tables on SEQN")
    io(sp, many=True)
    sp.add_argument("--base", type=int, default=0)

    sp = add("stack", cmd_stack, "stack cycles over common variables")
    io(sp, many=True)
    sp.add_argument("--harmonization")

    sp = add("recode", cmd_recode, "apply a recode specification")
    io(sp)
    sp.add_argument("--spec", required=True)

    sp = add("derive-outcome", cmd_derive_outcome, "dichotomize a utilization count")
    io(sp)
    sp.add_argument("--source", required=True, help="numeric count of care episodes")
    sp.add_argument("--threshold", type=int, default=5)
    sp.add_argument("--name", default="HIGH_UTIL")

    sp = add("subgroup", cmd_subgroup, "filter to a clinical subgroup")
    io(sp)
    sp.add_argument("--group", required=True)
    sp.add_argument("--definitions")

    sp = add("impute", cmd_impute, "threshold-driven PMM / polytomous imputation")
    io(sp)
    sp.add_argument("--threshold", type=float, default=0.05)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--outcome", default="HIGH_UTIL")
    sp.add_argument("--exclude", nargs="*")
    sp.add_argument("--report")

    sp = add("fit", cmd_fit, "fit a logistic model")
    io(sp)
    sp.add_argument("--formula", required=True)
    sp.add_argument("--report")
    sp.add_argument("--weights", action="store_true")

    sp = add("stepwise", cmd_stepwise, "forward-by-class then backward elimination")
    io(sp)
    sp.add_argument("--classes", required=True)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--outcome", default="HIGH_UTIL")
    sp.add_argument("--trace")

    sp = add("rr-table", cmd_rr_table, "prevalence and adjusted relative risks")
    io(sp)
    sp.add_argument("--formula", required=True, help="formula file or a model JSON from fit/stepwise")
    sp.add_argument("--bootstrap", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--characteristics", nargs="*")

    sp = add("trend", cmd_trend, "per-cycle significance matrix")
    io(sp, many=True)
    sp.add_argument("--classes", required=True)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--outcome", default="HIGH_UTIL")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("histogram", cmd_histogram, "admissions histogram by cycle")
    io(sp, many=True)
    sp.add_argument("--variable", default="HUD080")
    sp.add_argument("--bands", default="4-9,10+")
    sp.add_argument("--title")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("socio", cmd_socio, "socio-economic risk table")
    io(sp)
    sp.add_argument("--variables", nargs="*")
    sp.add_argument("--references")
    sp.add_argument("--outcome", default="HIGH_UTIL")
    sp.add_argument("--bootstrap", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("synth", cmd_synth, "generate a synthetic table")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("pipeline", cmd_pipeline, "run the full analysis and write every report")
    sp.add_argument("--config")
    sp.add_argument("--in", dest="inp", nargs="+")
    sp.add_argument("--classes")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--bootstrap", type=int)
    sp.add_argument("--outcome-source", dest="outcome_source")
    sp.add_argument("--threshold", type=int)
    sp.add_argument("--histogram-variable", dest="histogram_variable")
    sp.add_argument("--subgroup", nargs="*")

    def watch_opts(sp, required):
        sp.add_argument("--manifest", required=required)
        sp.add_argument("--pipeline-config", required=required)
        sp.add_argument("--interval", type=float, default=300.0)
        sp.add_argument("--gate", default="auc:0.01")
        sp.add_argument("--min-test-rows", type=int, default=50)
        sp.add_argument("--audit")
        sp.add_argument("--admin-token")

    sp = add("serve", cmd_serve, "HTTP prediction service")
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--port", type=int)
    sp.add_argument("--host", default="127.0.0.1")
    watch_opts(sp, False)

    sp = add("watch", cmd_watch, "poll a manifest and retrain on change")
    sp.add_argument("--artifact", required=True)
    sp.add_argument("--reload-url")
    sp.add_argument("--once", action="store_true")
    watch_opts(sp, True)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"hosputil: error: {exc}", file=sys.stderr)
        return 2
    except HosputilError as exc:
        print(f"error [{exc.module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error [io] file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (OSError, yaml.YAMLError, ValueError, KeyError) as exc:
        print(f"error [io] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
