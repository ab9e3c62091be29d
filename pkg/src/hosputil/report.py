"""Byte-stable CSV, JSON and SVG renderings of analysis results."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import IoFailure
from .risk import AdmissionsHistogram, RiskTable, TrendMatrix

PALETTE = ("#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#ff9da7")


def software_version() -> str:
    from . import __version__

    return __version__


def input_checksums(paths: Sequence[str | Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        h = hashlib.sha256()
        try:
            with open(p, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
        except OSError as exc:
            raise IoFailure(f"cannot read input {p}: {exc}") from None
        out[Path(p).name] = h.hexdigest()
    return out


def report_metadata(inputs: Sequence[str | Path] = (), seed: int | None = None, **extra) -> dict:
    meta = {"software": "hosputil", "version": software_version(), "seed": seed,
            "inputs": input_checksums(inputs)}
    meta.update(extra)
    return meta


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "*" if x else ""
    if isinstance(x, float):
        return "" if math.isnan(x) else f"{x:.6g}"
    return str(x)


def format_rr(rr: float, lo: float | None, hi: float | None) -> str:
    if lo is None or hi is None or math.isnan(lo) or math.isnan(hi):
        return f"{rr:.2f}"
    return f"{rr:.2f}({lo:.2f}-{hi:.2f})"


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def _csv_text(meta: dict, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    for k in sorted(meta):
        v = meta[k]
        if isinstance(v, dict):
            for name in sorted(v):
                buf.write(f"# {k}.{name}: {v[name]}\n")
        else:
            buf.write(f"# {k}: {'' if v is None else v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(c) for c in r])
    return buf.getvalue()


def risk_table_rows(rt: RiskTable) -> tuple[list[str], list[list]]:
    header = ["characteristic", "level", "prevalence_pct", "rr", "ci_low", "ci_high", "significant", "display"]
    rows = []
    for r in rt.rows:
        disp = "1(referent)" if r.referent else format_rr(r.rr, r.ci_low, r.ci_high) + ("*" if r.starred else "")
        rows.append([r.characteristic, r.level, r.prevalence_pct, r.rr, r.ci_low, r.ci_high, r.starred, disp])
    return header, rows


def trend_rows(tm: TrendMatrix) -> tuple[list[str], list[list]]:
    return ["characteristic"] + list(tm.cycles), [[c] + [tm.cell(c, cy) for cy in tm.cycles]
                                                  for c in tm.characteristics]


def histogram_rows(h: AdmissionsHistogram) -> tuple[list[str], list[list]]:
    return ["cycle"] + [h.band_label(b) for b in h.bands], [[c] + list(h.counts[c]) for c in h.cycles]


def histogram_svg(h: AdmissionsHistogram, width: int = 640, height: int = 360, title: str = "") -> str:
    """Grouped bar chart: one group per band, one bar per cycle, heights proportional to counts."""
    margin_l, margin_r, margin_t, margin_b = 60, 150, 40, 50
    pw, ph = width - margin_l - margin_r, height - margin_t - margin_b
    top = max([v for c in h.cycles for v in h.counts[c]] + [1])
    n_bands, n_cyc = len(h.bands), max(len(h.cycles), 1)
    group_w = pw / max(n_bands, 1)
    bar_w = group_w * 0.8 / n_cyc
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>']
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="22" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="15">{escape(title)}</text>')
    base_y = margin_t + ph
    out.append(f'<line x1="{margin_l}" y1="{base_y}" x2="{margin_l + pw}" y2="{base_y}" stroke="#000"/>')
    out.append(f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{base_y}" stroke="#000"/>')
    for k in range(5):
        v = top * k / 4
        y = base_y - ph * k / 4
        out.append(f'<text x="{margin_l - 6}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{v:.0f}</text>')
    for bi, band in enumerate(h.bands):
        gx = margin_l + bi * group_w + group_w * 0.1
        for ci, cyc in enumerate(h.cycles):
            count = h.counts[cyc][bi]
            bh = ph * count / top
            x = gx + ci * bar_w
            out.append(f'<rect class="bar" data-cycle="{escape(cyc)}" data-band="{h.band_label(band)}" '
                       f'data-count="{count}" x="{x:.2f}" y="{base_y - bh:.2f}" width="{bar_w:.2f}" '
                       f'height="{bh:.2f}" fill="{PALETTE[ci % len(PALETTE)]}"/>')
        out.append(f'<text x="{gx + group_w * 0.4:.2f}" y="{base_y + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{h.band_label(band)}</text>')
    for ci, cyc in enumerate(h.cycles):
        y = margin_t + 18 * ci
        out.append(f'<rect x="{width - margin_r + 15}" y="{y}" width="12" height="12" '
                   f'fill="{PALETTE[ci % len(PALETTE)]}"/>')
        out.append(f'<text x="{width - margin_r + 32}" y="{y + 10}" font-family="sans-serif" '
                   f'font-size="12">{escape(cyc)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(result: RiskTable | TrendMatrix | AdmissionsHistogram, out: str | Path,
                metadata: dict | None = None, title: str = "") -> list[Path]:
    """Write ``<out>.csv`` and ``<out>.json`` (plus ``<out>.svg`` for histograms). Returns the paths."""
    out = Path(out)
    if out.suffix in (".csv", ".json", ".svg"):
        out = out.with_suffix("")
    meta = dict(metadata or {})
    if isinstance(result, RiskTable):
        header, rows = risk_table_rows(result)
        kind = "risk_table"
    elif isinstance(result, TrendMatrix):
        header, rows = trend_rows(result)
        kind = "trend_matrix"
    elif isinstance(result, AdmissionsHistogram):
        header, rows = histogram_rows(result)
        kind = "admissions_histogram"
    else:
        raise TypeError(f"cannot render {type(result).__name__}")
    meta.setdefault("kind", kind)
    files = {out.with_suffix(".csv"): _csv_text(meta, header, rows),
             out.with_suffix(".json"): json.dumps(_json_safe({"metadata": meta, **result.to_dict()}),
                                                  sort_keys=True, indent=2) + "\n"}
    if isinstance(result, AdmissionsHistogram):
        files[out.with_suffix(".svg")] = histogram_svg(result, title=title)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        for path, text in files.items():
            path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write report {out}: {exc}") from None
    return list(files)


def write_json(path: str | Path, doc: dict) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(_json_safe(doc), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None
