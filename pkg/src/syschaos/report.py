"""Resilience reports, benchmark comparisons and outcome categories.

Markdown output keeps one row per experiment with the columns Client,
Syscall, Error Code, Error Rate, Injections, Metrics, H_N, H_O, H_R. Cells of
untested hypotheses show ``-``. JSON output carries the same rows plus, when
details are requested, every full experiment result.
"""

from __future__ import annotations

import html
import json
import os
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .orchestrator import HN, ExperimentResult, HypothesisVerdicts, Phase, Status
from .syscall.types import ErrorModel

OK, FAIL, UNTESTED = "√", "X", "-"

CONSTRUCT_NOTE = (
    "Injected errors are written into the return value after the kernel has run the call. "
    "The target sees a failure, yet the side effects of the call (for example bytes already "
    "read or sent) did happen, so an injected error is not a perfect stand-in for a real one."
)

LEGEND = (
    f"H_N: {OK} if the target kept running, {FAIL} if it died. "
    "H_O: number of metrics with a visible effect during injection. "
    "H_R: number of affected metrics back at their steady state during validation. "
    f"Untested hypotheses are marked {UNTESTED}."
)


class Outcome(str, Enum):
    CRASH = "crash"
    INVISIBLE = "invisible effect"
    RESILIENT = "resilient"
    LONG_TERM = "long-term effect"
    MIXED = "mixed"


def classify_outcome(verdicts: HypothesisVerdicts) -> Outcome:
    if verdicts.h_n is HN.UNTESTED:
        raise ValueError("only completed or crashed experiments have an outcome")
    if verdicts.h_n is HN.FALSIFIED:
        return Outcome.CRASH
    affected, recovered = verdicts.h_o_count, verdicts.h_r_count
    if affected == 0:
        return Outcome.INVISIBLE
    if recovered == affected:
        return Outcome.RESILIENT
    if recovered == 0:
        return Outcome.LONG_TERM
    return Outcome.MIXED


def outcome_label(result: ExperimentResult) -> str:
    if result.status is Status.INVALID:
        return "invalid"
    return classify_outcome(result.verdicts).value


# --- summary rows --------------------------------------------------------------

@dataclass
class ReportRow:
    client: str
    syscall: str
    errno: str
    rate: float
    injections: int
    metrics: int | None
    h_n: str
    h_o: int | None
    h_r: int | None
    outcome: str
    status: str
    field_observed: bool
    amplification: str
    died_in_phase: str | None = None
    details: dict[str, dict] = field(default_factory=dict)

    def cells(self) -> list[str]:
        def show(v):
            return UNTESTED if v is None else str(v)

        return [
            self.client, self.syscall, self.errno, f"{self.rate:g}", str(self.injections),
            show(self.metrics), self.h_n, show(self.h_o), show(self.h_r),
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRow":
        return cls(**d)


def summarize(result: ExperimentResult, details: bool = True) -> ReportRow:
    v = result.verdicts
    m = result.model
    if result.status is Status.INVALID:
        metrics = h_o = h_r = None
        h_n = UNTESTED
    elif v.h_n is HN.FALSIFIED:
        metrics = h_o = h_r = None
        h_n = FAIL
    else:
        h_n = OK
        metrics, h_o = v.metrics_count, v.h_o_count
        h_r = v.h_r_count if v.h_o_count else None
    per_metric = {}
    if details:
        per_metric = {name: mv.to_dict() for name, mv in sorted(v.metrics.items())}
    return ReportRow(
        result.target_id, m.syscall, m.errno_name, m.rate, result.injections, metrics, h_n, h_o, h_r,
        outcome_label(result), result.status.value, m.provenance.field_observed, m.provenance.amplification,
        result.died_in_phase.value if result.died_in_phase else None, per_metric,
    )


def _table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def _fmt_p(p: float | None) -> str:
    return UNTESTED if p is None else f"{p:.3g}"


def _settings(results: Sequence[ExperimentResult]) -> list[str]:
    def distinct(values):
        out = []
        for v in values:
            if v not in out:
                out.append(v)
        return ", ".join(str(v) for v in out)

    durations = distinct(
        ", ".join(f"{k} {v}s" for k, v in r.config.get("durations", {}).items()) for r in results
    )
    lines = [
        f"- alpha: {distinct(r.config.get('alpha') for r in results)}",
        f"- monitoring interval: {distinct(str(r.config.get('interval_seconds')) + 's' for r in results)}",
        f"- phase durations: {durations}",
        f"- rng seed: {distinct(r.config.get('rng_seed') for r in results)}",
        f"- error-rate rule: {distinct(r.model.provenance.amplification for r in results)}",
    ]
    unobserved = [str(r.model) for r in results if not r.model.provenance.field_observed]
    if unobserved:
        lines.append(f"- not field-observed (user-supplied) models: {distinct(unobserved)}")
    return lines


def _markdown(results: Sequence[ExperimentResult], details: bool) -> str:
    rows = [summarize(r, details) for r in results]
    out = ["# Resilience report", ""]
    out += _table(["Client", "Syscall", "Error Code", "Error Rate", "Injections", "Metrics", "H_N", "H_O", "H_R"],
                  (r.cells() for r in rows))
    out += ["", LEGEND, "", "## Outcomes", ""]
    out += _table(["Client", "Error Model", "Outcome"],
                  ([r.client, f"({r.syscall}, {r.errno}, {r.rate:g})", r.outcome] for r in rows))
    deaths = [r for r in rows if r.died_in_phase]
    if deaths:
        out += [""] + [f"- {r.client} ({r.syscall}, {r.errno}, {r.rate:g}): target died during "
                        f"{r.died_in_phase} after {r.injections} injection{'' if r.injections == 1 else 's'}"
                        for r in deaths]
    out += ["", "## Settings", ""] + _settings(results)
    out += ["", "## Limitation", "", CONSTRUCT_NOTE]
    if details:
        out += ["", "## Per-metric detail"]
        for res, row in zip(results, rows):
            out += ["", f"### {row.client} ({row.syscall}, {row.errno}, {row.rate:g})", ""]
            if not row.details:
                out.append("No steady metrics.")
                continue
            out += _table(
                ["Metric", "Pre-check", "p (pre-check)", "H_O", "p (injection)", "H_R", "p (validation)"],
                ([name, "pass" if d["precheck_passed"] else "excluded", _fmt_p(d["precheck_p"]),
                  d["h_o"], _fmt_p(d["injection_p"]), d["h_r"], _fmt_p(d["validation_p"])]
                 for name, d in row.details.items()),
            )
    return "\n".join(out) + "\n"


def _json(results: Sequence[ExperimentResult], details: bool) -> str:
    doc = {
        "kind": "resilience-report",
        "construct_note": CONSTRUCT_NOTE,
        "rows": [summarize(r, details).to_dict() for r in results],
    }
    if details:
        doc["results"] = [r.to_dict() for r in results]
    return json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def render_report(results: Sequence[ExperimentResult], format: str = "markdown", details: bool = True) -> str:
    if not results:
        raise ValueError("a report needs at least one experiment result")
    if format == "markdown":
        return _markdown(results, details)
    if format == "json":
        return _json(results, details)
    raise ValueError(f"unknown report format {format!r}")


def parse_report(text: str) -> list[ReportRow]:
    return [ReportRow.from_dict(r) for r in json.loads(text)["rows"]]


def results_from_report(text: str) -> list[ExperimentResult]:
    return [ExperimentResult.from_dict(d) for d in json.loads(text).get("results", [])]


# --- benchmark -------------------------------------------------------------------

@dataclass
class BenchmarkRow:
    model: ErrorModel
    cells: dict[str, ReportRow | None]


def build_benchmark(results: Sequence[ExperimentResult], common: Sequence[ErrorModel] | None = None,
                    clients: Sequence[str] | None = None) -> list[BenchmarkRow]:
    by_pair = {(r.target_id, r.model.key): r for r in results}
    clients = list(clients) if clients else sorted({r.target_id for r in results})
    if common is None:
        keys = sorted({r.model.key for r in results})
        rates = {}
        for r in results:
            rates[r.model.key] = max(rates.get(r.model.key, 0.0), r.model.rate)
        common = [ErrorModel(s, e, rates[(s, e)]) for s, e in keys]
    rows = []
    for model in sorted(common, key=lambda m: m.key):
        cells = {}
        for client in clients:
            res = by_pair.get((client, model.key))
            cells[client] = summarize(res, details=False) if res is not None else None
        rows.append(BenchmarkRow(model, cells))
    return rows


def render_benchmark(results: Sequence[ExperimentResult], common: Sequence[ErrorModel] | None = None,
                     format: str = "markdown", clients: Sequence[str] | None = None) -> str:
    """One row per common model, one column group per client; absent runs show ``n/a``."""
    rows = build_benchmark(results, common, clients)
    client_ids = list(rows[0].cells) if rows else sorted({r.target_id for r in results})
    if format == "json":
        doc = {
            "kind": "benchmark-report",
            "clients": client_ids,
            "rows": [{"model": row.model.to_dict(),
                      "clients": {c: (cell.to_dict() if cell else None) for c, cell in row.cells.items()}}
                     for row in rows],
        }
        return json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n"
    if format != "markdown":
        raise ValueError(f"unknown report format {format!r}")
    header = ["Syscall", "Error Code", "Error Rate"]
    for c in client_ids:
        header += [f"{c} Injections", f"{c} Metrics", f"{c} H_N", f"{c} H_O", f"{c} H_R"]
    body = []
    for row in rows:
        line = [row.model.syscall, row.model.errno_name, f"{row.model.rate:g}"]
        for c in client_ids:
            cell = row.cells[c]
            line += cell.cells()[4:] if cell else ["n/a"] * 5
        body.append(line)
    out = ["# Resilience benchmark", "", f"Common error models: {len(rows)}", ""]
    out += _table(header, body)
    out += ["", LEGEND, "n/a: no experiment result for this client and model.", "", "## Limitation", "", CONSTRUCT_NOTE]
    return "\n".join(out) + "\n"


# --- files and plots -------------------------------------------------------------

def write_report_files(results: Sequence[ExperimentResult], out_dir: str | os.PathLike, details: bool = True,
                       plots: bool = False) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json", out / "report.md"]
    written[0].write_text(render_report(results, "json", details), encoding="utf-8")
    written[1].write_text(render_report(results, "markdown", details), encoding="utf-8")
    if plots:
        for r in results:
            written += write_plots(r, out / "plots")
    return written


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_")


def phase_boundaries(result: ExperimentResult) -> list[tuple[str, float]]:
    """(phase, start offset in seconds) for every phase that began."""
    durations = result.config.get("durations", {})
    marks, t = [], 0.0
    for phase in Phase:
        marks.append((phase.value, t))
        if result.died_in_phase is phase:
            break
        t += durations.get(phase.value, 0)
    return marks


def render_svg(result: ExperimentResult, metric: str, width: int = 720, height: int = 240) -> str:
    """Line chart of a metric across observed phases with its reference band."""
    pad = 40
    pts = []
    for obs in result.phases.values():
        pts += [(t - result.started_at, v) for t, v in obs.points.get(metric, ())]
    pts.sort()
    band = result.reference_bands.get(metric)
    total = sum(result.config.get("durations", {}).values()) or 1.0
    ys = [v for _, v in pts] + (list(band) if band else [])
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0

    def x(t):
        return pad + (width - 2 * pad) * t / total

    def y(v):
        return height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if band:
        parts.append(f'<rect x="{pad}" y="{y(band[1]):.1f}" width="{width - 2 * pad}" '
                     f'height="{max(y(band[0]) - y(band[1]), 1):.1f}" fill="#cfe8cf"/>')
    for name, t in phase_boundaries(result):
        parts.append(f'<line x1="{x(t):.1f}" y1="{pad}" x2="{x(t):.1f}" y2="{height - pad}" '
                     f'stroke="#999" stroke-dasharray="4 3"/>')
        parts.append(f'<text x="{x(t) + 3:.1f}" y="{pad - 6}" font-size="10">{name}</text>')
    if pts:
        coords = " ".join(f"{x(t):.1f},{y(v):.1f}" for t, v in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="11">{html.escape(metric)} '
                 f'({html.escape(str(result.model))})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plots(result: ExperimentResult, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    prefix = _slug(f"{result.target_id}-{result.model.syscall}-{result.model.errno_name}")
    for metric in sorted(result.verdicts.metrics):
        path = out / f"{prefix}-{_slug(metric)}.svg"
        path.write_text(render_svg(result, metric), encoding="utf-8")
        paths.append(path)
    return paths
