"""Study reports and deterministic emitters (CSV, JSON, SVG).

The deterministic payload (metric rows, verdicts, provenance) is byte-stable
for fixed (config, seed, code version); wall-clock accounting goes to a
separate timing sidecar so the determinism contract stays checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import HybridmemError

CSV_COLUMNS = ("study", "level", "metric", "estimate", "stderr", "n", "verdict")


@dataclass
class MetricRow:
    study: str
    level: str
    metric: str
    estimate: float
    stderr: float | None = None   # None renders as "exact"
    n: int = 0
    verdict: str = ""

    def as_csv(self) -> str:
        se = "exact" if self.stderr is None else repr(float(self.stderr))
        return ",".join([self.study, self.level, self.metric,
                         repr(float(self.estimate)), se, str(self.n), self.verdict])

    def as_dict(self) -> dict:
        return {"study": self.study, "level": self.level, "metric": self.metric,
                "estimate": float(self.estimate),
                "stderr": None if self.stderr is None else float(self.stderr),
                "n": self.n, "verdict": self.verdict}


@dataclass
class StudyReport:
    study: str
    rows: list                    # list[MetricRow]
    verdicts: dict                # name -> "pass" / "fail" / free-form
    provenance: dict              # config_hash, seed, code_version
    timing: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v != "fail" for v in self.verdicts.values())

    def deterministic_payload(self) -> dict:
        return {"study": self.study,
                "rows": [r.as_dict() for r in self.rows],
                "verdicts": dict(sorted(self.verdicts.items())),
                "provenance": dict(sorted(self.provenance.items()))}

    def to_json(self) -> str:
        return json.dumps(self.deterministic_payload(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        lines.extend(r.as_csv() for r in self.rows)
        return "\n".join(lines) + "\n"


def _svg_line_plot(series: dict, title: str, width: int = 640, height: int = 400) -> str:
    """Minimal deterministic SVG line plot; one polyline per series."""
    pad = 60
    xs_all = [x for pts in series.values() for x, _ in pts]
    ys_all = [y for pts in series.values() for _, y in pts]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width // 2}" y="24" text-anchor="middle" '
             f'font-family="monospace" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for idx, (name, pts) in enumerate(sorted(series.items())):
        color = colors[idx % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 16 * idx}" font-family="monospace" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append(f'<text x="{pad}" y="{height - pad + 32}" font-family="monospace" '
                 f'font-size="11">{x0:.4g} .. {x1:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_outputs(report: StudyReport, out_dir, formats=("json", "csv"),
                 svg_series: dict | None = None) -> list:
    """Write report files; returns the written paths.

    json/csv are byte-identical for identical (config, seed, code version);
    timing goes to its own sidecar.  ``svg_series`` maps figure name ->
    {series name -> [(x, y), ...]}.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise HybridmemError(f"output directory {out} is not writable: {exc}") from exc

    written = []
    if "json" in formats:
        p = out / f"{report.study}_report.json"
        p.write_text(report.to_json())
        written.append(p)
    if "csv" in formats:
        p = out / f"{report.study}_report.csv"
        p.write_text(report.to_csv())
        written.append(p)
    if "svg" in formats:
        for name, series in (svg_series or {}).items():
            p = out / f"{report.study}_{name}.svg"
            p.write_text(_svg_line_plot(series, f"{report.study}: {name}"))
            written.append(p)
    if report.timing:
        p = out / f"{report.study}_timing.json"
        p.write_text(json.dumps(report.timing, sort_keys=True, indent=1) + "\n")
        written.append(p)
    return written
