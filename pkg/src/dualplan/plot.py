"""Static SVG figures: top-down trajectory overlays and metric bar charts.

Overlays draw inside a group whose transform maps metres in the ego frame
to pixels (x forward points up, y left points left), so polyline points are
the plan coordinates themselves and can be read back from the file.
"""
from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

COLORS = {"GT": "#222222", "VLM": "#1f77b4", "E2E": "#d62728", "E2E-Async": "#2ca02c"}
_FALLBACK = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def color_for(name: str, others: list | None = None) -> str:
    if name in COLORS:
        return COLORS[name]
    others = others or []
    return _FALLBACK[others.index(name) % len(_FALLBACK)] if name in others else _FALLBACK[0]


def _fmt(v: float) -> str:
    return repr(float(v))


def _legend(names, x0: float, y0: float) -> list[str]:
    out = ['<g class="legend">']
    extra = [n for n in names if n not in COLORS]
    for i, name in enumerate(names):
        y = y0 + 16 * i
        out.append(f'<line x1="{x0}" y1="{y}" x2="{x0 + 18}" y2="{y}" stroke="{color_for(name, extra)}" '
                   f'stroke-width="3"/>')
        out.append(f'<text x="{x0 + 24}" y="{y + 4}" font-size="11">{escape(name)}</text>')
    out.append("</g>")
    return out


def trajectory_svg(plans: dict, title: str = "", x_range=(-5.0, 45.0), y_half: float = 15.0,
                   width: int = 360, height: int = 480) -> str:
    """``plans`` maps a provenance name ("GT", "VLM", ...) to an (n, 2) ego-frame waypoint list."""
    margin = 30
    sx = (height - 2 * margin) / (x_range[1] - x_range[0])
    sy = (width - 2 * margin - 90) / (2 * y_half)
    s = min(sx, sy)
    # ego (x, y) -> pixel (cx - s*y, cy - s*x): a rotation by +90 degrees plus flip
    cx = margin + y_half * s
    cy = height - margin + x_range[0] * s
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        '<g class="axes" stroke="#999" stroke-width="1">',
        f'<line x1="{cx}" y1="{margin}" x2="{cx}" y2="{height - margin}"/>',
        f'<line x1="{margin}" y1="{cy}" x2="{cx + y_half * s}" y2="{cy}"/>',
        "</g>",
        f'<text x="{cx + 4}" y="{margin - 8}" font-size="10">x (m, forward)</text>',
        f'<text x="{margin}" y="{cy + 14}" font-size="10">y (m, left)</text>',
        f'<g class="plans" transform="matrix(0 {-s} {-s} 0 {cx} {cy})" fill="none">',
    ]
    extra = [n for n in plans if n not in COLORS]
    for name, wp in plans.items():
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in wp)
        lines.append(f'<polyline data-provenance="{escape(name)}" points="{pts}" stroke="{color_for(name, extra)}" '
                     f'stroke-width="{2.0 / s}"/>')
    lines.append("</g>")
    names = list(plans) or ["GT", "VLM", "E2E", "E2E-Async"]
    lines += _legend(names, width - 100, margin)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def bar_chart_svg(rows: dict, metric: str, title: str = "", width: int = 420, height: int = 260) -> str:
    """One bar per row (method or ablation setting) for ``metric``."""
    margin, top = 40, 30
    names = list(rows)
    vals = [float(rows[n][metric]) for n in names]
    vmax = max(vals + [1e-9])
    bw = (width - 2 * margin) / max(len(names), 1)
    extra = [n for n in names if n not in COLORS]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<title>{escape(title or metric)}</title>",
        f'<text x="{margin}" y="{top - 10}" font-size="12">{escape(title or metric)}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="#999"/>',
        f'<line x1="{margin}" y1="{top}" x2="{margin}" y2="{height - margin}" stroke="#999"/>',
    ]
    for i, (n, v) in enumerate(zip(names, vals)):
        h = (height - margin - top) * v / vmax
        x = margin + i * bw + 0.15 * bw
        out.append(f'<rect data-name="{escape(str(n))}" data-value="{_fmt(v)}" x="{x}" y="{height - margin - h}" '
                   f'width="{0.7 * bw}" height="{h}" fill="{color_for(str(n), extra)}"/>')
        out.append(f'<text x="{x}" y="{height - margin + 14}" font-size="10">{escape(str(n))}</text>')
        out.append(f'<text x="{x}" y="{height - margin - h - 4}" font-size="10">{v:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def rows_csv(rows: dict, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name",) + tuple(columns))
    for n, r in rows.items():
        w.writerow([n] + [repr(float(r[c])) for c in columns])
    return buf.getvalue()


def read_rows_csv(text: str) -> dict:
    """Inverse of ``BenchmarkReport.to_csv`` / ``rows_csv``: first column names the row."""
    rd = csv.reader(io.StringIO(text))
    head = next(rd)
    out = {}
    for rec in rd:
        out[rec[0]] = {k: float(v) for k, v in zip(head[1:], rec[1:])}
    return out
