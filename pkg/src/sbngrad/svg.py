"""Minimal hand-written SVG line charts (log-log axes)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def loglog_chart(series: dict, title: str, xlabel: str = "M", ylabel: str = "RMSE / |g|",
                 width: int = 480, height: int = 360) -> str:
    """``series`` maps a label to ``(xs, ys)``; non-positive or non-finite points are skipped."""
    pts = {
        name: [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0 and math.isfinite(y)]
        for name, (xs, ys) in series.items()
    }
    allx = [math.log10(x) for p in pts.values() for x, _ in p]
    ally = [math.log10(y) for p in pts.values() for _, y in p]
    if not allx:
        allx, ally = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = math.floor(min(ally)), math.ceil(max(ally))
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    ml, mr, mt, mb = 60, 120, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (math.log10(v) - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + (y1 - math.log10(v)) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for e in range(int(y0), int(y1) + 1):
        y = mt + (y1 - e) / (y1 - y0) * ph
        out.append(f'<line x1="{ml}" x2="{ml + pw}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 4}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    for e in range(math.floor(x0), math.ceil(x1) + 1):
        if x0 <= e <= x1:
            x = ml + (e - x0) / (x1 - x0) * pw
            out.append(f'<text x="{x:.1f}" y="{mt + ph + 14}" text-anchor="middle">1e{e}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        if p:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 14 * (i + 1)
        out.append(f'<line x1="{ml + pw + 8}" x2="{ml + pw + 24}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 28}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, *args, **kwargs) -> Path:
    path = Path(path)
    path.write_text(loglog_chart(*args, **kwargs))
    return path
