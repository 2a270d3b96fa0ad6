"""Self-contained SVG charts: multi-series line plots and heatmaps.

Each plotted series carries its values in a ``data-values`` attribute, written
with the same formatter as the companion CSV so the two can be diffed.
"""

from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

import numpy as np

from .io import fmt

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
W, H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 64, 140, 36, 48


def _values_attr(values) -> str:
    return " ".join(fmt(v) for v in values)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _header(title: str, width: int, height: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]


def line_chart(x: Sequence[float], series: Mapping[str, Sequence[float]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> str:
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    for k, v in ys.items():
        if v.shape != x.shape:
            raise ValueError(f"series {k!r} has {v.size} points, x has {x.size}")
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] or [np.zeros(1)])
    ylo, yhi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    xlo, xhi = float(x.min()), float(x.max())
    if xhi == xlo:
        xhi = xlo + 1.0
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B

    def px(v):
        return PAD_L + (v - xlo) / (xhi - xlo) * pw

    def py(v):
        return PAD_T + (1 - (v - ylo) / (yhi - ylo)) * ph

    out = _header(title, W, H)
    out.append(f'<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>')
    for tv in _ticks(xlo, xhi):
        out.append(f'<text x="{px(tv):.1f}" y="{PAD_T + ph + 14}" text-anchor="middle">{tv:.4g}</text>')
    for tv in _ticks(ylo, yhi):
        out.append(f'<text x="{PAD_L - 6}" y="{py(tv) + 4:.1f}" text-anchor="end">{tv:.4g}</text>')
    out.append(f'<text x="{PAD_L + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{PAD_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {PAD_T + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append(f'<g class="series-x" data-name="x" data-values="{_values_attr(x)}"/>')
    for i, (name, v) in enumerate(ys.items()):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, v) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}" '
                   f'data-name="{escape(name)}" data-values="{_values_attr(v)}"/>')
        ly = PAD_T + 14 + 16 * i
        out.append(f'<line x1="{W - PAD_R + 10}" y1="{ly - 4}" x2="{W - PAD_R + 30}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{W - PAD_R + 34}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(matrix, row_labels: Sequence[str], col_labels: Sequence[str], title: str = "",
            vmin: float = 0.0, vmax: float = 1.0) -> str:
    """Rows drawn top to bottom, one rect per cell shaded white (vmin) to blue (vmax)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (len(row_labels), len(col_labels)):
        raise ValueError(f"matrix shape {m.shape} does not match labels")
    rows, cols = m.shape
    cell_w = max(6.0, min(24.0, 560.0 / max(cols, 1)))
    cell_h = 28.0
    left, top = 56, 36
    width = int(left + cols * cell_w + 20)
    height = int(top + rows * cell_h + 40)
    out = _header(title, width, height)
    span = vmax - vmin if vmax > vmin else 1.0
    for r in range(rows):
        y = top + r * cell_h
        out.append(f'<g data-name="{escape(row_labels[r])}" data-values="{_values_attr(m[r])}">')
        for c in range(cols):
            u = float(np.clip((m[r, c] - vmin) / span, 0.0, 1.0))
            shade = f"rgb({int(255 * (1 - u))},{int(255 * (1 - 0.6 * u))},255)"
            out.append(f'<rect x="{left + c * cell_w:.2f}" y="{y:.2f}" width="{cell_w:.2f}" '
                       f'height="{cell_h:.2f}" fill="{shade}"/>')
        out.append("</g>")
        out.append(f'<text x="{left - 6}" y="{y + cell_h / 2 + 4:.1f}" text-anchor="end">{escape(row_labels[r])}</text>')
    step = max(1, cols // 10)
    for c in range(0, cols, step):
        out.append(f'<text x="{left + (c + 0.5) * cell_w:.1f}" y="{top + rows * cell_h + 14:.1f}" '
                   f'text-anchor="middle">{escape(col_labels[c])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def parse_series(svg_text: str) -> dict[str, list[str]]:
    """Recover ``data-name`` -> formatted values from a chart produced here."""
    import re

    found = {}
    for name, values in re.findall(r'data-name="([^"]*)" data-values="([^"]*)"', svg_text):
        found[name] = values.split()
    return found
