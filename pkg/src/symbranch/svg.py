"""Minimal SVG line plots built from primitive shapes (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def line_plot(path, series, xlabel="", ylabel="", title="", logx=False, logy=False,
              width=640, height=420):
    """Write polylines for ``series = [(xs, ys, label), ...]`` to ``path``.

    Non-finite and (on log axes) nonpositive points are dropped.
    """
    margin = (70, 20, 30, 50)  # left, right, top, bottom
    pw = width - margin[0] - margin[1]
    ph = height - margin[2] - margin[3]
    fx = np.log10 if logx else (lambda a: a)
    fy = np.log10 if logy else (lambda a: a)
    data = []
    for xs, ys, label in series:
        x = np.asarray(xs, dtype=float)
        y = np.asarray(ys, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        data.append((fx(x[ok]), fy(y[ok]), label))
    allx = np.concatenate([d[0] for d in data]) if data else np.array([0.0, 1.0])
    ally = np.concatenate([d[1] for d in data]) if data else np.array([0.0, 1.0])
    if allx.size == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(a):
        return margin[0] + (a - x0) / (x1 - x0) * pw

    def py(b):
        return margin[2] + ph - (b - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{margin[0]}" y="{margin[2]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        lab = f"{10 ** t:.3g}" if logx else f"{t:.3g}"
        out.append(f'<text x="{px(t):.1f}" y="{margin[2] + ph + 15}" font-size="10" '
                   f'text-anchor="middle">{lab}</text>')
    for t in _ticks(y0, y1):
        lab = f"{10 ** t:.3g}" if logy else f"{t:.3g}"
        out.append(f'<text x="{margin[0] - 5}" y="{py(t) + 3:.1f}" font-size="10" '
                   f'text-anchor="end">{lab}</text>')
    for k, (x, y, label) in enumerate(data):
        col = COLORS[k % len(COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        out.append(f'<text x="{margin[0] + 8}" y="{margin[2] + 14 + 14 * k}" font-size="11" '
                   f'fill="{col}">{escape(str(label))}</text>')
    out.append(f'<text x="{margin[0] + pw / 2:.1f}" y="{height - 12}" font-size="12" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{margin[2] + ph / 2:.1f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 15 {margin[2] + ph / 2:.1f})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="18" font-size="13" text-anchor="middle">'
                   f'{escape(title)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path
