"""Minimal static SVG output for loss curves and quiver plots.

Output is a pure function of the input data, so repeated runs produce
identical files.

Quiver arrows are scaled so the longest arrow spans 0.9 grid cells; all
other arrows keep their length relative to it.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 360, 40
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _doc(body: list[str], title: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">'
    )
    caption = f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>'
    frame = f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" fill="none" stroke="#888"/>'
    return "\n".join([head, caption, frame, *body, "</svg>", ""])


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def line_plot(series: dict, title: str = "") -> str:
    """One polyline per named series; x is the index, non-finite points are dropped."""
    values = np.concatenate([np.asarray(v, float) for v in series.values()]) if series else np.zeros(1)
    finite = values[np.isfinite(values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    n = max((len(v) for v in series.values()), default=1)
    sx = _scale(0, max(n - 1, 1), PAD, WIDTH - PAD)
    sy = _scale(lo, hi, HEIGHT - PAD, PAD)
    body = [
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{PAD - 4}" y="{HEIGHT - PAD}" text-anchor="end" font-size="10">{lo:.3g}</text>',
    ]
    for k, (name, ys) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{sx(i):.2f},{sy(y):.2f}" for i, y in enumerate(ys) if np.isfinite(y))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(
            f'<text x="{WIDTH - PAD}" y="{PAD + 14 * (k + 1)}" text-anchor="end" font-size="11" fill="{color}">{escape(name)}</text>'
        )
    return _doc(body, title)


def quiver_plot(grid, title: str = "") -> str:
    """Arrows at every grid node of a FieldGrid."""
    xs, ys = grid.xs, grid.ys
    sx = _scale(xs[0], xs[-1], PAD + 10, WIDTH - PAD - 10)
    sy = _scale(ys[0], ys[-1], HEIGHT - PAD - 10, PAD + 10)
    cell = min(abs(sx(xs[1]) - sx(xs[0])), abs(sy(ys[1]) - sy(ys[0])))
    mags = np.hypot(grid.dx, grid.dy)
    finite = mags[np.isfinite(mags)]
    top = float(finite.max()) if finite.size else 0.0
    k = 0.9 * cell / top if top > 0 else 0.0
    body = ['<defs><marker id="h" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto">'
            '<path d="M0,0 L6,3 L0,6 z" fill="#1f77b4"/></marker></defs>']
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            u, v = grid.dx[j, i], grid.dy[j, i]
            if not (np.isfinite(u) and np.isfinite(v)) or u == v == 0:
                body.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="1" fill="#1f77b4"/>')
                continue
            x0, y0 = sx(x), sy(y)
            body.append(
                f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x0 + k * u:.2f}" y2="{y0 - k * v:.2f}" '
                'stroke="#1f77b4" marker-end="url(#h)"/>'
            )
    return _doc(body, title)
