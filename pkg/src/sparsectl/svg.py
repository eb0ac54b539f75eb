"""Minimal SVG line plots written as raw path data.

Canvas 800 x 500 px, plot area inset by ``MARGIN`` (left, right, top,
bottom).  A data point ``(x, y)`` maps to

    px = left + (x - xmin) / (xmax - xmin) * (800 - left - right)
    py = 500 - bottom - (y - ymin) / (ymax - ymin) * (500 - top - bottom)

with linear axes.  Degenerate ranges are widened by one unit (or 5%).
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 500
MARGIN = (70, 20, 40, 50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _range(lo, hi):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return 0.0, 1.0
    if hi - lo <= 1e-300:
        pad = max(abs(hi) * 0.05, 1.0 if hi == 0 else 0.0)
        return lo - pad, hi + pad
    return lo, hi


class Axes:
    def __init__(self, xlim, ylim):
        self.xmin, self.xmax = _range(*xlim)
        self.ymin, self.ymax = _range(*ylim)
        self.left, self.right, self.top, self.bottom = MARGIN

    def px(self, x):
        return self.left + (np.asarray(x) - self.xmin) / (self.xmax - self.xmin) * (WIDTH - self.left - self.right)

    def py(self, y):
        return HEIGHT - self.bottom - (np.asarray(y) - self.ymin) / (self.ymax - self.ymin) * (
            HEIGHT - self.top - self.bottom)


def _path(xs, ys):
    pts = " L ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f"M {pts}" if pts else ""


def line_plot(series, title, xlabel, ylabel, vlines=(), hlines=()):
    """Render ``series`` (list of ``(label, x, y)``) with optional marker lines.

    ``vlines``/``hlines`` are lists of ``(value, label)``.
    """
    xs = np.concatenate([np.asarray(s[1], float) for s in series] + [np.array([v for v, _ in vlines], float)])
    ys = np.concatenate([np.asarray(s[2], float) for s in series] + [np.array([v for v, _ in hlines], float)])
    ax = Axes((float(np.min(xs)), float(np.max(xs))), (min(0.0, float(np.min(ys))), float(np.max(ys))))
    x0, x1 = ax.left, WIDTH - ax.right
    y0, y1 = HEIGHT - ax.bottom, ax.top
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<path d="M {x0},{y1} L {x0},{y0} L {x1},{y0}" stroke="black" fill="none"/>',
    ]
    for frac in np.linspace(0, 1, 5):
        xv = ax.xmin + frac * (ax.xmax - ax.xmin)
        yv = ax.ymin + frac * (ax.ymax - ax.ymin)
        out.append(f'<text x="{ax.px(xv):.2f}" y="{y0 + 18}" text-anchor="middle" font-size="11">{xv:.3g}</text>')
        out.append(f'<text x="{x0 - 6}" y="{ax.py(yv) + 4:.2f}" text-anchor="end" font-size="11">{yv:.3g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2})">{escape(ylabel)}</text>')
    for i, (label, x, y) in enumerate(series):
        c = COLORS[i % len(COLORS)]
        out.append(f'<path d="{_path(ax.px(x), ax.py(y))}" stroke="{c}" stroke-width="1.5" fill="none"/>')
        out.append(f'<text x="{x1 - 4}" y="{y1 + 16 * (i + 1)}" text-anchor="end" font-size="12" fill="{c}">'
                   f'{escape(label)}</text>')
    for v, label in vlines:
        p = ax.px(v)
        out.append(f'<path d="M {p:.2f},{y0} L {p:.2f},{y1}" stroke="gray" stroke-dasharray="6,4" fill="none"/>')
        out.append(f'<text x="{p + 4:.2f}" y="{y1 + 12}" font-size="12" fill="gray">{escape(label)}</text>')
    for v, label in hlines:
        p = ax.py(v)
        out.append(f'<path d="M {x0},{p:.2f} L {x1},{p:.2f}" stroke="gray" stroke-dasharray="6,4" fill="none"/>')
        out.append(f'<text x="{x0 + 4}" y="{p - 4:.2f}" font-size="12" fill="gray">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def control_plot(times, u_norms, T0):
    vl = [] if T0 is None else [(T0, f"T0 = {T0:g}")]
    return line_plot([("||u(t)||", times, u_norms)], "Control norm on omega", "t", "||u(t)||_L2(omega)", vlines=vl)


def state_plot(times, y_norms, err_norms):
    return line_plot([("||y(t)||", times, y_norms), ("||y(t) - yd(t)||", times, err_norms)],
                     "State and tracking error", "t", "L2 norm")


def adjoint_plot(times, phi_norms, kappa):
    return line_plot([("||phi(t)||", times, phi_norms)], "Adjoint on omega and sparsity threshold", "t",
                     "||phi(t)||_L2(omega)", hlines=[(kappa, f"kappa = {kappa:g}")])
