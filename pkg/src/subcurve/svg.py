"""Minimal self-contained SVG line charts."""

from __future__ import annotations

import math
from html import escape

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 40, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def line_chart(series, title: str = "", xlabel: str = "", ylabel: str = "",
               log_y: bool = False) -> str:
    """Render ``series`` = [(label, xs, ys), ...] as an SVG document string.

    With ``log_y`` non-positive or non-finite points are skipped.
    """
    cleaned = []
    for label, xs, ys in series:
        pts = []
        for x, y in zip(xs, ys):
            x, y = float(x), float(y)
            if not (math.isfinite(x) and math.isfinite(y)) or (log_y and y <= 0):
                continue
            pts.append((x, math.log10(y) if log_y else y))
        cleaned.append((label, pts))
    all_pts = [p for _, pts in cleaned for p in pts]
    if all_pts:
        x0, x1 = min(p[0] for p in all_pts), max(p[0] for p in all_pts)
        y0, y1 = min(p[1] for p in all_pts), max(p[1] for p in all_pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN_T + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        ylab = 10 ** fy if log_y else fy
        out.append(f'<text x="{_fmt(sx(fx))}" y="{HEIGHT - MARGIN_B + 15}" '
                   f'text-anchor="middle">{escape(_tick_label(fx))}</text>')
        out.append(f'<text x="{MARGIN_L - 5}" y="{_fmt(sy(fy) + 4)}" '
                   f'text-anchor="end">{escape(_tick_label(ylab))}</text>')
        out.append(f'<line x1="{MARGIN_L}" x2="{MARGIN_L + pw}" y1="{_fmt(sy(fy))}" '
                   f'y2="{_fmt(sy(fy))}" stroke="#ddd"/>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.0f}" y="{HEIGHT - 10}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    ytitle = ylabel + (" (log scale)" if log_y else "")
    out.append(f'<text x="15" y="{MARGIN_T + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {MARGIN_T + ph / 2:.0f})">{escape(ytitle)}</text>')
    for i, (label, pts) in enumerate(cleaned):
        color = COLORS[i % len(COLORS)]
        if pts:
            path = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = MARGIN_T + 15 + 18 * i
        lx = MARGIN_L + pw + 10
        out.append(f'<line x1="{lx}" x2="{lx + 20}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 25}" y="{ly + 4}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
