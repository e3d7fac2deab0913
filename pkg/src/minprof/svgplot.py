"""Dependency-free SVG line charts with a shaded +/- std band per series.

Output is deterministic: numbers are written with fixed precision and the
plotted data is embedded as CSV inside the document's ``<metadata>``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 55}


@dataclass
class Series:
    label: str
    x: list
    mean: list
    std: list
    dashed: bool = False

    def __post_init__(self):
        if not (len(self.x) == len(self.mean) == len(self.std)):
            raise ValueError(f"series {self.label!r}: x, mean and std lengths differ")


def series_csv(series) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "x", "mean", "std"])
    for s in series:
        for x, m, sd in zip(s.x, s.mean, s.std):
            w.writerow([s.label, _num(x), _num(m), _num(sd)])
    return buf.getvalue()


def _num(v) -> str:
    return f"{float(v):.6g}"


def _f(v: float) -> str:
    return f"{v:.2f}"


def _linear_ticks(lo: float, hi: float, n: int = 5) -> list:
    step = (hi - lo) / n
    return [lo + i * step for i in range(n + 1)]


def line_band_svg(series, title: str = "", x_label: str = "", y_label: str = "accuracy",
                  log_x: bool = False, y_range=(0.0, 1.0), x_range=None, x_format=None) -> str:
    """Render the series to an SVG document string."""
    series = list(series)
    xs = [float(x) for s in series for x in s.x]
    if x_range is None:
        x_range = (min(xs), max(xs)) if xs else (0.0, 1.0)
    x_lo, x_hi = x_range
    if log_x:
        if x_lo <= 0:
            raise ValueError("log-scaled axis needs positive x values")
        x_lo, x_hi = 10 ** math.floor(math.log10(x_lo)), 10 ** math.ceil(math.log10(x_hi))
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = y_range
    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def tx(x):
        if log_x:
            u = (math.log10(x) - math.log10(x_lo)) / (math.log10(x_hi) - math.log10(x_lo))
        else:
            u = (x - x_lo) / (x_hi - x_lo)
        return left + u * pw

    def ty(y):
        y = min(max(y, y_lo), y_hi)
        return top + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    fmt = x_format or (lambda v: f"{v:g}")
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f"<metadata><![CDATA[\n{series_csv(series)}]]></metadata>",
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_f(left + pw / 2)}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')

    if log_x:
        xticks = [10 ** e for e in range(round(math.log10(x_lo)), round(math.log10(x_hi)) + 1)]
    else:
        xticks = _linear_ticks(x_lo, x_hi)
    for t in xticks:
        px = tx(t)
        out.append(f'<line x1="{_f(px)}" y1="{top}" x2="{_f(px)}" y2="{top + ph}" stroke="#e0e0e0"/>')
        label = f"1e{round(math.log10(t))}" if log_x else fmt(t)
        out.append(f'<text x="{_f(px)}" y="{top + ph + 18}" text-anchor="middle">{escape(label)}</text>')
    for t in _linear_ticks(y_lo, y_hi):
        py = ty(t)
        out.append(f'<line x1="{left}" y1="{_f(py)}" x2="{left + pw}" y2="{_f(py)}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 8}" y="{_f(py + 4)}" text-anchor="end">{t:.2f}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    if x_label:
        out.append(f'<text x="{_f(left + pw / 2)}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    if y_label:
        out.append(f'<text x="16" y="{_f(top + ph / 2)}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {_f(top + ph / 2)})">{escape(y_label)}</text>')

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(zip(map(float, s.x), map(float, s.mean), map(float, s.std)))
        if not pts:
            continue
        upper = [f"{_f(tx(x))},{_f(ty(m + sd))}" for x, m, sd in pts]
        lower = [f"{_f(tx(x))},{_f(ty(m - sd))}" for x, m, sd in reversed(pts)]
        out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_f(tx(x))},{_f(ty(m))}" for x, m, _ in pts)
        dash = ' stroke-dasharray="6 4"' if s.dashed else ""
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
        ly = top + 14 + 18 * i
        lx = left + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
