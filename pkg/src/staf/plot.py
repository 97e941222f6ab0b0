"""Minimal hand-written SVG line charts for per-frame metric CSVs."""
from __future__ import annotations

import csv
import math
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def read_series(path, columns=None):
    """(x values, {column: [y or None]}) from a CSV whose first column is the frame index.

    Rows whose first cell is not an integer (e.g. a trailing ``mean`` row) are skipped.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    cols = [c for c in header[1:] if columns is None or c in columns]
    if columns is not None:
        missing = [c for c in columns if c not in header[1:]]
        if missing:
            raise ValueError(f"{path}: no column(s) {missing}")
    xs, series = [], {c: [] for c in cols}
    for row in body:
        try:
            x = int(row[0])
        except ValueError:
            continue
        xs.append(x)
        for c in cols:
            cell = row[header.index(c)]
            series[c].append(float(cell) if cell != "" else None)
    return xs, series


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(v)
        v += step
    return ticks


def line_chart(xs, series: dict, title: str = "", width: int = 720, height: int = 360) -> str:
    left, right, top, bottom = 64, 150, 36, 44
    pw, ph = width - left - right, height - top - bottom
    ys = [y for vals in series.values() for y in vals if y is not None]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0, 1)
    y_lo, y_hi = (min(0.0, min(ys)), max(ys)) if ys else (0.0, 1.0)
    yt = _nice_ticks(y_lo, y_hi)
    y_lo, y_hi = yt[0], yt[-1]
    x_span = (x_hi - x_lo) or 1
    y_span = (y_hi - y_lo) or 1

    def px(x):
        return left + (x - x_lo) / x_span * pw

    def py(y):
        return top + ph - (y - y_lo) / y_span * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{left}" y="20" font-size="14">{escape(title)}</text>')
    for t in yt:
        y = py(t)
        out.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end">{t:g}</text>')
    for t in _nice_ticks(x_lo, x_hi, 6):
        if x_lo <= t <= x_hi:
            x = px(t)
            out.append(f'<text x="{_fmt(x)}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">frame</text>')
    for i, (name, vals) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        # break the polyline at missing values
        runs, cur = [], []
        for x, y in zip(xs, vals):
            if y is None:
                if cur:
                    runs.append(cur)
                cur = []
            else:
                cur.append(f"{_fmt(px(x))},{_fmt(py(y))}")
        if cur:
            runs.append(cur)
        for run in runs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(run)}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, svg_path, columns=None, title: str = "") -> None:
    xs, series = read_series(csv_path, columns)
    if not series:
        raise ValueError(f"{csv_path}: nothing to plot")
    with open(svg_path, "w") as f:
        f.write(line_chart(xs, series, title))
