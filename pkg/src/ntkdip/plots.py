"""Minimal deterministic SVG line plots (axes, ticks, polylines, legend)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=160, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float, log: bool) -> str:
    if log:
        return f"1e{int(round(v))}"
    if v == 0:
        return "0"
    a = abs(v)
    return f"{v:.3g}" if 1e-3 <= a < 1e5 else f"{v:.1e}"


def _ticks(lo: float, hi: float, log: bool, n: int = 5) -> list[float]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, int(math.ceil((b - a) / n)))
        return [float(v) for v in range(a, b + 1, step) if lo - 1e-9 <= v <= hi + 1e-9]
    span = hi - lo
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * span:
        out.append(0.0 if abs(v) < 1e-12 * span else v)
        v += step
    return out


def line_plot(series: dict, title: str, xlabel: str, ylabel: str,
              logx: bool = False, logy: bool = False) -> str:
    """Render ``{name: (xs, ys)}`` as an SVG document string.

    Non-finite points (and non-positive ones on log axes) are dropped; series
    are drawn in sorted-name order so the output depends only on the data.
    """
    cleaned = {}
    for name in sorted(series):
        xs, ys = (np.asarray(v, dtype=float) for v in series[name])
        ok = np.isfinite(xs) & np.isfinite(ys)
        if logx:
            ok &= xs > 0
        if logy:
            ok &= ys > 0
        xs, ys = xs[ok], ys[ok]
        if logx:
            xs = np.log10(xs)
        if logy:
            ys = np.log10(ys)
        cleaned[name] = (xs, ys)
    allx = np.concatenate([v[0] for v in cleaned.values()] or [np.zeros(0)])
    ally = np.concatenate([v[1] for v in cleaned.values()] or [np.zeros(0)])
    if allx.size == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN["top"] + (y1 - v) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - MARGIN["right"] / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1, logx):
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{MARGIN["top"] + ph}" x2="{_fmt(x)}" y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{_tick_label(t, logx)}</text>')
    for t in _ticks(y0, y1, logy):
        y = sy(t)
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{_fmt(y)}" x2="{MARGIN["left"]}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(y + 4)}" text-anchor="end">{_tick_label(t, logy)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, (name, (xs, ys)) in enumerate(cleaned.items()):
        color = PALETTE[i % len(PALETTE)]
        if xs.size:
            pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(xs, ys))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN["top"] + 12 + 18 * i
        lx = MARGIN["left"] + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plot(path, series: dict, title: str, xlabel: str, ylabel: str, **kw) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(line_plot(series, title, xlabel, ylabel, **kw))
