"""Static SVG line charts of convergence traces (log-scale error axis)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .pcg import ConvergenceTrace, read_trace_csv

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=170, top=30, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]


def series_label(trace: ConvergenceTrace, fallback: str) -> str:
    md = trace.metadata
    if "precond" in md and "epsilon" in md:
        return f"{md['precond']} eps={float(md['epsilon']):g}"
    return fallback


def load_series(paths: Sequence, x_key: str = "iterations") -> list[Series]:
    out = []
    for p in paths:
        tr = read_trace_csv(p)
        if not tr.iterations:
            raise ValueError(f"{p}: trace has no rows")
        x = tr.iterations if x_key == "iterations" else tr.flops
        out.append(Series(series_label(tr, Path(p).stem), [float(v) for v in x], tr.inf_errors))
    return out


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi * (1 + 1e-12):
        ticks.append(t)
        t += step
    return ticks


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-2):
        return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-").replace("e+", "e")
    return f"{v:g}"


def svg_chart(series: Sequence[Series], xlabel: str, ylabel: str = "inf-norm error",
              title: str = "") -> str:
    """One line per series on a log10 y axis; legend follows input order."""
    if not series:
        raise ValueError("no series to plot")
    tiny = 1e-300
    xs = [v for s in series for v in s.x]
    ys = [math.log10(max(v, tiny)) for s in series for v in s.y]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = math.floor(min(ys)), math.ceil(max(ys))
    if y1 == y0:
        y1 = y0 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(ly):
        return MARGIN["top"] + (y1 - ly) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for t in _nice_ticks(x0, x1):
        x = px(t)
        parts.append(f'<line x1="{x:.2f}" y1="{MARGIN["top"] + ph}" x2="{x:.2f}" '
                     f'y2="{MARGIN["top"] + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{MARGIN["top"] + ph + 16}" '
                     f'text-anchor="middle">{_fmt(t)}</text>')
    step = max(1, (y1 - y0) // 8)
    for e in range(y0, y1 + 1, step):
        y = py(e)
        parts.append(f'<line x1="{MARGIN["left"]}" y1="{y:.2f}" x2="{MARGIN["left"] + pw}" '
                     f'y2="{y:.2f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{MARGIN["left"] - 6}" y="{y + 4:.2f}" '
                     f'text-anchor="end">1e{e}</text>')
    parts.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" '
                 f'text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')

    for k, s in enumerate(series):
        colour = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(math.log10(max(y, tiny))):.2f}" for x, y in zip(s.x, s.y))
        parts.append(f'<polyline class="series" fill="none" stroke="{colour}" '
                     f'stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN["top"] + 10 + 16 * k
        lx = MARGIN["left"] + pw + 10
        parts.append(f'<g class="legend-entry"><line x1="{lx}" y1="{ly}" x2="{lx + 20}" '
                     f'y2="{ly}" stroke="{colour}" stroke-width="2"/>'
                     f'<text x="{lx + 26}" y="{ly + 4}">{escape(s.label)}</text></g>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_plots(paths: Sequence, out_dir, stem: str = "convergence") -> list[Path]:
    """Error-vs-iterations and error-vs-flops charts from trace CSV files."""
    if not paths:
        raise ValueError("no trace files to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, label in (("iterations", "iterations"), ("flops", "flops")):
        svg = svg_chart(load_series(paths, key), label, title=f"error vs {label}")
        path = out / f"{stem}_{key}.svg"
        path.write_text(svg)
        written.append(path)
    return written
