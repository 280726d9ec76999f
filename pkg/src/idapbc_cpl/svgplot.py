"""Tiny self-contained SVG line plots (axes, polylines, markers, legend).

Plots are conveniences; the CSV files are the authoritative output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22")

_W, _H = 640, 300
_ML, _MR, _MT, _MB = 70, 130, 30, 45


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    """Round tick positions covering ``[lo, hi]``."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.6g}"


@dataclass
class Plot:
    """One panel: call :meth:`line`, :meth:`marker`, :meth:`vline`, then render."""

    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    lines: list = field(default_factory=list)
    markers: list = field(default_factory=list)
    vlines: list = field(default_factory=list)
    hlines: list = field(default_factory=list)

    def line(self, x, y, label: str = "", color: str | None = None, max_points: int = 2000):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.size > max_points:
            idx = np.unique(np.linspace(0, x.size - 1, max_points).astype(int))
            x, y = x[idx], y[idx]
        color = color or PALETTE[len(self.lines) % len(PALETTE)]
        self.lines.append((x, y, label, color))

    def marker(self, x: float, y: float, label: str = "", shape: str = "circle", color="#000"):
        self.markers.append((x, y, label, shape, color))

    def vline(self, x: float, label: str = "", color="#888"):
        self.vlines.append((x, label, color))

    def hline(self, y: float, label: str = "", color="#888"):
        self.hlines.append((y, label, color))

    def _limits(self):
        xs = [a for x, *_ in self.lines for a in (np.nanmin(x), np.nanmax(x)) if x.size]
        ys = [a for _, y, *_ in self.lines for a in (np.nanmin(y), np.nanmax(y)) if y.size]
        xs += [m[0] for m in self.markers] + [v[0] for v in self.vlines]
        ys += [m[1] for m in self.markers] + [h[0] for h in self.hlines]
        xs = [v for v in xs if math.isfinite(v)] or [0.0, 1.0]
        ys = [v for v in ys if math.isfinite(v)] or [0.0, 1.0]
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        pad = 0.05 * (y1 - y0) if y1 > y0 else max(abs(y0) * 0.01, 0.5)
        return x0, x1, y0 - pad, y1 + pad

    def render(self, dy: float = 0.0) -> str:
        x0, x1, y0, y1 = self._limits()
        pw, ph = _W - _ML - _MR, _H - _MT - _MB

        def X(v):
            return _ML + (v - x0) / (x1 - x0) * pw

        def Y(v):
            return dy + _MT + (1 - (v - y0) / (y1 - y0)) * ph

        out = [f'<rect x="{_ML}" y="{dy + _MT}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
        for t in nice_ticks(x0, x1):
            out.append(f'<line x1="{X(t):.2f}" y1="{dy + _MT + ph}" x2="{X(t):.2f}" '
                       f'y2="{dy + _MT + ph + 5}" stroke="#000"/>')
            out.append(f'<text x="{X(t):.2f}" y="{dy + _MT + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
        for t in nice_ticks(y0, y1):
            out.append(f'<line x1="{_ML - 5}" y1="{Y(t):.2f}" x2="{_ML}" y2="{Y(t):.2f}" stroke="#000"/>')
            out.append(f'<text x="{_ML - 8}" y="{Y(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
        out.append(f'<text x="{_ML + pw / 2}" y="{dy + _H - 8}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="16" y="{dy + _MT + ph / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {dy + _MT + ph / 2})">{escape(self.ylabel)}</text>')
        if self.title:
            out.append(f'<text x="{_ML + pw / 2}" y="{dy + 18}" text-anchor="middle" '
                       f'font-weight="bold">{escape(self.title)}</text>')
        for v, label, color in self.vlines:
            out.append(f'<line x1="{X(v):.2f}" y1="{dy + _MT}" x2="{X(v):.2f}" y2="{dy + _MT + ph}" '
                       f'stroke="{color}" stroke-dasharray="4 3"/>')
            if label:
                out.append(f'<text x="{X(v) + 3:.2f}" y="{dy + _MT + 12}">{escape(label)}</text>')
        for v, label, color in self.hlines:
            out.append(f'<line x1="{_ML}" y1="{Y(v):.2f}" x2="{_ML + pw}" y2="{Y(v):.2f}" '
                       f'stroke="{color}" stroke-dasharray="4 3"/>')
        out.append(f'<clipPath id="c{int(dy)}"><rect x="{_ML}" y="{dy + _MT}" width="{pw}" height="{ph}"/></clipPath>')
        legend = []
        for x, y, label, color in self.lines:
            ok = np.isfinite(x) & np.isfinite(y)
            pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x[ok], y[ok]))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2" '
                       f'clip-path="url(#c{int(dy)})"/>')
            if label:
                legend.append((label, color))
        for x, y, label, shape, color in self.markers:
            if shape == "cross":
                out.append(f'<path d="M{X(x) - 5:.2f},{Y(y) - 5:.2f} l10,10 m0,-10 l-10,10" '
                           f'stroke="{color}" stroke-width="2"/>')
            else:
                out.append(f'<circle cx="{X(x):.2f}" cy="{Y(y):.2f}" r="3.5" fill="{color}"/>')
            if label:
                out.append(f'<text x="{X(x) + 6:.2f}" y="{Y(y) - 6:.2f}">{escape(label)}</text>')
        for i, (label, color) in enumerate(legend):
            ly = dy + _MT + 8 + 16 * i
            out.append(f'<line x1="{_W - _MR + 10}" y1="{ly}" x2="{_W - _MR + 30}" y2="{ly}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{_W - _MR + 34}" y="{ly + 4}">{escape(label)}</text>')
        return "\n".join(out)


def render(panels: list[Plot]) -> str:
    """Stack panels vertically into one SVG document."""
    height = _H * len(panels)
    body = "\n".join(p.render(dy=i * _H) for i, p in enumerate(panels))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{height}" '
            f'viewBox="0 0 {_W} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="100%" height="100%" fill="#fff"/>\n{body}\n</svg>\n')


def save(panels, path) -> None:
    if isinstance(panels, Plot):
        panels = [panels]
    Path(path).write_text(render(panels))
