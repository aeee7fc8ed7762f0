"""Dependency-free SVG figures.

Every figure is a pure function of its input data, numbers are written with a
fixed precision, and element order follows input order, so identical inputs
give identical bytes.
"""
from __future__ import annotations

import logging
import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import UsageError

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 480
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 30, 55
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
# viridis anchors, interpolated linearly for the heatmap
_CMAP = ((0.267, 0.005, 0.329), (0.229, 0.322, 0.546), (0.128, 0.567, 0.551), (0.369, 0.789, 0.383), (0.993, 0.906, 0.144))


def _f(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _label(v: float) -> str:
    return f"{v:.3g}"


class _Axes:
    def __init__(self, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.parts: list[str] = []
        self.legend: list[tuple[str, str, str]] = []

    def px(self, x: float) -> float:
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)

    def py(self, y: float) -> float:
        return HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)

    def frame(self) -> list[str]:
        x_left, x_right, y_top, y_bottom = LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM
        out = [f'<g class="axes" stroke="#000" stroke-width="1" fill="none">'
               f'<rect x="{x_left}" y="{y_top}" width="{x_right - x_left}" height="{y_bottom - y_top}"/></g>']
        ticks = ['<g class="ticks" font-size="11" font-family="sans-serif">']
        for v in _nice_ticks(self.x0, self.x1):
            x = self.px(v)
            ticks.append(f'<line x1="{_f(x)}" y1="{y_bottom}" x2="{_f(x)}" y2="{y_bottom + 5}" stroke="#000"/>')
            ticks.append(f'<text x="{_f(x)}" y="{y_bottom + 18}" text-anchor="middle">{_label(v)}</text>')
        for v in _nice_ticks(self.y0, self.y1):
            y = self.py(v)
            ticks.append(f'<line x1="{x_left - 5}" y1="{_f(y)}" x2="{x_left}" y2="{_f(y)}" stroke="#000"/>')
            ticks.append(f'<text x="{x_left - 8}" y="{_f(y + 4)}" text-anchor="end">{_label(v)}</text>')
        ticks.append("</g>")
        labels = [
            f'<text class="title" x="{(x_left + x_right) / 2:.1f}" y="{y_top - 10}" text-anchor="middle" font-size="14" font-family="sans-serif">{escape(self.title)}</text>',
            f'<text class="xlabel" x="{(x_left + x_right) / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle" font-size="12" font-family="sans-serif">{escape(self.xlabel)}</text>',
            f'<text class="ylabel" transform="translate(18,{(y_top + y_bottom) / 2:.1f}) rotate(-90)" text-anchor="middle" font-size="12" font-family="sans-serif">{escape(self.ylabel)}</text>',
        ]
        return out + ticks + labels

    def legend_svg(self) -> list[str]:
        if not self.legend:
            return []
        out = ['<g class="legend" font-size="11" font-family="sans-serif">']
        x = WIDTH - RIGHT + 12
        for i, (name, color, shape) in enumerate(self.legend):
            y = TOP + 12 + 18 * i
            if shape == "line":
                out.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" stroke="{color}" stroke-width="2"/>')
            else:
                out.append(f'<circle cx="{x + 9}" cy="{y}" r="4" fill="{color}"/>')
            out.append(f'<text x="{x + 24}" y="{y + 4}">{escape(name)}</text>')
        out.append("</g>")
        return out

    def render(self) -> str:
        body = self.frame() + self.parts + self.legend_svg()
        head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
        return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>', *body, "</svg>"]) + "\n"


def _limits(values: Sequence[float], pad: float = 0.05) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    span = hi - lo
    return lo - pad * span, hi + pad * span


def line_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], title="", xlabel="", ylabel="", zero_line=False) -> str:
    """One polyline per named series (each an ``(xs, ys)`` pair)."""
    series = {k: v for k, v in series.items() if len(v[0])}
    if not series:
        log.warning("no data to plot; writing empty axes")
    xs = [x for s in series.values() for x in s[0]]
    ys = [y for s in series.values() for y in s[1]] + ([0.0] if zero_line else [])
    ax = _Axes(_limits(xs, 0.0) if xs else (0.0, 1.0), _limits(ys), title, xlabel, ylabel)
    if zero_line:
        y = _f(ax.py(0.0))
        ax.parts.append(f'<line class="zero" x1="{LEFT}" y1="{y}" x2="{WIDTH - RIGHT}" y2="{y}" stroke="#888" stroke-dasharray="4 3"/>')
    for i, (name, (sx, sy)) in enumerate(series.items()):
        if len(sx) != len(sy):
            raise UsageError(f"series {name!r} has {len(sx)} x values and {len(sy)} y values")
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(ax.px(x))},{_f(ax.py(y))}" for x, y in zip(sx, sy))
        ax.parts.append(f'<polyline class="series" data-name="{escape(name)}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ax.legend.append((name, color, "line"))
    return ax.render()


def pair_curve_plot(curves: Sequence[dict], title="Linear interpolation") -> str:
    """q_pair against lambda, one polyline per curve, with the zero line dashed."""
    series = {}
    for i, c in enumerate(curves):
        name = "pair {}-{}".format(*c.get("pair", (0, i + 1)))
        series[name] = (c["lambdas"], c["q_pair"])
    return line_plot(series, title, "lambda", "q_pair (points)", zero_line=True)


def scatter_plot(points: Sequence[dict], title="", xlabel="", ylabel="") -> str:
    """Points ``{x, y, label}``; one legend entry per distinct label."""
    if not points:
        log.warning("no data to plot; writing empty axes")
    ax = _Axes(_limits([p["x"] for p in points]), _limits([p["y"] for p in points]), title, xlabel, ylabel)
    colors: dict[str, str] = {}
    for p in points:
        label = str(p.get("label", ""))
        if label not in colors:
            colors[label] = PALETTE[len(colors) % len(PALETTE)]
            ax.legend.append((label, colors[label], "dot"))
        ax.parts.append(f'<circle class="point" cx="{_f(ax.px(p["x"]))}" cy="{_f(ax.py(p["y"]))}" r="4" fill="{colors[label]}"/>')
    return ax.render()


def ablation_plot(x: Sequence[float], series: dict[str, Sequence[float]], title="", xlabel="t", ylabel="") -> str:
    return line_plot({k: (list(x), list(v)) for k, v in series.items()}, title, xlabel, ylabel)


def _color(v: float) -> str:
    v = min(max(v, 0.0), 1.0) * (len(_CMAP) - 1)
    i = min(int(v), len(_CMAP) - 2)
    f = v - i
    rgb = [round(255 * (a + f * (b - a))) for a, b in zip(_CMAP[i], _CMAP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def plane_plot(grid: dict, value: str = "loss", title="") -> str:
    """Heatmap of a plane grid (``PlaneGrid.to_json()``) with the anchors marked."""
    if value not in ("loss", "acc"):
        raise UsageError(f"unknown plane value {value!r}")
    alphas, betas = np.asarray(grid["alphas"], float), np.asarray(grid["betas"], float)
    z = np.asarray(grid[value], float)
    if z.shape != (len(betas), len(alphas)):
        raise UsageError(f"grid values have shape {z.shape}, expected {(len(betas), len(alphas))}")
    da = (alphas[1] - alphas[0]) if len(alphas) > 1 else 1.0
    db = (betas[1] - betas[0]) if len(betas) > 1 else 1.0
    ax = _Axes((alphas[0] - da / 2, alphas[-1] + da / 2), (betas[0] - db / 2, betas[-1] + db / 2), title or f"plane {value}", "alpha", "beta")
    finite = z[np.isfinite(z)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    cells = ['<g class="cells">']
    for j, b in enumerate(betas):
        for i, a in enumerate(alphas):
            x0, x1 = ax.px(a - da / 2), ax.px(a + da / 2)
            y0, y1 = ax.py(b + db / 2), ax.py(b - db / 2)
            fill = _color((z[j, i] - lo) / span) if math.isfinite(z[j, i]) else "#ffffff"
            cells.append(f'<rect class="cell" x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" height="{_f(y1 - y0)}" fill="{fill}"/>')
    cells.append("</g>")
    ax.parts.extend(cells)
    for k, anchor in enumerate(grid.get("anchors", [])):
        cx, cy = _f(ax.px(anchor["alpha"])), _f(ax.py(anchor["beta"]))
        ax.parts.append(f'<circle class="anchor" cx="{cx}" cy="{cy}" r="5" fill="#fff" stroke="#000" stroke-width="2"/>')
        ax.parts.append(f'<text x="{cx}" y="{_f(ax.py(anchor["beta"]) - 9)}" text-anchor="middle" font-size="11" font-family="sans-serif">θ{k + 1}</text>')
    ax.legend.append((f"{value} {lo:.3g}", _color(0.0), "dot"))
    ax.legend.append((f"{value} {hi:.3g}", _color(1.0), "dot"))
    return ax.render()
