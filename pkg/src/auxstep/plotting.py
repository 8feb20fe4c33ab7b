"""Minimal SVG line plots, built directly as XML.

Enough for the two figures this project needs (score vs. task-focusing
weight, score vs. depth-data fraction): axes with tick labels, several
series with optional symmetric error bars, and a legend. No plotting
dependency; output is always well-formed XML.
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

PALETTE = ("#1b6ca8", "#c0392b", "#1e8449", "#8e44ad", "#b7950b", "#34495e")


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]
    yerr: list[float] | None = None
    dash: bool = False
    markers: bool = True

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"series '{self.label}': {len(self.x)} x vs {len(self.y)} y")
        if self.yerr is not None and len(self.yerr) != len(self.y):
            raise ValueError(f"series '{self.label}': error bar count mismatch")
        if not self.x:
            raise ValueError(f"series '{self.label}': empty")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m for m in (1.0, 2.0, 2.5, 5.0, 10.0) if m * mag >= raw), default=10.0) * mag
    first = math.floor(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 0.5 * step:
        if t >= lo - 0.5 * step:
            ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.4g}"


def line_plot(path: str | Path, series: list[Series], title: str = "",
              xlabel: str = "", ylabel: str = "",
              width: int = 640, height: int = 420) -> Path:
    """Render series as an SVG file and return its path."""
    if not series:
        raise ValueError("line_plot: no series")
    xs = [v for s in series for v in s.x]
    ys = []
    for s in series:
        err = s.yerr or [0.0] * len(s.y)
        ys.extend(v - e for v, e in zip(s.y, err))
        ys.extend(v + e for v, e in zip(s.y, err))
    x_ticks = _nice_ticks(min(xs), max(xs))
    y_ticks = _nice_ticks(min(ys), max(ys))
    x0, x1 = min(x_ticks[0], min(xs)), max(x_ticks[-1], max(xs))
    y0, y1 = min(y_ticks[0], min(ys)), max(y_ticks[-1], max(ys))
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5

    left, right, top, bottom = 64, 24, 36, 48

    def px(v: float) -> float:
        return left + (v - x0) / (x1 - x0) * (width - left - right)

    def py(v: float) -> float:
        return height - bottom - (v - y0) / (y1 - y0) * (height - top - bottom)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")

    def text(x: float, y: float, s: str, size: int = 12, anchor: str = "middle", **extra):
        el = ET.SubElement(svg, "text", x=f"{x:.1f}", y=f"{y:.1f}",
                           fill="#222", **{"font-size": str(size),
                                           "font-family": "sans-serif",
                                           "text-anchor": anchor}, **extra)
        el.text = s

    axis_style = {"stroke": "#222", "stroke-width": "1"}
    ET.SubElement(svg, "line", x1=str(left), y1=f"{py(y0):.1f}",
                  x2=str(width - right), y2=f"{py(y0):.1f}", **axis_style)
    ET.SubElement(svg, "line", x1=str(left), y1=f"{py(y0):.1f}",
                  x2=str(left), y2=f"{py(y1):.1f}", **axis_style)
    for t in x_ticks:
        if not x0 <= t <= x1:
            continue
        ET.SubElement(svg, "line", x1=f"{px(t):.1f}", y1=f"{py(y0):.1f}",
                      x2=f"{px(t):.1f}", y2=f"{py(y0) + 5:.1f}", **axis_style)
        text(px(t), py(y0) + 18, _fmt(t), size=11)
    for t in y_ticks:
        if not y0 <= t <= y1:
            continue
        ET.SubElement(svg, "line", x1=f"{left - 5:.1f}", y1=f"{py(t):.1f}",
                      x2=str(left), y2=f"{py(t):.1f}", **axis_style)
        text(left - 8, py(t) + 4, _fmt(t), size=11, anchor="end")

    legend_row = 0
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        stroke = {"stroke-width": "1.8"}
        if s.dash:
            stroke["stroke-dasharray"] = "6 4"
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(s.x, s.y))
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=color, **stroke)
        if s.markers:
            for x, y in zip(s.x, s.y):
                ET.SubElement(svg, "circle", cx=f"{px(x):.1f}", cy=f"{py(y):.1f}",
                              r="2.6", fill=color)
        if s.yerr is not None:
            for x, y, e in zip(s.x, s.y, s.yerr):
                ET.SubElement(svg, "line", x1=f"{px(x):.1f}", y1=f"{py(y - e):.1f}",
                              x2=f"{px(x):.1f}", y2=f"{py(y + e):.1f}",
                              stroke=color, **{"stroke-width": "1.2"})
        if not s.label:
            continue
        ly = top + 16 * legend_row
        legend_row += 1
        ET.SubElement(svg, "line", x1=str(width - right - 130), y1=str(ly),
                      x2=str(width - right - 106), y2=str(ly),
                      stroke=color, **stroke)
        text(width - right - 100, ly + 4, s.label, size=11, anchor="start")

    if title:
        text(width / 2, 20, title, size=14)
    if xlabel:
        text(left + (width - left - right) / 2, height - 12, xlabel)
    if ylabel:
        el = ET.SubElement(svg, "text", x="16", y=f"{top + (height - top - bottom) / 2:.1f}",
                           fill="#222",
                           transform=f"rotate(-90 16 {top + (height - top - bottom) / 2:.1f})",
                           **{"font-size": "12", "font-family": "sans-serif",
                              "text-anchor": "middle"})
        el.text = ylabel

    path = Path(path)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path
