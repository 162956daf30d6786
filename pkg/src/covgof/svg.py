"""Minimal static SVG line charts (no plotting dependency).

Charts are built with ElementTree, so the output is well-formed XML by
construction.  Each plotted series appears once in the legend.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#000000", "#2ca02c", "#9467bd", "#8c564b")

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 70, 170, 40, 55  # margins: room for legend on the right


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw)) if raw > 0 else 1.0
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if (hi - lo) / step <= n + 0.5:
            break
    start = np.ceil(lo / step) * step
    vals = np.arange(start, hi + 0.5 * step, step)
    return vals


def line_chart(series, title: str, xlabel: str, ylabel: str, path,
               y_range: tuple[float, float] | None = None) -> None:
    """Write a line chart; ``series`` is a list of (name, xs, ys)."""
    xs_all = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    ys_all = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_range is None:
        y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
        pad = 0.05 * max(y_hi - y_lo, 1e-9)
        y_lo, y_hi = y_lo - pad, y_hi + pad
    else:
        y_lo, y_hi = y_range

    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def px(x):
        return _ML + pw * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return _MT + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(_W), "height": str(_H),
        "viewBox": f"0 0 {_W} {_H}",
    })
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(_W),
                                "height": str(_H), "fill": "white"})
    ET.SubElement(svg, "text", {
        "x": str(_ML + pw / 2), "y": "24", "text-anchor": "middle",
        "font-family": "sans-serif", "font-size": "16",
    }).text = title

    axis = {"stroke": "#333333", "stroke-width": "1"}
    ET.SubElement(svg, "line", {"x1": str(_ML), "y1": str(_MT + ph),
                                "x2": str(_ML + pw), "y2": str(_MT + ph),
                                **axis})
    ET.SubElement(svg, "line", {"x1": str(_ML), "y1": str(_MT),
                                "x2": str(_ML), "y2": str(_MT + ph), **axis})

    for xv in _ticks(x_lo, x_hi):
        ET.SubElement(svg, "line", {
            "x1": str(px(xv)), "y1": str(_MT + ph),
            "x2": str(px(xv)), "y2": str(_MT + ph + 5), **axis})
        ET.SubElement(svg, "text", {
            "x": str(px(xv)), "y": str(_MT + ph + 20),
            "text-anchor": "middle", "font-family": "sans-serif",
            "font-size": "11"}).text = f"{xv:g}"
    for yv in _ticks(y_lo, y_hi):
        ET.SubElement(svg, "line", {
            "x1": str(_ML - 5), "y1": str(py(yv)),
            "x2": str(_ML), "y2": str(py(yv)), **axis})
        ET.SubElement(svg, "text", {
            "x": str(_ML - 9), "y": str(py(yv) + 4),
            "text-anchor": "end", "font-family": "sans-serif",
            "font-size": "11"}).text = f"{yv:g}"

    ET.SubElement(svg, "text", {
        "x": str(_ML + pw / 2), "y": str(_H - 12), "text-anchor": "middle",
        "font-family": "sans-serif", "font-size": "13"}).text = xlabel
    ET.SubElement(svg, "text", {
        "x": "18", "y": str(_MT + ph / 2), "text-anchor": "middle",
        "font-family": "sans-serif", "font-size": "13",
        "transform": f"rotate(-90 18 {_MT + ph / 2})"}).text = ylabel

    legend_x = _ML + pw + 18
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(
            f"{px(float(x)):.2f},{py(float(y)):.2f}"
            for x, y in zip(xs, ys)
        )
        ET.SubElement(svg, "polyline", {
            "points": pts, "fill": "none", "stroke": color,
            "stroke-width": "2"})
        for x, y in zip(xs, ys):
            ET.SubElement(svg, "circle", {
                "cx": f"{px(float(x)):.2f}", "cy": f"{py(float(y)):.2f}",
                "r": "3", "fill": color})
        ly = _MT + 12 + 22 * i
        ET.SubElement(svg, "line", {
            "x1": str(legend_x), "y1": str(ly),
            "x2": str(legend_x + 24), "y2": str(ly),
            "stroke": color, "stroke-width": "2"})
        ET.SubElement(svg, "text", {
            "x": str(legend_x + 30), "y": str(ly + 4),
            "font-family": "sans-serif", "font-size": "12"}).text = name

    tree = ET.ElementTree(svg)
    ET.indent(tree)
    tree.write(Path(path), encoding="utf-8", xml_declaration=True)
