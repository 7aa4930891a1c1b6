"""Static SVG figures written by hand; no plotting dependency."""

from __future__ import annotations

from typing import Dict, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .geometry import Court

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _svg(width: float, height: float, body: Sequence[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" viewBox="0 0 {_f(width)} {_f(height)}">'
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head, *body, "</svg>"]) + "\n"


def _text(x, y, s, size=12, anchor="start", extra=""):
    return f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>'


def court_panel(court: Court, tracks: Sequence[dict], attention: Optional[dict] = None, scale: float = 18.0, title: str = "") -> tuple:
    """Court seen from above (court length runs left to right).

    ``tracks`` entries: ``{"positions": (T, 2), "label": str, "dashed": bool,
    "color": int}``. Segment opacity grows with time along each track.
    """
    pad = 30.0
    W, H = court.length * scale + 2 * pad, court.width * scale + 2 * pad + 20

    def xy(p):
        return pad + p[1] * scale, pad + 20 + (court.width - p[0]) * scale

    out = [
        f'<rect x="{_f(pad)}" y="{_f(pad + 20)}" width="{_f(court.length * scale)}" height="{_f(court.width * scale)}" fill="#f4efe6" stroke="#444" stroke-width="2"/>',
        f'<line x1="{_f(pad + court.length * scale / 2)}" y1="{_f(pad + 20)}" x2="{_f(pad + court.length * scale / 2)}" y2="{_f(pad + 20 + court.width * scale)}" stroke="#999"/>',
    ]
    if title:
        out.append(_text(pad, pad + 10, title, 14))

    def polyline(P, color, dashed, width=2.5):
        P = np.asarray(P, dtype=float)
        n = len(P) - 1
        for k in range(n):
            (x1, y1), (x2, y2) = xy(P[k]), xy(P[k + 1])
            op = 0.2 + 0.8 * (k + 1) / n
            dash = ' stroke-dasharray="6 4"' if dashed else ""
            out.append(
                f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" stroke="{color}" stroke-opacity="{op:.3f}" stroke-width="{width}"{dash}/>'
            )
        x0, y0 = xy(P[0])
        out.append(f'<circle cx="{_f(x0)}" cy="{_f(y0)}" r="4" fill="{color}"/>')

    for tr in tracks:
        polyline(tr["positions"], PALETTE[tr.get("color", 0) % len(PALETTE)], tr.get("dashed", False))
    if attention is not None:
        polyline(attention["positions"], "#000000", attention.get("dashed", False), 1.5)
    return W, H, out


def court_overlay_svg(court: Court, predicted: Sequence, truth: Sequence = (), attention=None, title: str = "") -> str:
    """Predicted (solid) against ground-truth (dashed) tracks, one color per player."""
    tracks = [{"positions": p, "color": k} for k, p in enumerate(predicted)]
    tracks += [{"positions": t, "color": k, "dashed": True} for k, t in enumerate(truth)]
    att = None if attention is None else {"positions": attention}
    W, H, body = court_panel(court, tracks, att, title=title)
    return _svg(W, H, body)


def line_panel(x, series: Dict[str, Sequence[float]], xlabel: str, ylabel: str, title: str = "", size=(420.0, 280.0)) -> tuple:
    W, H = size
    left, right, top, bottom = 56.0, 16.0, 30.0, 44.0
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    ymax = max([float(np.max(y)) for y in ys if len(y)] + [1e-9]) * 1.1
    xmin, xmax = float(x.min()), float(x.max()) if len(x) > 1 else float(x.min()) + 1.0
    pw, ph = W - left - right, H - top - bottom

    def px(a):
        return left + (a - xmin) / max(xmax - xmin, 1e-12) * pw

    def py(b):
        return top + ph - b / ymax * ph

    out = [
        f'<rect x="{_f(left)}" y="{_f(top)}" width="{_f(pw)}" height="{_f(ph)}" fill="white" stroke="#333"/>',
        _text(left, top - 10, title, 13),
        _text(left + pw / 2, H - 8, xlabel, 12, "middle"),
        _text(14, top + ph / 2, ylabel, 12, "middle", f' transform="rotate(-90 14 {_f(top + ph / 2)})"'),
    ]
    for k in range(5):
        v = ymax * k / 4
        out.append(_text(left - 4, py(v) + 4, f"{v:.1f}", 10, "end"))
        out.append(f'<line x1="{_f(left)}" y1="{_f(py(v))}" x2="{_f(left + pw)}" y2="{_f(py(v))}" stroke="#ddd"/>')
    for v in np.linspace(xmin, xmax, 6):
        out.append(_text(px(v), top + ph + 14, f"{v:.1f}", 10, "middle"))
    for k, (name, y) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(x, np.asarray(y, dtype=float)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(_text(left + pw - 6, top + 14 + 14 * k, name, 11, "end", f' fill="{color}"'))
    return W, H, out


def histogram_panel(edges, bins: Sequence, labels: Sequence[str], title: str = "", size=(420.0, 280.0)) -> tuple:
    """Grouped bars: one normalized histogram per series (None entries skipped)."""
    W, H = size
    left, right, top, bottom = 48.0, 16.0, 30.0, 44.0
    pw, ph = W - left - right, H - top - bottom
    edges = np.asarray(edges, dtype=float)
    nb = len(edges) - 1
    present = [(k, np.asarray(h, dtype=float)) for k, h in enumerate(bins) if h is not None]
    ymax = max([float(h.max()) for _, h in present] + [1e-9]) * 1.1
    out = [
        f'<rect x="{_f(left)}" y="{_f(top)}" width="{_f(pw)}" height="{_f(ph)}" fill="white" stroke="#333"/>',
        _text(left, top - 10, title, 13),
        _text(left + pw / 2, H - 8, "angle to joint attention (deg)", 12, "middle"),
    ]
    group = pw / max(nb, 1)
    bar = group / max(len(present), 1)
    for slot, (k, h) in enumerate(present):
        color = PALETTE[k % len(PALETTE)]
        for b in range(nb):
            hgt = h[b] / ymax * ph
            out.append(
                f'<rect x="{_f(left + b * group + slot * bar)}" y="{_f(top + ph - hgt)}" width="{_f(bar)}" height="{_f(hgt)}" fill="{color}" fill-opacity="0.8"/>'
            )
        out.append(_text(left + pw - 6, top + 14 + 14 * slot, labels[k], 11, "end", f' fill="{color}"'))
    for b in range(0, nb + 1, max(1, nb // 6)):
        out.append(_text(left + b * group, top + ph + 14, f"{edges[b]:.0f}", 10, "middle"))
    return W, H, out


def stack_panels(panels: Sequence[tuple], columns: int = 2) -> str:
    """Lay out ``(W, H, body)`` panels on a grid in one SVG document."""
    if not panels:
        return _svg(10, 10, [])
    cw = max(p[0] for p in panels)
    rows = [panels[i : i + columns] for i in range(0, len(panels), columns)]
    body, y = [], 0.0
    for row in rows:
        rh = max(p[1] for p in row)
        for c, (w, h, items) in enumerate(row):
            body.append(f'<g transform="translate({_f(c * cw)},{_f(y)})">')
            body.extend(items)
            body.append("</g>")
        y += rh
    return _svg(cw * min(columns, len(panels)), y, body)
