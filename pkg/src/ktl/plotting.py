"""Dependency-free, byte-deterministic SVG line plots (CED curves, sweeps)."""
from __future__ import annotations

from xml.sax.saxutils import escape

__all__ = ["plot_ced", "plot_lines"]

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
_W, _H = 480, 360
_L, _R, _T, _B = 60, 20, 30, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg(series: dict, xlabel: str, ylabel: str, title: str, ymin=None, ymax=None) -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0 = min(ys) if ymin is None else ymin
    y1 = max(ys) if ymax is None else ymax
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = _W - _L - _R, _H - _T - _B

    def sx(x):
        return _L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return _T + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{_L}" y1="{_T + ph}" x2="{_L + pw}" y2="{_T + ph}" stroke="black"/>',
        f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_T + ph}" stroke="black"/>',
    ]
    for i in range(6):
        xv = x0 + (x1 - x0) * i / 5
        yv = y0 + (y1 - y0) * i / 5
        out.append(f'<text x="{_fmt(sx(xv))}" y="{_T + ph + 15}" text-anchor="middle" '
                   f'font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{_L - 5}" y="{_fmt(sy(yv) + 3)}" text-anchor="end" '
                   f'font-size="10">{yv:.3g}</text>')
    out.append(f'<text x="{_L + pw / 2:.1f}" y="{_H - 10}" text-anchor="middle" '
               f'font-size="11">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{_T + ph / 2:.1f}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 14 {_T + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, pts) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = _T + 12 + 14 * k
        out.append(f'<line x1="{_L + pw - 110}" y1="{ly}" x2="{_L + pw - 95}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_L + pw - 90}" y="{ly + 4}" font-size="10">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_ced(report, title: str = "Cumulative error distribution") -> str:
    """SVG of one or more CED curves.

    ``report`` is an :class:`~ktl.evaluation.EvalReport` (forward curve, plus
    backward when present) or a mapping ``name -> [(threshold, fraction), ...]``.
    """
    if hasattr(report, "ced"):
        series = {"forward": report.ced}
        if getattr(report, "ced_backward", None):
            series["backward"] = report.ced_backward
    else:
        series = dict(report)
    series = {k: list(v) for k, v in series.items() if len(v)}
    if not series:
        raise ValueError("nothing to plot: empty CED")
    for pts in series.values():
        if any(not 0.0 <= f <= 1.0 for _, f in pts):
            raise ValueError("CED fractions must lie in [0, 1]")
    return _svg(series, "NME (%)", "fraction of landmarks", title, ymin=0.0, ymax=1.0)


def plot_lines(series: dict, xlabel: str, ylabel: str, title: str) -> str:
    series = {k: list(v) for k, v in series.items() if len(v)}
    if not series:
        raise ValueError("nothing to plot")
    return _svg(series, xlabel, ylabel, title)
