"""Standalone SVG line and box plots (no rendering dependency)."""

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
DASHES = ("", "6,3", "2,2", "8,2,2,2")


def _fmt(v):
    return f"{v:.2f}"


class _Frame:
    def __init__(self, xlo, xhi, ylo, yhi):
        if yhi <= ylo:
            pad = abs(ylo) * 0.05 or 1.0
            ylo, yhi = ylo - pad, yhi + pad
        if xhi <= xlo:
            xlo, xhi = xlo - 1, xhi + 1
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi
        left, right, top, bottom = MARGIN
        self.x0, self.x1 = left, WIDTH - right
        self.y0, self.y1 = HEIGHT - bottom, top

    def x(self, v):
        return self.x0 + (v - self.xlo) / (self.xhi - self.xlo) * (self.x1 - self.x0)

    def y(self, v):
        return self.y0 + (v - self.ylo) / (self.yhi - self.ylo) * (self.y1 - self.y0)

    def axes(self, title, xlabel, ylabel):
        out = [
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>',
            f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>',
        ]
        for k in range(5):
            v = self.ylo + (self.yhi - self.ylo) * k / 4
            yy = _fmt(self.y(v))
            out.append(f'<line x1="{self.x0 - 4}" y1="{yy}" x2="{self.x0}" y2="{yy}" stroke="black"/>')
            out.append(f'<text x="{self.x0 - 6}" y="{yy}" font-size="10" text-anchor="end">{v:.3g}</text>')
        cx = (self.x0 + self.x1) / 2
        out.append(f'<text x="{cx}" y="{MARGIN[2] - 8}" font-size="13" text-anchor="middle">{escape(title)}</text>')
        out.append(f'<text x="{cx}" y="{HEIGHT - 10}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(
            f'<text x="14" y="{(self.y0 + self.y1) / 2}" font-size="11" text-anchor="middle" '
            f'transform="rotate(-90 14 {(self.y0 + self.y1) / 2})">{escape(ylabel)}</text>'
        )
        return out


def _write(path, body):
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
    path = Path(path)
    path.write_text("\n".join([head] + body + ["</svg>", ""]))
    return path


def line_plot(series, path, title="", xlabel="step", ylabel="value", x=None):
    """One polyline per named series. ``series`` maps name -> list of y values
    (``None`` entries are skipped). Raises ValueError before writing anything
    if there is nothing to plot."""
    if not series:
        raise ValueError("line_plot: no series given")
    clean = {}
    for name, ys in series.items():
        xs = list(x) if x is not None else list(range(1, len(ys) + 1))
        pts = [(a, float(b)) for a, b in zip(xs, ys) if b is not None]
        if not pts:
            raise ValueError(f"line_plot: series {name!r} is empty")
        clean[name] = pts
    allx = [p[0] for pts in clean.values() for p in pts]
    ally = [p[1] for pts in clean.values() for p in pts]
    if not np.isfinite(ally).all():
        raise ValueError("line_plot: non-finite values")
    fr = _Frame(min(allx), max(allx), min(ally), max(ally))
    body = fr.axes(title, xlabel, ylabel)
    for k, (name, pts) in enumerate(clean.items()):
        color, dash = COLORS[k % len(COLORS)], DASHES[k % len(DASHES)]
        coords = " ".join(f"{_fmt(fr.x(a))},{_fmt(fr.y(b))}" for a, b in pts)
        style = f' stroke-dasharray="{dash}"' if dash else ""
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{style} points="{coords}"/>')
        ly = MARGIN[2] + 14 + 16 * k
        lx = fr.x1 - 120
        body.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}"{style} stroke-width="1.5"/>')
        body.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11">{escape(str(name))}</text>')
    return _write(path, body)


def box_stats(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return {"min": lo, "q1": q1, "median": med, "q3": q3, "max": hi}


def box_plot(groups, path, title="", xlabel="", ylabel="value", labels=None):
    """One box (quartiles, 1.5 IQR whiskers) per group of values."""
    if not groups or any(len(g) == 0 for g in groups):
        raise ValueError("box_plot: every group needs at least one value")
    labels = labels or [str(i) for i in range(len(groups))]
    stats = [box_stats(g) for g in groups]
    lo = min(s["min"] for s in stats)
    hi = max(s["max"] for s in stats)
    fr = _Frame(-0.5, len(groups) - 0.5, lo, hi)
    body = fr.axes(title, xlabel, ylabel)
    half = 0.35 * (fr.x(1) - fr.x(0))
    for k, (s, lab) in enumerate(zip(stats, labels)):
        cx = fr.x(k)
        y = {key: _fmt(fr.y(val)) for key, val in s.items()}
        body.append(f'<line x1="{_fmt(cx)}" y1="{y["min"]}" x2="{_fmt(cx)}" y2="{y["q1"]}" stroke="black"/>')
        body.append(f'<line x1="{_fmt(cx)}" y1="{y["q3"]}" x2="{_fmt(cx)}" y2="{y["max"]}" stroke="black"/>')
        top, bottom = fr.y(s["q3"]), fr.y(s["q1"])
        body.append(
            f'<rect x="{_fmt(cx - half)}" y="{_fmt(top)}" width="{_fmt(2 * half)}" '
            f'height="{_fmt(max(bottom - top, 0.5))}" fill="#9ecae1" stroke="black"/>'
        )
        body.append(
            f'<line x1="{_fmt(cx - half)}" y1="{y["median"]}" x2="{_fmt(cx + half)}" y2="{y["median"]}" stroke="#d62728"/>'
        )
        body.append(f'<text x="{_fmt(cx)}" y="{fr.y0 + 12}" font-size="8" text-anchor="middle">{escape(lab)}</text>')
    return _write(path, body)
