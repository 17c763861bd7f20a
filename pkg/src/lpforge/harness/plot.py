"""Deterministic, self-contained SVG line charts of training trajectories."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PANEL_W, PANEL_H = 420, 260
MARGIN = dict(left=52, right=16, top=30, bottom=40)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if math.isfinite(v) else "0"


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _panel(x0: float, title: str, xs, series, y_range=None) -> list[str]:
    """One chart; ``series`` is a list of (label, values). Non-finite points are skipped."""
    finite = [v for _, vals in series for v in vals if math.isfinite(v)]
    if y_range is None:
        lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = y_range
    xlo, xhi = min(xs), max(xs)
    if xhi == xlo:
        xhi = xlo + 1
    iw = PANEL_W - MARGIN["left"] - MARGIN["right"]
    ih = PANEL_H - MARGIN["top"] - MARGIN["bottom"]
    ox, oy = x0 + MARGIN["left"], MARGIN["top"]

    def px(x):
        return ox + (x - xlo) / (xhi - xlo) * iw

    def py(y):
        return oy + ih - (y - lo) / (hi - lo) * ih

    out = [f'<g><text x="{_num(x0 + PANEL_W / 2)}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{_num(ox)}" y="{_num(oy)}" width="{iw}" height="{ih}" fill="none" stroke="#444"/>']
    for t in _ticks(lo, hi):
        out.append(f'<line x1="{_num(ox - 4)}" y1="{_num(py(t))}" x2="{_num(ox)}" y2="{_num(py(t))}" stroke="#444"/>')
        out.append(f'<text x="{_num(ox - 6)}" y="{_num(py(t) + 4)}" text-anchor="end" font-size="10">{t:.3g}</text>')
    for t in _ticks(xlo, xhi):
        out.append(f'<text x="{_num(px(t))}" y="{_num(oy + ih + 14)}" text-anchor="middle" font-size="10">{t:.3g}</text>')
    out.append(f'<text x="{_num(ox + iw / 2)}" y="{_num(oy + ih + 30)}" text-anchor="middle" font-size="11">epoch</text>')
    for i, (label, vals) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = [f"{_num(px(x))},{_num(py(v))}" for x, v in zip(xs, vals) if math.isfinite(v)]
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        ly = oy + 12 + 13 * i
        out.append(f'<line x1="{_num(ox + 8)}" y1="{_num(ly - 4)}" x2="{_num(ox + 24)}" y2="{_num(ly - 4)}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_num(ox + 28)}" y="{_num(ly)}" font-size="10">{escape(label)}</text>')
    out.append("</g>")
    return out


def records_svg(records, d: int | None = None, title: str = "") -> str:
    """Two panels: accuracies, and concentration statistics (pr1/d needs ``d``)."""
    if not records:
        raise ValueError("records_svg: no records")
    xs = [r.epoch for r in records]
    acc = [("clean", [r.clean_acc for r in records]), ("FGSM", [r.fgsm_acc for r in records]),
           ("PGD l-inf", [r.pgd_linf_acc for r in records]), ("PGD l2", [r.pgd_l2_acc for r in records])]
    if d:
        conc = [("PR1 / d", [r.mean_pr1 / d for r in records])]
    else:
        conc = [("cos(l2, l-inf)", [r.mean_cos2inf for r in records])]
    conc.append(("entropy gap", [r.mean_delta_h for r in records]))
    if any(math.isfinite(r.median_q_star) for r in records):
        conc.append(("q* - 1", [r.median_q_star - 1.0 for r in records]))
    width = 2 * PANEL_W
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{PANEL_H}" '
             f'viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts.append(f'<rect width="{width}" height="{PANEL_H}" fill="white"/>')
    parts += _panel(0, "accuracy", xs, acc, (0.0, 1.0))
    parts += _panel(PANEL_W, "gradient concentration", xs, conc)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
