"""Minimal self-contained SVG charts for diagnostic plots."""

from __future__ import annotations

import numpy as np

PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")


def _header(w, h):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
            '<rect width="100%" height="100%" fill="white"/>']


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_plot(series: dict, title: str = "", log_y: bool = False, width: int = 640,
              height: int = 400) -> str:
    """One polyline per named series of y-values (x is the index)."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 30, 40
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    if log_y:
        ys = {k: np.log10(np.clip(v, 1e-300, None)) for k, v in ys.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] or [np.zeros(1)])
    if finite.size == 0:
        finite = np.zeros(1)
    lo, hi = float(finite.min()), float(finite.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    n = max((v.size for v in ys.values()), default=1)
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def xy(i, y):
        return pad_l + pw * i / max(n - 1, 1), pad_t + ph * (1 - (y - lo) / (hi - lo))

    out = _header(width, height)
    out.append(f'<text x="{pad_l}" y="20" font-size="14">{_esc(title)}</text>')
    out.append(f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>')
    lab = "log10 " if log_y else ""
    out.append(f'<text x="5" y="{pad_t + 10}" font-size="10">{lab}{hi:.3g}</text>')
    out.append(f'<text x="5" y="{pad_t + ph}" font-size="10">{lab}{lo:.3g}</text>')
    for j, (name, v) in enumerate(ys.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(i, val) for i, val in enumerate(v))
                       if np.isfinite(y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad_r + 8}" y="{pad_t + 14 * (j + 1)}" font-size="11" '
                   f'fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: dict, title: str = "", width: int = 640, height: int = 400) -> str:
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 80
    names = list(values)
    vals = np.array([values[k] if values[k] is not None else np.nan for k in names], dtype=np.float64)
    top = float(np.nanmax(np.abs(vals))) if np.any(np.isfinite(vals)) else 1.0
    top = top or 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    bw = pw / max(len(names), 1)
    out = _header(width, height)
    out.append(f'<text x="{pad_l}" y="20" font-size="14">{_esc(title)}</text>')
    out.append(f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="#999"/>')
    for j, (name, v) in enumerate(zip(names, vals)):
        x = pad_l + j * bw + 0.15 * bw
        hgt = 0.0 if not np.isfinite(v) else ph * abs(v) / top
        out.append(f'<rect x="{x:.1f}" y="{pad_t + ph - hgt:.1f}" width="{0.7 * bw:.1f}" '
                   f'height="{hgt:.1f}" fill="{PALETTE[j % len(PALETTE)]}"/>')
        out.append(f'<text x="{x:.1f}" y="{pad_t + ph + 14}" font-size="10">{_esc(name)}</text>')
        out.append(f'<text x="{x:.1f}" y="{pad_t + ph - hgt - 4:.1f}" font-size="10">{v:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
