"""Minimal self-contained SVG line plots (no plotting dependency)."""

from __future__ import annotations

import numpy as np

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s for s in (1 * mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    first = np.ceil(lo / step) * step
    return [float(t) for t in np.arange(first, hi + step / 2, step)]


def line_plot_svg(
    path,
    x,
    series: dict[str, np.ndarray],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    hlines: dict[str, float] | None = None,
    width: int = 720,
    height: int = 440,
) -> None:
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    hlines = hlines or {}
    pools = list(ys.values())
    if hlines:
        pools.append(np.asarray(list(hlines.values()), dtype=float))
    all_y = np.concatenate(pools)
    y_lo, y_hi = float(np.min(all_y)), float(np.max(all_y))
    pad = 0.05 * (y_hi - y_lo or 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = float(x.min()), float(x.max())
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (v - x_lo) / (x_hi - x_lo or 1.0) * pw

    def sy(v):
        return mt + (y_hi - v) / (y_hi - y_lo or 1.0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(t):.1f}" y1="{mt + ph}" x2="{sx(t):.1f}" y2="{mt + ph + 4}" stroke="#333"/>')
        parts.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 17}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 4}" y1="{sy(t):.1f}" x2="{ml}" y2="{sy(t):.1f}" stroke="#333"/>')
        parts.append(f'<text x="{ml - 7}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    parts.append(
        f'<text x="18" y="{mt + ph / 2}" text-anchor="middle" transform="rotate(-90 18 {mt + ph / 2})">{ylabel}</text>'
    )
    legend_y = mt + 14
    for i, (name, y) in enumerate(ys.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        parts.append(f'<line x1="{ml + pw - 150}" y1="{legend_y}" x2="{ml + pw - 130}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw - 125}" y="{legend_y + 4}">{name}</text>')
        legend_y += 16
    for i, (name, v) in enumerate(hlines.items()):
        color = _COLORS[(len(ys) + i) % len(_COLORS)]
        parts.append(
            f'<line x1="{ml}" y1="{sy(v):.1f}" x2="{ml + pw}" y2="{sy(v):.1f}" '
            f'stroke="{color}" stroke-width="1.2" stroke-dasharray="6 4"/>'
        )
        parts.append(f'<line x1="{ml + pw - 150}" y1="{legend_y}" x2="{ml + pw - 130}" y2="{legend_y}" stroke="{color}" stroke-width="2" stroke-dasharray="6 4"/>')
        parts.append(f'<text x="{ml + pw - 125}" y="{legend_y + 4}">{name}</text>')
        legend_y += 16
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
