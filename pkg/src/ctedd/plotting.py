"""Hand-rolled SVG learning curves.

Deterministic by construction: identical metrics inputs produce
byte-identical output (no timestamps, no generated ids).
"""

from __future__ import annotations

import math
from pathlib import Path

from .harness import InputError, MetricsRow, read_metrics_csv

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 24, 24, 54

PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2",
]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / n))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * span:
        out.append(round(v, 12))
        v += step
    return out or [lo]


def plot_curves(metrics_paths, out_path) -> bytes:
    """Render mean-return curves with CI bands, one series per (file, variant)."""
    if not metrics_paths:
        raise InputError("no metrics files given")
    series: list[tuple[str, str, list[MetricsRow]]] = []
    for path in metrics_paths:
        rows = read_metrics_csv(path)
        stem = Path(path).stem
        by_variant: dict[str, list[MetricsRow]] = {}
        for r in rows:
            by_variant.setdefault(r.variant, []).append(r)
        for variant, vrows in by_variant.items():
            series.append((stem, variant, vrows))
    if not any(rows for _, _, rows in series):
        raise InputError("metrics files contain no data rows")

    variant_counts: dict[str, int] = {}
    for _, variant, _ in series:
        variant_counts[variant] = variant_counts.get(variant, 0) + 1

    xs = [r.env_steps for _, _, rows in series for r in rows]
    ys = []
    for _, _, rows in series:
        for r in rows:
            ys.append(r.mean_return)
            if not math.isnan(r.ci95):
                ys.append(r.mean_return - r.ci95)
                ys.append(r.mean_return + r.ci95)
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 1, y_hi + 1
    y_pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + pw * (x - x_lo) / (x_hi - x_lo)

    def sy(y):
        return MARGIN_T + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" '
        'fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    for xt in _ticks(x_lo, x_hi):
        px = sx(xt)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="{MARGIN_T + ph}" x2="{_fmt(px)}" '
            f'y2="{MARGIN_T + ph + 5}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{_fmt(px)}" y="{MARGIN_T + ph + 20}" font-size="12" '
            f'text-anchor="middle" font-family="sans-serif">{_fmt(xt)}</text>'
        )
    for yt in _ticks(y_lo, y_hi):
        py = sy(yt)
        parts.append(
            f'<line x1="{MARGIN_L - 5}" y1="{_fmt(py)}" x2="{MARGIN_L}" '
            f'y2="{_fmt(py)}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{_fmt(py)}" font-size="12" text-anchor="end" '
            f'dominant-baseline="middle" font-family="sans-serif">{_fmt(yt)}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_L + pw / 2:.0f}" y="{HEIGHT - 12}" font-size="13" '
        'text-anchor="middle" font-family="sans-serif">environment steps</text>'
    )
    parts.append(
        f'<text x="18" y="{MARGIN_T + ph / 2:.0f}" font-size="13" text-anchor="middle" '
        f'font-family="sans-serif" transform="rotate(-90 18 {MARGIN_T + ph / 2:.0f})">'
        "mean episode return</text>"
    )

    legend_entries = []
    for idx, (stem, variant, rows) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        label = variant if variant_counts[variant] == 1 else f"{variant} ({stem})"
        legend_entries.append((label, color))
        band = [(r.env_steps, r.mean_return, r.ci95) for r in rows if not math.isnan(r.ci95)]
        if len(band) >= 2:
            upper = " ".join(f"{_fmt(sx(x))},{_fmt(sy(m + c))}" for x, m, c in band)
            lower = " ".join(f"{_fmt(sx(x))},{_fmt(sy(m - c))}" for x, m, c in reversed(band))
            parts.append(
                f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.15" stroke="none"/>'
            )
        pts = " ".join(f"{_fmt(sx(r.env_steps))},{_fmt(sy(r.mean_return))}" for r in rows)
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        for r in rows:
            parts.append(
                f'<circle cx="{_fmt(sx(r.env_steps))}" cy="{_fmt(sy(r.mean_return))}" '
                f'r="2.4" fill="{color}"/>'
            )

    ly = MARGIN_T + 10
    for label, color in legend_entries:
        lx = MARGIN_L + pw - 170
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 30}" y="{ly + 4}" font-size="12" font-family="sans-serif">{label}</text>'
        )
        ly += 18
    parts.append("</svg>")
    data = ("\n".join(parts) + "\n").encode("utf-8")
    if out_path is not None:
        Path(out_path).write_bytes(data)
    return data
