"""Dependency-free SVG line charts for benchmark summaries."""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Sequence

from .evaluation import MetricsRecord, aggregate

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
METRIC_COLUMNS = {"mse": "mse_mean", "bias": "abs_bias_mean", "variance": "variance_mean"}
METRIC_LABELS = {"mse": "MSE", "bias": "mean |bias|", "variance": "variance (MSE - bias^2)"}
MODEL_ORDER = ("M1", "M2", "M1_IPW", "M2_IPW")

WIDTH, HEIGHT = 720, 460
LEFT, RIGHT, TOP, BOTTOM = 80, 150, 50, 60


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
    )


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def line_chart(
    title: str,
    series: Sequence[tuple[str, Sequence[tuple[float, float]]]],
    x_label: str = "trial size",
    y_label: str = "",
    log_x: bool = True,
) -> str:
    """Render ``series`` (name, [(x, y), ...]) as a standalone SVG document.

    X ticks sit at the distinct x values present in the data.
    """
    xs = sorted({x for _, pts in series for x, _ in pts})
    ys = [y for _, pts in series for _, y in pts if math.isfinite(y)]
    if not xs or not ys:
        raise ValueError("nothing to plot")
    fx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    x_lo, x_hi = fx(xs[0]), fx(xs[-1])
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    yticks = _nice_ticks(min(0.0, min(ys)), max(ys))
    y_lo, y_hi = yticks[0], yticks[-1]
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (fx(x) - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return TOP + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15">{_escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for x in xs:
        X = px(x)
        out.append(f'<line x1="{X:.2f}" y1="{TOP + ph}" x2="{X:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text class="xtick" x="{X:.2f}" y="{TOP + ph + 18}" text-anchor="middle">{x:g}</text>')
    for y in yticks:
        Y = py(y)
        out.append(f'<line x1="{LEFT - 5}" y1="{Y:.2f}" x2="{LEFT + pw}" y2="{Y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text class="ytick" x="{LEFT - 8}" y="{Y + 4:.2f}" text-anchor="end">{y:g}</text>')
    out.append(
        f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{_escape(x_label)}</text>'
    )
    out.append(
        f'<text x="18" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {TOP + ph / 2:.1f})">{_escape(y_label)}</text>'
    )
    for i, (name, pts) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = sorted((x, y) for x, y in pts if math.isfinite(y))
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = TOP + 10 + 20 * i
        lx = LEFT + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{_escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(records: Sequence[MetricsRecord], out_dir: str | os.PathLike) -> list[Path]:
    """One chart per (aim, metric, dim_x1) with a line per model.

    When the records span several scenarios the scenario is part of the
    file name and title.
    """
    rows = [r for r in aggregate(records) if r["n_ok"] > 0]
    if not rows:
        raise ValueError("no successful metrics records to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenarios = sorted({r["scenario"] for r in rows})
    written = []
    for scenario in scenarios:
        sub = [r for r in rows if r["scenario"] == scenario]
        for aim in sorted({r["aim"] for r in sub}):
            for d in sorted({r["dim_x1"] for r in sub}):
                cell = [r for r in sub if r["aim"] == aim and r["dim_x1"] == d]
                models = sorted({r["model"] for r in cell}, key=lambda m: (MODEL_ORDER + (m,)).index(m))
                for metric, col in METRIC_COLUMNS.items():
                    series = [
                        (m, [(r["trial_size"], r[col]) for r in cell if r["model"] == m]) for m in models
                    ]
                    title = f"Aim {aim}: {METRIC_LABELS[metric]}, |X1| = {d}"
                    stem = f"aim{aim}_{metric}_dimx1-{d}"
                    if len(scenarios) > 1:
                        title += f" ({scenario})"
                        stem = f"{scenario.replace('=', '-')}_{stem}"
                    path = out_dir / f"{stem}.svg"
                    path.write_text(line_chart(title, series, y_label=METRIC_LABELS[metric]), encoding="utf-8")
                    written.append(path)
    return written
