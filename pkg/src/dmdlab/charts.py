"""Deterministic SVG line charts from run CSVs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dmdlab.harness import read_csv

W, H = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return list(np.linspace(lo, hi, n))


def axis_range(values) -> tuple[float, float]:
    """Closed range covering every value, padded by 5%; (0, 1) when empty."""
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
    else:
        pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def line_chart(series: dict[str, tuple[list, list]], title: str, xlabel: str, ylabel: str) -> str:
    xs = [x for sx, _ in series.values() for x in sx]
    ys = [y for _, sy in series.values() for y in sy]
    x0, x1 = axis_range(xs)
    y0, y1 = axis_range(ys)
    pw = W - MARGIN["left"] - MARGIN["right"]
    ph = H - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_esc(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{H - MARGIN["bottom"] + 16}" text-anchor="middle" font-family="sans-serif" font-size="11">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{py(t) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{t:.4g}</text>')
    out.append(f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{H / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {H / 2:.1f})">{_esc(ylabel)}</text>')
    for j, (name, (sx, sy)) in enumerate(sorted(series.items())):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(sx, sy))
        if pts:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - MARGIN["right"] - 4}" y="{MARGIN["top"] + 16 + 14 * j}" text-anchor="end" font-family="sans-serif" font-size="11" fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _series(rows, x: str, y: str) -> tuple[list, list]:
    pts = [(r[x], r[y]) for r in rows if r.get(x) is not None and r.get(y) is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


# (csv name, x column, y columns, chart file, title, x label, y label)
CHARTS = (
    ("log.csv", "iter", ("fd_to_teacher",), "fd_vs_iter.svg", "FD to teacher", "iteration", "FD"),
    ("xi.csv", "t", ("xi",), "xi.svg", "normalized one-step reconstruction error", "t", "xi(t)"),
    ("slack.csv", "k", ("slack_i", "slack_ii", "slack_iii"), "slack.svg", "recursion slack per round", "round k", "rhs - lhs"),
)


def chart_csv(csv_path, x: str, ys, title: str, xlabel: str, ylabel: str) -> str:
    _, rows = read_csv(csv_path, required=(x, *ys))
    return line_chart({y: _series(rows, x, y) for y in ys}, title, xlabel, ylabel)


def emit_charts(run_dir) -> list[Path]:
    """Render every known CSV found in ``run_dir``; returns the SVG paths written."""
    d = Path(run_dir)
    written = []
    for name, x, ys, svg, title, xl, yl in CHARTS:
        src = d / name
        if not src.exists():
            continue
        (d / svg).write_text(chart_csv(src, x, ys, title, xl, yl))
        written.append(d / svg)
    return written


def emit_summary_chart(curves: dict[str, list[tuple[int, float]]], path, title: str) -> Path:
    series = {k: ([c[0] for c in v], [c[1] for c in v]) for k, v in curves.items()}
    Path(path).write_text(line_chart(series, title, "generator update", "FD to teacher"))
    return Path(path)

