"""Minimal SVG charts written as plain text."""

from __future__ import annotations

from html import escape
from pathlib import Path

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 40, 50


def _frame(title: str, xlabel: str, ylabel: str, body: list[str]) -> str:
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="16" y="{H / 2}" text-anchor="middle" transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
            *body,
            "</svg>",
            "",
        ]
    )


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _axes(x0: float, x1: float, y0: float, y1: float, xticks, yticks) -> list[str]:
    sx = _scale(x0, x1, LEFT, W - RIGHT)
    sy = _scale(y0, y1, H - BOTTOM, TOP)
    out = [
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
    ]
    for t in xticks:
        out.append(f'<text x="{sx(t):.1f}" y="{H - BOTTOM + 16}" text-anchor="middle">{t:g}</text>')
    for t in yticks:
        out.append(f'<text x="{LEFT - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')
        out.append(f'<line x1="{LEFT}" y1="{sy(t):.1f}" x2="{W - RIGHT}" y2="{sy(t):.1f}" stroke="#ddd"/>')
    return out


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: dict[str, list[float]], title: str, xlabel: str, ylabel: str) -> str:
    """One polyline per named series, x = index."""
    values = [v for ys in series.values() for v in ys]
    y0, y1 = min(values), max(values)
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    xmax = max(len(ys) for ys in series.values()) - 1
    sx = _scale(0, max(xmax, 1), LEFT, W - RIGHT)
    sy = _scale(y0, y1, H - BOTTOM, TOP)
    xticks = sorted({round(t) for t in _ticks(0, max(xmax, 1), min(6, max(xmax, 1) + 1))})
    body = _axes(0, max(xmax, 1), y0, y1, xticks, _ticks(y0, y1))
    for i, (name, ys) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in enumerate(ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{W - RIGHT - 4}" y="{TOP + 14 * (i + 1)}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    return _frame(title, xlabel, ylabel, body)


def bar_chart(labels: list[str], counts: list[float], title: str, xlabel: str, ylabel: str) -> str:
    top = max(max(counts, default=0), 1)
    sy = _scale(0, top, H - BOTTOM, TOP)
    n = max(len(counts), 1)
    slot = (W - LEFT - RIGHT) / n
    body = _axes(0, 1, 0, top, [], _ticks(0, top))
    for i, (label, c) in enumerate(zip(labels, counts)):
        x = LEFT + i * slot
        body.append(
            f'<rect x="{x + 0.1 * slot:.1f}" y="{sy(c):.1f}" width="{0.8 * slot:.1f}" '
            f'height="{H - BOTTOM - sy(c):.1f}" fill="{PALETTE[0]}"><title>{escape(label)}: {c:g}</title></rect>'
        )
        if n <= 30 or i % max(1, n // 15) == 0:
            body.append(f'<text x="{x + slot / 2:.1f}" y="{H - BOTTOM + 16}" text-anchor="middle" font-size="10">{escape(label)}</text>')
    return _frame(title, xlabel, ylabel, body)


def heat_grid(grid: list[list[float]], row_labels: list[str], col_labels: list[str], title: str, xlabel: str, ylabel: str) -> str:
    """Shaded cells, darker = larger; each cell is annotated with its value."""
    flat = [v for row in grid for v in row]
    lo, hi = min(flat), max(flat)
    rows, cols = len(grid), len(grid[0])
    cw = (W - LEFT - RIGHT) / cols
    ch = (H - TOP - BOTTOM) / rows
    body = []
    for r, row in enumerate(grid):
        for c, v in enumerate(row):
            t = (v - lo) / (hi - lo) if hi > lo else 1.0
            shade = int(235 - 180 * t)
            x, y = LEFT + c * cw, TOP + r * ch
            body.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" fill="rgb({shade},{shade},255)" stroke="white"/>')
            body.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle">{v:.1f}</text>')
        body.append(f'<text x="{LEFT - 6}" y="{TOP + r * ch + ch / 2 + 4:.1f}" text-anchor="end">{escape(row_labels[r])}</text>')
    for c, label in enumerate(col_labels):
        body.append(f'<text x="{LEFT + c * cw + cw / 2:.1f}" y="{H - BOTTOM + 16}" text-anchor="middle">{escape(label)}</text>')
    return _frame(title, xlabel, ylabel, body)


def write(svg: str, path: str | Path) -> None:
    Path(path).write_text(svg)
