"""Self-contained static SVG bar charts for experiment reports."""

from __future__ import annotations

_BAR_W = 26
_GAP = 14
_PLOT_H = 240
_MARGIN_L = 50
_MARGIN_T = 30
_MARGIN_B = 150


def bar_chart_svg(title: str, bars: list) -> str:
    """Render (label, value) pairs as a vertical bar chart.

    Values are clipped to [0, 1] (metric scale). Output is deterministic:
    no timestamps, fixed float formatting.
    """
    n = max(len(bars), 1)
    width = _MARGIN_L + n * (_BAR_W + _GAP) + 20
    height = _MARGIN_T + _PLOT_H + _MARGIN_B
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{_MARGIN_L}" y="18" font-family="monospace" font-size="13">{_esc(title)}</text>',
    ]
    axis_y = _MARGIN_T + _PLOT_H
    parts.append(
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" y2="{axis_y}" stroke="#333"/>'
    )
    parts.append(
        f'<line x1="{_MARGIN_L}" y1="{axis_y}" x2="{width - 10}" y2="{axis_y}" stroke="#333"/>'
    )
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        ty = axis_y - int(tick * _PLOT_H)
        parts.append(
            f'<text x="{_MARGIN_L - 42}" y="{ty + 4}" font-family="monospace" font-size="10">{tick:.2f}</text>'
        )
        parts.append(
            f'<line x1="{_MARGIN_L - 4}" y1="{ty}" x2="{_MARGIN_L}" y2="{ty}" stroke="#333"/>'
        )
    for i, (label, value) in enumerate(bars):
        v = min(max(float(value), 0.0), 1.0)
        bar_h = int(round(v * _PLOT_H))
        x = _MARGIN_L + _GAP + i * (_BAR_W + _GAP)
        y = axis_y - bar_h
        parts.append(
            f'<rect x="{x}" y="{y}" width="{_BAR_W}" height="{bar_h}" fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{x + _BAR_W / 2:.1f}" y="{y - 4}" font-family="monospace" '
            f'font-size="9" text-anchor="middle">{float(value):.3f}</text>'
        )
        parts.append(
            f'<text x="{x + _BAR_W / 2:.1f}" y="{axis_y + 8}" font-family="monospace" font-size="9" '
            f'text-anchor="end" transform="rotate(-60 {x + _BAR_W / 2:.1f} {axis_y + 8})">{_esc(label)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
