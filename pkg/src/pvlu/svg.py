"""Dependency-free SVG line plots for accuracy curves.

Output is a pure function of the input series: coordinates are rounded to
fixed precision and colors come from a fixed palette, so replotting the
same data yields byte-identical files (diffable in CI).
"""

from __future__ import annotations

from .errors import ContractError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
           "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")

_W, _H = 720, 480
_ML, _MR, _MT, _MB = 64, 160, 40, 48   # margins; right edge holds the legend


def _fmt(v) -> str:
    return format(float(v), ".2f").rstrip("0").rstrip(".")


def _ticks(lo, hi, n=5):
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)], lo, hi


def line_plot(series, title="", xlabel="", ylabel="") -> str:
    """Render [(label, xs, ys), ...] as one SVG chart with a legend.

    Raises ContractError for an empty series list, an empty curve, or
    mismatched coordinate lengths.
    """
    if not series:
        raise ContractError("line_plot needs at least one series")
    for label, xs, ys in series:
        if len(xs) == 0:
            raise ContractError(f"series {label!r} is empty")
        if len(xs) != len(ys):
            raise ContractError(
                f"series {label!r}: {len(xs)} x values vs {len(ys)} y values")

    all_x = [float(x) for _, xs, _ in series for x in xs]
    all_y = [float(y) for _, _, ys in series for y in ys]
    xticks, x0, x1 = _ticks(min(all_x), max(all_x))
    yticks, y0, y1 = _ticks(min(all_y), max(all_y))
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def px(x):
        return _ML + (float(x) - x0) / (x1 - x0) * pw

    def py(y):
        return _MT + ph - (float(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_ML + pw / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
    ]
    # Axes with tick marks and grid lines.
    ax_bottom = _MT + ph
    out.append(f'<g stroke="#333" fill="none">'
               f'<line x1="{_ML}" y1="{ax_bottom}" x2="{_ML + pw}" y2="{ax_bottom}"/>'
               f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{ax_bottom}"/></g>')
    for t in xticks:
        x = px(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{ax_bottom}" x2="{_fmt(x)}" '
                   f'y2="{ax_bottom + 5}" stroke="#333"/>')
        out.append(f'<text x="{_fmt(x)}" y="{ax_bottom + 20}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{format(t, ".6g")}</text>')
    for t in yticks:
        y = py(t)
        out.append(f'<line x1="{_ML - 5}" y1="{_fmt(y)}" x2="{_ML}" '
                   f'y2="{_fmt(y)}" stroke="#333"/>')
        out.append(f'<line x1="{_ML}" y1="{_fmt(y)}" x2="{_ML + pw}" y2="{_fmt(y)}" '
                   f'stroke="#ddd"/>')
        out.append(f'<text x="{_ML - 9}" y="{_fmt(y + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="12">{format(t, ".6g")}</text>')
    out.append(f'<text x="{_ML + pw / 2:.0f}" y="{_H - 10}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13">{xlabel}</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2:.0f}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 16 {_MT + ph / 2:.0f})">{ylabel}</text>')
    # Curves.
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{points}"/>')
    # Legend.
    lx = _ML + pw + 16
    out.append(f'<g font-family="sans-serif" font-size="12">')
    for i, (label, _, _) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        ly = _MT + 10 + i * 18
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="1.5" class="legend"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{label}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
