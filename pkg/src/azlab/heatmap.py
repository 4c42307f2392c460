"""Layer x zone delta heatmap rendered as a standalone SVG.

Colormap (sRGB, linear in |delta| / bound, clipped at 1)::

    delta = 0           -> #FFFFFF
    delta = -bound      -> #08306B  (dark blue: ablation hurts)
    delta = +bound      -> #67000D  (dark red: ablation helps)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .harness import ResultsTable, round3
from .model import SWEEP_ZONES

WHITE = (255, 255, 255)
BLUE_END = (8, 48, 107)
RED_END = (103, 0, 13)
SCALE_FLOOR = 1.0

ZONE_LABELS = {"all": "All", "q2": "Q2", "q2p": "Q2P", "p2q": "P2Q", "p2": "P2"}


@dataclass
class HeatmapSpec:
    table: ResultsTable
    baseline: float
    bound: float | None = None
    annotate: bool = True
    orientation: str = "zones-by-layers"  # or "layers-by-zones"
    title: str | None = None

    def __post_init__(self):
        if not 0 <= self.baseline <= 100:
            raise ValueError(f"baseline must be in [0, 100], got {self.baseline}")
        if self.bound is not None and self.bound <= 0:
            raise ValueError("scale bound must be > 0")
        if self.orientation not in ("zones-by-layers", "layers-by-zones"):
            raise ValueError(f"unknown orientation {self.orientation!r}")


def compute_deltas(table: ResultsTable, baseline: float) -> np.ndarray:
    """table - baseline, rounded to the tables' 3-decimal precision."""
    return np.vectorize(round3)(table.values - baseline)


def scale_bound(deltas: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    return max(float(np.abs(deltas).max(initial=0.0)), floor)


def delta_rgb(delta: float, bound: float) -> tuple[int, int, int]:
    if delta == 0:
        return WHITE
    t = min(abs(delta) / bound, 1.0)
    end = BLUE_END if delta < 0 else RED_END
    return tuple(int(round(w + (e - w) * t)) for w, e in zip(WHITE, end))


def hex_color(rgb) -> str:
    return "#{:02X}{:02X}{:02X}".format(*rgb)


def render_heatmap(spec: HeatmapSpec) -> str:
    table = spec.table
    if table.n_layers == 0:
        raise ValueError("empty results table")
    deltas = compute_deltas(table, spec.baseline)
    bound = spec.bound if spec.bound is not None else scale_bound(deltas)

    zones = [z.value for z in SWEEP_ZONES]
    layers = list(range(1, table.n_layers + 1))
    by_layers = spec.orientation == "zones-by-layers"
    row_keys = zones if by_layers else layers
    col_keys = layers if by_layers else zones

    cw, ch = 52, 30
    left, top = 80, 50
    grid_w, grid_h = cw * len(col_keys), ch * len(row_keys)
    bar_x = left + grid_w + 30
    width = bar_x + 90
    height = top + grid_h + 60

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#FFFFFF"/>',
    ]
    title = spec.title or f"{table.metric.upper()} change vs baseline {spec.baseline:.3f}"
    out.append(f'<text x="{left}" y="24" font-size="14">{escape(title)}</text>')

    for r, rk in enumerate(row_keys):
        for c, ck in enumerate(col_keys):
            layer, zone = (ck, rk) if by_layers else (rk, ck)
            j = zones.index(zone)
            d = float(deltas[layer - 1, j])
            fill = hex_color(delta_rgb(d, bound))
            x, y = left + c * cw, top + r * ch
            out.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" '
                f'stroke="#CCCCCC" stroke-width="0.5" data-layer="{layer}" data-zone="{zone}" '
                f'data-delta="{d:.3f}"/>')
            if spec.annotate:
                ink = "#FFFFFF" if abs(d) / bound > 0.6 else "#000000"
                out.append(f'<text class="annotation" x="{x + cw / 2:g}" y="{y + ch / 2 + 4:g}" '
                           f'text-anchor="middle" '
                           f'fill="{ink}">{d:+.2f}</text>')

    def label(k):
        return ZONE_LABELS[k] if isinstance(k, str) else str(k)

    for r, rk in enumerate(row_keys):
        out.append(f'<text x="{left - 8}" y="{top + r * ch + ch / 2 + 4:g}" '
                   f'text-anchor="end">{label(rk)}</text>')
    for c, ck in enumerate(col_keys):
        out.append(f'<text x="{left + c * cw + cw / 2:g}" y="{top + grid_h + 16}" '
                   f'text-anchor="middle">{label(ck)}</text>')
    out.append(f'<text x="{left + grid_w / 2:g}" y="{top + grid_h + 36}" text-anchor="middle">'
               f'{"Layer" if by_layers else "Zone"}</text>')

    # colorbar: +bound at the top, -bound at the bottom
    steps = 40
    sh = grid_h / steps
    for k in range(steps):
        v = bound - (k + 0.5) * (2 * bound / steps)
        out.append(f'<rect class="colorbar" x="{bar_x}" y="{top + k * sh:.3f}" width="16" '
                   f'height="{sh:.3f}" fill="{hex_color(delta_rgb(v, bound))}"/>')
    for v, y in ((bound, top), (0.0, top + grid_h / 2), (-bound, top + grid_h)):
        out.append(f'<text x="{bar_x + 22}" y="{y + 4:g}">{v:+.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap(spec: HeatmapSpec, path) -> None:
    Path(path).write_text(render_heatmap(spec), encoding="utf-8")
