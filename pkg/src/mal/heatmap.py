"""Static SVG heatmaps of a per-pair metric (lighter cell = lower value)."""
from __future__ import annotations

import csv
import io
import math
from xml.sax.saxutils import escape

import numpy as np

from mal import __version__
from mal.errors import FormatError

LIGHT = (247, 251, 255)
DARK = (8, 48, 107)
CELL = 56
MARGIN_LEFT = 120
MARGIN_TOP = 110


def read_pairs(text: str, metric: str):
    """Average ``metric`` per (row_arch, col_arch); labels keep first-seen order."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"row_arch", "col_arch", metric} <= set(reader.fieldnames):
        raise FormatError(f"pairs CSV needs columns row_arch, col_arch and {metric!r}")
    rows, cols, cells = [], [], {}
    for rec in reader:
        r, c = rec["row_arch"], rec["col_arch"]
        if r not in rows:
            rows.append(r)
        if c not in cols:
            cols.append(c)
        raw = (rec[metric] or "").strip()
        try:
            val = float(raw) if raw else math.nan
        except ValueError:
            raise FormatError(f"non-numeric {metric} value {raw!r}") from None
        cells.setdefault((r, c), []).append(val)
    grid = np.full((len(rows), len(cols)), np.nan)
    for (r, c), vals in cells.items():
        finite = [v for v in vals if math.isfinite(v)]
        if finite:
            grid[rows.index(r), cols.index(c)] = sum(finite) / len(finite)
    return rows, cols, grid


def colour(value, lo, hi) -> str:
    t = 0.5 if hi <= lo else (value - lo) / (hi - lo)
    rgb = [round(a + (b - a) * t) for a, b in zip(LIGHT, DARK)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_svg(rows, cols, grid, metric: str, title: str = "") -> str:
    """SVG document; NaN cells get a hatch pattern and the text "n/a"."""
    finite = grid[np.isfinite(grid)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 0.0)
    width = MARGIN_LEFT + CELL * len(cols) + 20
    height = MARGIN_TOP + CELL * len(rows) + 60
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f"<!-- mal {__version__} -->",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        '<defs><pattern id="nan-hatch" width="6" height="6" patternUnits="userSpaceOnUse" '
        'patternTransform="rotate(45)"><rect width="6" height="6" fill="#ffffff"/>'
        '<line x1="0" y1="0" x2="0" y2="6" stroke="#999999" stroke-width="2"/></pattern></defs>',
        f'<text x="{MARGIN_LEFT}" y="18" font-size="13">{escape(title or metric)}</text>',
    ]
    for j, c in enumerate(cols):
        x = MARGIN_LEFT + CELL * j + CELL / 2
        out.append(f'<text x="{x:g}" y="{MARGIN_TOP - 8}" transform="rotate(-45 {x:g} {MARGIN_TOP - 8})">'
                   f"{escape(c)}</text>")
    for i, r in enumerate(rows):
        y = MARGIN_TOP + CELL * i
        out.append(f'<text x="{MARGIN_LEFT - 6}" y="{y + CELL / 2 + 4:g}" text-anchor="end">{escape(r)}</text>')
        for j in range(len(cols)):
            x = MARGIN_LEFT + CELL * j
            v = grid[i, j]
            if math.isfinite(v):
                fill = colour(v, lo, hi)
                ink = "#000000" if (0.5 if hi <= lo else (v - lo) / (hi - lo)) < 0.55 else "#ffffff"
                label = f"{v:.3f}"
            else:
                fill, ink, label = "url(#nan-hatch)", "#000000", "n/a"
            out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>')
            out.append(f'<text x="{x + CELL / 2:g}" y="{y + CELL / 2 + 4:g}" text-anchor="middle" '
                       f'fill="{ink}">{label}</text>')
    ly = MARGIN_TOP + CELL * len(rows) + 20
    out.append(f'<text x="{MARGIN_LEFT}" y="{ly + 24}">{escape(metric)}: {lo:.3f} (light) to {hi:.3f} (dark)</text>')
    for k in range(10):
        out.append(f'<rect x="{MARGIN_LEFT + 14 * k}" y="{ly}" width="14" height="10" '
                   f'fill="{colour(k / 9, 0.0, 1.0)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def grid_to_csv(rows, cols, grid) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row_arch", *cols])
    for i, r in enumerate(rows):
        writer.writerow([r, *("nan" if not math.isfinite(v) else f"{v:.9g}" for v in grid[i])])
    return buf.getvalue()
