"""Static loading plots: a self-contained SVG bar chart plus a CSV of the same numbers."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

from .cross_section import CODE, VariableCatalog
from .ica import IcaModel, component_loadings

BAR_HEIGHT = 16
LABEL_WIDTH = 160
PLOT_WIDTH = 360
POS_COLOR = "#b2182b"
NEG_COLOR = "#2166ac"


def _svg(title: str, groups) -> str:
    rows = sum(len(entries) + 1 for _, entries in groups)
    height = 40 + rows * (BAR_HEIGHT + 4) + 10
    width = LABEL_WIDTH + PLOT_WIDTH + 80
    peak = max((abs(w) for _, entries in groups for _, _, w in entries), default=1.0) or 1.0
    half = PLOT_WIDTH / 2.0
    zero_x = LABEL_WIDTH + half
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    y = 34
    for heading, entries in groups:
        out.append(f'<text x="4" y="{y + 12}" font-weight="bold">{escape(heading)}</text>')
        out.append(f'<line x1="4" y1="{y + 15}" x2="{width - 4}" y2="{y + 15}" stroke="#999" />')
        y += BAR_HEIGHT + 4
        for vid, _, w in entries:
            length = half * abs(w) / peak
            x = zero_x if w >= 0 else zero_x - length
            color = POS_COLOR if w >= 0 else NEG_COLOR
            out.append(f'<text x="{LABEL_WIDTH - 6}" y="{y + 12}" text-anchor="end">{escape(vid)}</text>')
            out.append(f'<rect x="{x:.2f}" y="{y}" width="{length:.2f}" height="{BAR_HEIGHT}" '
                       f'fill="{color}" />')
            tx = zero_x + half + 6
            out.append(f'<text x="{tx:.1f}" y="{y + 12}">{w:+.4f}</text>')
            y += BAR_HEIGHT + 4
    out.append(f'<line x1="{zero_x:.2f}" y1="30" x2="{zero_x:.2f}" y2="{height - 6}" stroke="#333" />')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_phenotype_plot(model: IcaModel, catalog: VariableCatalog, component_id: int,
                        out_dir, q: int = 20) -> tuple[Path, Path]:
    """Write ``component_<id>.svg`` and ``component_<id>.csv``; returns both paths."""
    if not 0 <= component_id < model.rank:
        raise ValueError(f"component {component_id} out of range 0..{model.rank - 1}")
    if len(catalog) != model.n_variables:
        raise ValueError("catalog size does not match the model")
    comp = component_loadings(model.mixing[:, component_id], catalog, q, component_id)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"component_{component_id:03d}"
    groups = [(heading, entries) for heading, entries in
              (("Codes (intensity)", comp.codes), ("Labs (value)", comp.labs)) if entries]
    svg_path = out_dir / f"{stem}.svg"
    svg_path.write_text(_svg(f"Phenotype component {component_id}", groups), encoding="utf-8")
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "variable_id", "kind", "loading"])
        for rank, (vid, kind, w) in enumerate(comp.entries, start=1):
            writer.writerow([rank, vid, "code" if kind == CODE else "lab", repr(w)])
    return svg_path, csv_path
