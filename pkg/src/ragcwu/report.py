"""CSV, SVG and JSON artifacts for a finished sweep."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from ragcwu.errors import InvalidParameterError
from ragcwu.sweep import SweepResult, aggregate_by_topk

# endpoints of the heatmap colour scale
COOL = (59, 76, 192)
WARM = (180, 4, 38)
SCALE_LO, SCALE_HI = 0.5, 1.0

CELL_W, CELL_H = 64, 32
MARGIN_L, MARGIN_T = 96, 56


@dataclass(frozen=True)
class HeatmapGrid:
    row_labels: list[int]
    col_labels: list[int]
    values: list[list[float]]

    @classmethod
    def from_result(cls, result: SweepResult, exclude_sentinels: bool = False) -> HeatmapGrid:
        rows, cols = result.chunk_sizes, result.top_ks
        if not rows or not cols:
            raise InvalidParameterError("sweep result has an empty grid")
        values = []
        for c in rows:
            row = []
            for k in cols:
                cell = result.cell(c, k)
                v = cell.mean_similarity_ok if exclude_sentinels else cell.mean_similarity
                row.append(float("nan") if v is None else v)
            values.append(row)
        return cls(rows, cols, values)


def _fmt(v: float | None, digits: int = 4) -> str:
    if v is None or v != v:
        return ""
    return f"{v:.{digits}f}"


def _write_csv(path: Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def emit_heatmap_csv(result: SweepResult, path: str | Path, exclude_sentinels: bool = False) -> None:
    grid = HeatmapGrid.from_result(result, exclude_sentinels)
    rows = [["chunk_size"] + [f"k={k}" for k in grid.col_labels]]
    for c, vals in zip(grid.row_labels, grid.values):
        rows.append([str(c)] + [_fmt(v) for v in vals])
    _write_csv(Path(path), rows)


def heat_color(value: float) -> str:
    """Linear cool-to-warm colour for ``value`` on [0.5, 1.0]."""
    if value != value:
        return "#dddddd"
    t = min(1.0, max(0.0, (value - SCALE_LO) / (SCALE_HI - SCALE_LO)))
    r, g, b = (round(lo + (hi - lo) * t) for lo, hi in zip(COOL, WARM))
    return f"#{r:02x}{g:02x}{b:02x}"


def emit_heatmap_svg(result: SweepResult, path: str | Path, title: str = "Mean semantic similarity") -> None:
    grid = HeatmapGrid.from_result(result)
    width = MARGIN_L + CELL_W * len(grid.col_labels) + 16
    height = MARGIN_T + CELL_H * len(grid.row_labels) + 16
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<text x="{MARGIN_L}" y="20" font-size="14">{escape(title)}</text>',
        f'<text x="{MARGIN_L + CELL_W * len(grid.col_labels) // 2}" y="{MARGIN_T - 22}" '
        f'text-anchor="middle">top-k</text>',
        f'<text x="12" y="{MARGIN_T - 8}">chunk size</text>',
    ]
    for j, k in enumerate(grid.col_labels):
        x = MARGIN_L + j * CELL_W + CELL_W // 2
        out.append(f'<text class="col-label" x="{x}" y="{MARGIN_T - 6}" text-anchor="middle">{k}</text>')
    for i, (c, vals) in enumerate(zip(grid.row_labels, grid.values)):
        y = MARGIN_T + i * CELL_H
        out.append(
            f'<text class="row-label" x="{MARGIN_L - 8}" y="{y + CELL_H // 2 + 4}" text-anchor="end">{c}</text>'
        )
        for j, (k, v) in enumerate(zip(grid.col_labels, vals)):
            x = MARGIN_L + j * CELL_W
            out.append(
                f'<rect class="cell" data-chunk-size="{c}" data-top-k="{k}" x="{x}" y="{y}" '
                f'width="{CELL_W}" height="{CELL_H}" fill="{heat_color(v)}" stroke="#ffffff"/>'
            )
            out.append(
                f'<text class="value" data-chunk-size="{c}" data-top-k="{k}" x="{x + CELL_W // 2}" '
                f'y="{y + CELL_H // 2 + 4}" text-anchor="middle" fill="#ffffff">{_fmt(v)}</text>'
            )
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def emit_topk_summary(result: SweepResult, path: str | Path) -> None:
    rows = [["k", "best_mean_S", "best_C", "mean_cwu_actual_pct"]]
    for s in aggregate_by_topk(result.cells):
        pct = None if s.mean_cwu_actual is None else 100 * s.mean_cwu_actual
        rows.append([str(s.top_k), _fmt(s.best_mean_similarity), str(s.best_chunk_size), _fmt(pct, 1)])
    _write_csv(Path(path), rows)


def emit_cwu_scatter(result: SweepResult, path: str | Path) -> None:
    """One row per cell. ``mean_cwu_actual`` is blank for cells with no ok
    record; ``mean_cwu_all`` also averages the pre-overflow utilization of
    failed trials."""
    rows = [["C", "k", "mean_cwu_actual", "mean_S", "mean_cwu_all", "nominal_cwu", "n_ok"]]
    for c in sorted(result.cells, key=lambda c: (c.chunk_size, c.top_k)):
        rows.append(
            [
                str(c.chunk_size),
                str(c.top_k),
                "" if c.mean_cwu_actual is None else repr(c.mean_cwu_actual),
                repr(c.mean_similarity),
                "" if c.mean_cwu_all is None else repr(c.mean_cwu_all),
                repr(c.nominal_cwu),
                str(c.n_ok),
            ]
        )
    _write_csv(Path(path), rows)


def emit_optimum(result: SweepResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.optimum.to_json(), indent=2) + "\n", encoding="utf-8")


def emit_all(result: SweepResult, report_dir: str | Path, exclude_sentinels: bool = False) -> list[Path]:
    report_dir = Path(report_dir)
    files = {
        "heatmap.csv": emit_heatmap_csv,
        "heatmap.svg": emit_heatmap_svg,
        "topk.csv": emit_topk_summary,
        "cwu_scatter.csv": emit_cwu_scatter,
        "optimum.json": emit_optimum,
    }
    written = []
    for name, fn in files.items():
        fn(result, report_dir / name)
        written.append(report_dir / name)
    if exclude_sentinels:
        emit_heatmap_csv(result, report_dir / "heatmap_ok_only.csv", exclude_sentinels=True)
        written.append(report_dir / "heatmap_ok_only.csv")
    return written
