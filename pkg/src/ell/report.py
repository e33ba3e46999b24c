"""Report artifacts: radar chart data, SVG/PNG renderings, indicator tables.

All positive indicators live in [0, 1] on six fixed axes, so a report is a
hexagon; its shoelace area is the single-number liquidity summary used when
comparing tokens. Every writer here is deterministic for identical inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .model import (
    EmptyInput,
    IncompleteReport,
    IndicatorReport,
    MismatchedAxes,
    POSITIVE_AXES,
    dump_json,
)

AXES: tuple[str, ...] = POSITIVE_AXES

AXIS_LABELS = {
    "top10_pos": "Top-10 dispersion",
    "hhi_pos": "HHI dispersion",
    "vmtv_pos": "VMTV",
    "volatility_pos": "Volatility",
    "liquidity_pos": "Liquidity",
    "holders_pos": "Holders",
}

INDICATOR_ROWS = (
    "top10_position", "hhi", "vmtv", "volatility", "pool_liquidity", "holders",
)


def _axis_values(report: IndicatorReport, which: str) -> list[float]:
    block = report.positive_raw if which == "raw" else report.positive_adjusted
    missing = [axis for axis in AXES if axis not in block]
    if missing:
        raise IncompleteReport(f"report lacks positive axes: {missing}")
    return [float(block[axis]) for axis in AXES]


def radar_payload(report: IndicatorReport) -> dict:
    return {
        "axes": list(AXES),
        "raw": _axis_values(report, "raw"),
        "adjusted": _axis_values(report, "adjusted"),
    }


def polygon_vertices(values: Sequence[float]) -> list[tuple[float, float]]:
    """Vertices at value * unit radius along each axis; axis 0 points up and
    the rest follow clockwise."""
    if len(values) != len(AXES):
        raise MismatchedAxes(f"expected {len(AXES)} values, got {len(values)}")
    out = []
    for i, v in enumerate(values):
        angle = math.pi / 2 - i * (2 * math.pi / len(AXES))
        out.append((v * math.cos(angle), v * math.sin(angle)))
    return out


def shoelace_area(vertices: Sequence[tuple[float, float]]) -> float:
    total = 0.0
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return abs(total) / 2.0


def radar_area(report: IndicatorReport, which: str = "adjusted") -> float:
    return shoelace_area(polygon_vertices(_axis_values(report, which)))


# --------------------------------------------------------------------------
# SVG rendering

_SVG_SIZE = 440
_SVG_CX = 220.0
_SVG_CY = 205.0
_SVG_R = 140.0


def _svg_point(x: float, y: float) -> str:
    return f"{_SVG_CX + _SVG_R * x:.2f},{_SVG_CY - _SVG_R * y:.2f}"


def _svg_polygon(values: Sequence[float], color: str, opacity: str) -> str:
    points = " ".join(_svg_point(x, y) for x, y in polygon_vertices(values))
    return (f'<polygon points="{points}" fill="{color}" fill-opacity="{opacity}" '
            f'stroke="{color}" stroke-width="1.5"/>')


def radar_svg(report: IndicatorReport) -> str:
    """Static SVG 1.1 radar chart with raw and adjusted polygons."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" '
        f'height="{_SVG_SIZE}" viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">',
        f'<rect width="{_SVG_SIZE}" height="{_SVG_SIZE}" fill="white"/>',
    ]
    for ring in (0.25, 0.5, 0.75, 1.0):
        points = " ".join(
            _svg_point(x, y) for x, y in polygon_vertices([ring] * len(AXES)))
        parts.append(f'<polygon points="{points}" fill="none" stroke="#cccccc" '
                     f'stroke-width="0.75"/>')
    unit = polygon_vertices([1.0] * len(AXES))
    for i, (x, y) in enumerate(unit):
        parts.append(f'<line x1="{_SVG_CX:.2f}" y1="{_SVG_CY:.2f}" '
                     f'x2="{_SVG_CX + _SVG_R * x:.2f}" y2="{_SVG_CY - _SVG_R * y:.2f}" '
                     f'stroke="#cccccc" stroke-width="0.75"/>')
        lx = _SVG_CX + (_SVG_R + 16) * x
        ly = _SVG_CY - (_SVG_R + 16) * y
        anchor = "middle" if abs(x) < 0.3 else ("start" if x > 0 else "end")
        parts.append(f'<text x="{lx:.2f}" y="{ly + 4:.2f}" text-anchor="{anchor}" '
                     f'font-family="sans-serif" font-size="11">'
                     f'{AXIS_LABELS[AXES[i]]}</text>')
    payload = radar_payload(report)
    parts.append(_svg_polygon(payload["raw"], "#4c78a8", "0.25"))
    parts.append(_svg_polygon(payload["adjusted"], "#e45756", "0.25"))
    raw_area = shoelace_area(polygon_vertices(payload["raw"]))
    adj_area = shoelace_area(polygon_vertices(payload["adjusted"]))
    parts.append(f'<text x="16" y="{_SVG_SIZE - 28}" font-family="sans-serif" '
                 f'font-size="12" fill="#4c78a8">raw area {raw_area:.4f}</text>')
    parts.append(f'<text x="16" y="{_SVG_SIZE - 12}" font-family="sans-serif" '
                 f'font-size="12" fill="#e45756">adjusted area {adj_area:.4f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_radar(report: IndicatorReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "radar.json", "svg": out / "radar.svg"}
    dump_json(radar_payload(report), paths["json"])
    paths["svg"].write_text(radar_svg(report), encoding="utf-8")
    return paths


# --------------------------------------------------------------------------
# matplotlib figures

def _radar_axes(fig, payload: dict, title: str) -> None:
    import numpy as np

    ax = fig.add_subplot(111, projection="polar")
    n = len(payload["axes"])
    angles = [math.pi / 2 - i * (2 * math.pi / n) for i in range(n)]
    for name, color in (("raw", "#4c78a8"), ("adjusted", "#e45756")):
        values = payload[name]
        closed_angles = angles + angles[:1]
        closed_values = list(values) + [values[0]]
        ax.plot(closed_angles, closed_values, color=color, linewidth=1.5, label=name)
        ax.fill(closed_angles, closed_values, color=color, alpha=0.2)
    ax.set_xticks(angles)
    ax.set_xticklabels([AXIS_LABELS[a] for a in payload["axes"]], fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_yticks(np.linspace(0.25, 1.0, 4))
    ax.tick_params(axis="y", labelsize=7)
    ax.set_title(title, fontsize=11)
    ax.legend(loc="lower right", bbox_to_anchor=(1.15, -0.1), fontsize=8)


def emit_figures(report: IndicatorReport, out_dir, title: str = "token") -> list[Path]:
    """Render radar and indicator-bar PNGs with the Agg backend."""
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    fig = Figure(figsize=(5.2, 5.2), dpi=100)
    FigureCanvasAgg(fig)
    _radar_axes(fig, radar_payload(report), title)
    radar_png = out / "radar.png"
    fig.savefig(radar_png, format="png")
    written.append(radar_png)

    fig = Figure(figsize=(6.4, 4.0), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    positions = range(len(AXES))
    raw_values = _axis_values(report, "raw")
    adj_values = _axis_values(report, "adjusted")
    width = 0.38
    ax.bar([p - width / 2 for p in positions], raw_values, width,
           color="#4c78a8", label="raw")
    ax.bar([p + width / 2 for p in positions], adj_values, width,
           color="#e45756", label="adjusted")
    ax.set_xticks(list(positions))
    ax.set_xticklabels([AXIS_LABELS[a] for a in AXES], fontsize=8, rotation=20)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("positive indicator value")
    ax.set_title(f"{title}: positive indicators", fontsize=11)
    ax.legend(fontsize=8)
    fig.tight_layout()
    bars_png = out / "indicators.png"
    fig.savefig(bars_png, format="png")
    written.append(bars_png)
    return written


# --------------------------------------------------------------------------
# tables and comparison

def emit_table(report: IndicatorReport, path) -> Path:
    """Per-run indicator table: raw, adjusted, and positive forms as CSV."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["indicator", "raw", "adjusted", "positive_raw", "positive_adjusted"])
        for name, axis in zip(INDICATOR_ROWS, AXES):
            writer.writerow([
                name,
                repr(report.raw[name]),
                repr(report.adjusted[name]),
                repr(report.positive_raw[axis]),
                repr(report.positive_adjusted[axis]),
            ])
    return path


@dataclass(frozen=True)
class Comparison:
    names: tuple[str, ...]
    payloads: tuple[dict, ...]
    raw_areas: tuple[float, ...]
    adjusted_areas: tuple[float, ...]


def compare_tokens(
    reports: Sequence[IndicatorReport], names: Optional[Sequence[str]] = None
) -> Comparison:
    """Cross-token comparison: per-token radar payloads and polygon areas."""
    if len(reports) < 2:
        raise EmptyInput("comparison needs at least two reports")
    if names is None:
        names = [f"token_{i}" for i in range(len(reports))]
    if len(names) != len(reports):
        raise MismatchedAxes("one name per report required")
    payloads = []
    for report in reports:
        payload = radar_payload(report)
        if payload["axes"] != list(AXES):
            raise MismatchedAxes(f"unexpected axes: {payload['axes']}")
        payloads.append(payload)
    raw_areas = tuple(
        shoelace_area(polygon_vertices(p["raw"])) for p in payloads)
    adjusted_areas = tuple(
        shoelace_area(polygon_vertices(p["adjusted"])) for p in payloads)
    return Comparison(
        names=tuple(names),
        payloads=tuple(payloads),
        raw_areas=raw_areas,
        adjusted_areas=adjusted_areas,
    )


def write_comparison_csv(comparison: Comparison, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["token"]
        for axis in AXES:
            header.extend([f"{axis}_raw", f"{axis}_adjusted"])
        header.extend(["area_raw", "area_adjusted"])
        writer.writerow(header)
        for i, name in enumerate(comparison.names):
            row = [name]
            payload = comparison.payloads[i]
            for j in range(len(AXES)):
                row.extend([repr(payload["raw"][j]), repr(payload["adjusted"][j])])
            row.extend([repr(comparison.raw_areas[i]),
                        repr(comparison.adjusted_areas[i])])
            writer.writerow(row)
    return path


def format_comparison_text(comparison: Comparison) -> str:
    """Aligned text table of positive indicators and areas per token."""
    headers = ["axis"] + [f"{n} (raw/adj)" for n in comparison.names]
    rows = []
    for j, axis in enumerate(AXES):
        row = [AXIS_LABELS[axis]]
        for payload in comparison.payloads:
            row.append(f"{payload['raw'][j]:.3f}/{payload['adjusted'][j]:.3f}")
        rows.append(row)
    area_row = ["polygon area"]
    for i in range(len(comparison.names)):
        area_row.append(
            f"{comparison.raw_areas[i]:.3f}/{comparison.adjusted_areas[i]:.3f}")
    rows.append(area_row)
    widths = [max(len(str(r[c])) for r in [headers] + rows)
              for c in range(len(headers))]
    lines = []
    for r in [headers] + rows:
        lines.append("  ".join(str(cell).ljust(widths[c])
                               for c, cell in enumerate(r)).rstrip())
        if r is headers:
            lines.append("  ".join("-" * widths[c] for c in range(len(headers))))
    return "\n".join(lines) + "\n"


def emit_comparison(comparison: Comparison, out_dir) -> dict[str, Path]:
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": write_comparison_csv(comparison, out / "comparison.csv"),
        "text": out / "comparison.txt",
    }
    paths["text"].write_text(format_comparison_text(comparison), encoding="utf-8")

    n = len(comparison.names)
    fig = Figure(figsize=(4.6 * n, 4.8), dpi=100)
    FigureCanvasAgg(fig)
    for i, name in enumerate(comparison.names):
        ax = fig.add_subplot(1, n, i + 1, projection="polar")
        payload = comparison.payloads[i]
        angles = [math.pi / 2 - j * (2 * math.pi / len(AXES))
                  for j in range(len(AXES))]
        for which, color in (("raw", "#4c78a8"), ("adjusted", "#e45756")):
            values = payload[which]
            ax.plot(angles + angles[:1], list(values) + [values[0]],
                    color=color, linewidth=1.2, label=which)
            ax.fill(angles + angles[:1], list(values) + [values[0]],
                    color=color, alpha=0.18)
        ax.set_xticks(angles)
        ax.set_xticklabels([AXIS_LABELS[a] for a in AXES], fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_yticks([0.5, 1.0])
        ax.tick_params(axis="y", labelsize=6)
        ax.set_title(name, fontsize=10)
        if i == 0:
            ax.legend(loc="lower left", bbox_to_anchor=(-0.15, -0.15), fontsize=7)
    fig.tight_layout()
    png = out / "comparison.png"
    fig.savefig(png, format="png")
    paths["png"] = png
    return paths
