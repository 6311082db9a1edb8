"""
Early-Exit Engine - Sweep Reports

Turns sweep records into:
- a CSV (pandas) with a fixed column order, sorted by reduction factor
- a standalone SVG scatter of accuracy against reduction factor
- an optional interactive plotly chart (HTML, or a figure for the dashboard)
- a rich console table
"""

import logging
import os
from typing import Dict, List, Sequence
from xml.sax.saxutils import escape

import pandas as pd
import plotly.graph_objects as go
from rich.table import Table

from config.settings import CSV_COLUMNS, SERIES_COLORS
from models.errors import ArtifactIOError
from models.records import SweepRecord

logger = logging.getLogger(__name__)

SVG_WIDTH = 640
SVG_HEIGHT = 420
SVG_MARGIN = 56


def records_to_frame(records: Sequence[SweepRecord]) -> pd.DataFrame:
    """Records in CSV column order, sorted by reduction factor then config id."""
    frame = pd.DataFrame([r.to_row() for r in records], columns=CSV_COLUMNS)
    if frame.empty:
        return frame
    return frame.sort_values(["reduction_factor", "config_id"], kind="mergesort").reset_index(drop=True)


def write_csv(records: Sequence[SweepRecord], path: str) -> pd.DataFrame:
    frame = records_to_frame(records)
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote {len(frame)} records to {path}")
    return frame


def load_sweep_frame(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise ArtifactIOError(f"sweep file not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise ArtifactIOError(f"{path} is missing columns {missing}")
    return frame


# =============================================================================
# SVG
# =============================================================================

def _scale(value: float, low: float, high: float, start: float, stop: float) -> float:
    if high == low:
        return (start + stop) / 2
    return start + (value - low) / (high - low) * (stop - start)


def render_svg(frame: pd.DataFrame, title: str = "Accuracy vs. reduction factor") -> str:
    """
    Scatter of accuracy (y) against reduction factor (x), one polyline per
    series. Invalid configurations are left out.
    """
    valid = frame[frame["valid"].astype(bool)] if not frame.empty else frame
    parts: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<text x="{SVG_WIDTH / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    left, right = SVG_MARGIN, SVG_WIDTH - SVG_MARGIN / 2
    top, bottom = SVG_MARGIN, SVG_HEIGHT - SVG_MARGIN

    parts.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>')
    parts.append(f'<text x="{(left + right) / 2}" y="{SVG_HEIGHT - 14}" text-anchor="middle">'
                 f'reduction factor</text>')
    parts.append(f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(top + bottom) / 2})">accuracy</text>')

    if not valid.empty:
        x_low, x_high = float(valid["reduction_factor"].min()), float(valid["reduction_factor"].max())
        y_low, y_high = float(valid["accuracy"].min()), float(valid["accuracy"].max())
        for value, label in ((x_low, left), (x_high, right)):
            parts.append(f'<text x="{label}" y="{bottom + 16}" text-anchor="middle">{value:.2f}</text>')
        for value, label in ((y_low, bottom), (y_high, top)):
            parts.append(f'<text x="{left - 6}" y="{label + 4}" text-anchor="end">{value:.3f}</text>')

        legend_y = top
        for name, group in valid.groupby("policy", sort=True):
            color = SERIES_COLORS.get(name, "#6b7280")
            group = group.sort_values("reduction_factor")
            points = [
                (_scale(float(r["reduction_factor"]), x_low, x_high, left, right),
                 _scale(float(r["accuracy"]), y_low, y_high, bottom, top))
                for _, r in group.iterrows()
            ]
            if len(points) > 1:
                path = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
                parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for x, y in points:
                parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.5" fill="{color}"/>')
            parts.append(f'<rect x="{right - 90}" y="{legend_y - 9}" width="10" height="10" fill="{color}"/>')
            parts.append(f'<text x="{right - 75}" y="{legend_y}">{escape(name)}</text>')
            legend_y += 16

    parts.append("</svg>")
    return "\n".join(parts)


def write_svg(frame: pd.DataFrame, path: str, title: str = "Accuracy vs. reduction factor") -> None:
    try:
        with open(path, "w") as f:
            f.write(render_svg(frame, title))
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}")
    logger.info(f"Wrote chart {path}")


# =============================================================================
# Plotly & rich
# =============================================================================

def build_figure(frame: pd.DataFrame) -> go.Figure:
    """Interactive accuracy / reduction-factor chart over valid configurations."""
    fig = go.Figure()
    valid = frame[frame["valid"].astype(bool)] if not frame.empty else frame
    if not valid.empty:
        for name, group in valid.groupby("policy", sort=True):
            group = group.sort_values("reduction_factor")
            fig.add_trace(go.Scatter(
                x=group["reduction_factor"],
                y=group["accuracy"],
                mode="lines+markers",
                name=name,
                marker=dict(color=SERIES_COLORS.get(name, "#6b7280")),
                text=group["config_id"],
                hovertemplate="%{text}<br>RF %{x:.3f}<br>accuracy %{y:.4f}<extra></extra>",
            ))
    fig.update_layout(
        xaxis_title="reduction factor",
        yaxis_title="accuracy",
        legend_title="series",
        template="plotly_white",
    )
    return fig


def write_html(frame: pd.DataFrame, path: str) -> None:
    build_figure(frame).write_html(path, include_plotlyjs="cdn")
    logger.info(f"Wrote interactive chart {path}")


def render_table(frame: pd.DataFrame, title: str = "Sweep results") -> Table:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    columns: Dict[str, str] = {
        "config_id": "config",
        "accuracy": "acc",
        "perplexity": "ppl",
        "reduction_factor": "RF",
        "mean_exit_depth": "depth",
        "degenerate_fraction": "degen",
        "valid": "valid",
    }
    for label in columns.values():
        table.add_column(label, justify="left" if label == "config" else "right")
    for _, row in frame.iterrows():
        table.add_row(
            str(row["config_id"]),
            f"{row['accuracy']:.4f}",
            f"{row['perplexity']:.3f}",
            f"{row['reduction_factor']:.3f}",
            f"{row['mean_exit_depth']:.2f}",
            f"{row['degenerate_fraction']:.2f}",
            "yes" if bool(row["valid"]) else "[red]no[/red]",
        )
    return table
