"""
Optional HTML charts: training loss curves, the fine-tuning and pretraining
ablation comparisons and a document's layout graph. All figures share one
base layout.
"""

import copy
import logging
import os
from typing import Optional

import pandas as pd
import plotly.graph_objects as go

from doc_model import Document
from graph_builder import LayoutGraph

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Design tokens
# ---------------------------------------------------------------------------
C = {
    "bg": "#ffffff",
    "grid": "rgba(100,116,139,0.15)",
    "accent": "#6366f1",
    "accent2": "#818cf8",
    "green": "#10b981",
    "amber": "#f59e0b",
    "red": "#ef4444",
    "text": "#1e293b",
    "text2": "#475569",
    "muted": "#94a3b8",
}

# one color per ablation variant, in table order
VARIANT_COLORS = [C["muted"], C["amber"], C["green"], C["accent"]]

_PLOTLY_BASE = dict(
    paper_bgcolor=C["bg"],
    plot_bgcolor=C["bg"],
    font=dict(family="Inter, -apple-system, sans-serif", size=13, color=C["text"]),
    margin=dict(l=60, r=30, t=50, b=50),
    xaxis=dict(gridcolor=C["grid"], zerolinecolor=C["grid"], title_font=dict(size=12, color=C["text2"])),
    yaxis=dict(gridcolor=C["grid"], zerolinecolor=C["grid"], title_font=dict(size=12, color=C["text2"])),
    legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
)


def plotly_layout(**overrides):
    """Merged copy of the base layout; dict-valued keys such as yaxis are deep-merged."""
    out = copy.deepcopy(_PLOTLY_BASE)
    for k, v in overrides.items():
        if k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def _write(fig: go.Figure, path: str) -> Optional[str]:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.write_html(path, include_plotlyjs="cdn", full_html=True)
    except OSError as e:
        logger.warning("Could not write chart %s: %s", path, e)
        return None
    logger.info("Wrote chart %s", path)
    return path


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------
def loss_curve_figure(log: pd.DataFrame, title: str = "Training loss") -> go.Figure:
    """``log`` has step and loss columns; an optional dev_f1 column goes on a second axis."""
    fig = go.Figure()
    fig.add_trace(
        go.Scatter(
            x=log["step"], y=log["loss"], mode="lines", name="loss",
            line=dict(color=C["accent"], width=2),
            hovertemplate="step %{x}<br>loss %{y:.4f}<extra></extra>",
        )
    )
    if "dev_f1" in log.columns and log["dev_f1"].notna().any():
        dev = log.dropna(subset=["dev_f1"])
        fig.add_trace(
            go.Scatter(
                x=dev["step"], y=dev["dev_f1"], mode="lines+markers", name="dev F1", yaxis="y2",
                line=dict(color=C["green"], width=2), marker=dict(size=6),
            )
        )
        fig.update_layout(yaxis2=dict(title="dev F1", overlaying="y", side="right", range=[0, 1], showgrid=False))
    fig.update_layout(**plotly_layout(title=title, xaxis=dict(title="step"), yaxis=dict(title="loss")))
    return fig


def ablation_figure(table: pd.DataFrame) -> go.Figure:
    """Mean F1 per variant with the seed spread as error bars (rows where seed == 'mean')."""
    means = table[table["seed"] == "mean"]
    fig = go.Figure(
        go.Bar(
            x=means["variant"], y=means["f1"],
            error_y=dict(type="data", array=means["f1_std"].fillna(0.0), visible=True),
            marker_color=VARIANT_COLORS[: len(means)], marker_line_width=0,
            hovertemplate="<b>%{x}</b><br>F1 %{y:.4f}<extra></extra>",
        )
    )
    fig.update_layout(**plotly_layout(title="Entity F1 by variant", yaxis=dict(title="entity F1", range=[0, 1]), showlegend=False))
    return fig


def pretrain_ablation_figure(curves: pd.DataFrame) -> go.Figure:
    """Seed-mean MLM loss per step, one line per variant (rows where seed == 'mean')."""
    means = curves[curves["seed"] == "mean"]
    fig = go.Figure()
    for i, (variant, rows) in enumerate(means.groupby("variant", sort=False)):
        fig.add_trace(
            go.Scatter(
                x=rows["step"], y=rows["loss"], mode="lines", name=variant,
                line=dict(color=VARIANT_COLORS[i % len(VARIANT_COLORS)], width=2),
                hovertemplate=f"<b>{variant}</b><br>step %{{x}}<br>loss %{{y:.4f}}<extra></extra>",
            )
        )
    fig.update_layout(**plotly_layout(title="MLM pretraining loss by variant", xaxis=dict(title="step"), yaxis=dict(title="masked-token loss")))
    return fig


def layout_graph_figure(doc: Document, graph: LayoutGraph) -> go.Figure:
    """Token boxes with the capped skeleton edges drawn between box centers; y grows downward."""
    centers = [t.box.center for t in doc.tokens]
    edge_x, edge_y = [], []
    present = graph.edge_set()
    for k, l in graph.edges:
        if k < l or (l, k) not in present:
            edge_x += [centers[k][0], centers[l][0], None]
            edge_y += [centers[k][1], centers[l][1], None]
    fig = go.Figure()
    for t in doc.tokens:
        b = t.box
        fig.add_shape(type="rect", x0=b.x0, y0=b.y0, x1=b.x1, y1=b.y1, line=dict(color=C["muted"], width=1))
    fig.add_trace(go.Scatter(x=edge_x, y=edge_y, mode="lines", line=dict(color=C["accent2"], width=1), name="edges", hoverinfo="skip"))
    fig.add_trace(
        go.Scatter(
            x=[c[0] for c in centers], y=[c[1] for c in centers], mode="markers", name="tokens",
            marker=dict(size=5, color=C["accent"]),
            text=[f"{i}: {t.text}" for i, t in enumerate(doc.tokens)], hovertemplate="%{text}<extra></extra>",
        )
    )
    fig.update_layout(
        **plotly_layout(
            title=f"Layout graph {doc.doc_id}".strip(),
            xaxis=dict(range=[0, doc.page_width], showgrid=False),
            yaxis=dict(range=[doc.page_height, 0], showgrid=False, scaleanchor="x"),
        )
    )
    return fig


def write_loss_curve(log: pd.DataFrame, path: str, title: str = "Training loss") -> Optional[str]:
    if log.empty:
        return None
    return _write(loss_curve_figure(log, title), path)


def write_ablation_chart(table: pd.DataFrame, path: str) -> Optional[str]:
    return _write(ablation_figure(table), path)


def write_layout_graph(doc: Document, graph: LayoutGraph, path: str) -> Optional[str]:
    return _write(layout_graph_figure(doc, graph), path)


def write_pretrain_ablation_chart(curves: pd.DataFrame, path: str) -> Optional[str]:
    if curves.empty:
        return None
    return _write(pretrain_ablation_figure(curves), path)
