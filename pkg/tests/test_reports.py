import numpy as np
import pandas as pd

from data_service import prepare_document
from reports import (
    ablation_figure,
    layout_graph_figure,
    loss_curve_figure,
    plotly_layout,
    pretrain_ablation_figure,
    write_layout_graph,
    write_loss_curve,
    write_pretrain_ablation_chart,
)


def test_layout_merge_keeps_base_axis_style():
    layout = plotly_layout(yaxis=dict(title="loss"))
    assert layout["yaxis"]["title"] == "loss"
    assert "gridcolor" in layout["yaxis"]
    assert "title" not in plotly_layout()["yaxis"]


def test_loss_curve_with_dev_scores():
    log = pd.DataFrame({"step": [0, 1, 2], "loss": [2.0, 1.5, 1.2], "dev_f1": [np.nan, 0.4, np.nan]})
    fig = loss_curve_figure(log)
    assert [t.name for t in fig.data] == ["loss", "dev F1"]
    assert list(fig.data[1].x) == [1]


def test_loss_curve_without_dev_scores():
    log = pd.DataFrame({"step": [0, 1], "loss": [1.0, 0.5], "dev_f1": [np.nan, np.nan]})
    assert len(loss_curve_figure(log).data) == 1


def test_empty_log_writes_nothing(tmp_path):
    assert write_loss_curve(pd.DataFrame(columns=["step", "loss"]), str(tmp_path / "x.html")) is None


def test_ablation_uses_mean_rows():
    table = pd.DataFrame(
        {
            "variant": ["baseline", "baseline", "+gcn", "+gcn"],
            "seed": ["0", "mean", "0", "mean"],
            "f1": [0.5, 0.5, 0.7, 0.7],
            "f1_std": [np.nan, 0.0, np.nan, 0.0],
        }
    )
    fig = ablation_figure(table)
    assert list(fig.data[0].x) == ["baseline", "+gcn"]


def test_layout_graph(tmp_path, two_line_doc):
    prepared = prepare_document(two_line_doc)
    fig = layout_graph_figure(prepared.doc, prepared.graph)
    assert len(fig.layout.shapes) == 6
    undirected = {tuple(sorted(e)) for e in prepared.graph.edge_set()}
    edge_trace = fig.data[0]
    assert list(edge_trace.x).count(None) == len(undirected)
    path = write_layout_graph(prepared.doc, prepared.graph, str(tmp_path / "graphs" / "two-line.html"))
    assert path and (tmp_path / "graphs" / "two-line.html").read_text().startswith("<html")


def test_pretraining_ablation_draws_mean_curves(tmp_path):
    curves = pd.DataFrame(
        {
            "variant": ["baseline"] * 3 + ["+gcn"] * 3,
            "seed": ["0", "0", "mean", "0", "0", "mean"],
            "step": [0, 1, 0, 0, 1, 0],
            "loss": [3.0, 2.5, 3.0, 2.9, 2.2, 2.9],
            "loss_std": [np.nan, np.nan, 0.0, np.nan, np.nan, 0.0],
        }
    )
    fig = pretrain_ablation_figure(curves)
    assert [t.name for t in fig.data] == ["baseline", "+gcn"]
    assert list(fig.data[1].y) == [2.9]
    assert write_pretrain_ablation_chart(curves.iloc[0:0], str(tmp_path / "none.html")) is None
    assert write_pretrain_ablation_chart(curves, str(tmp_path / "ablation.html"))
