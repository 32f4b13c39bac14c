# -*- coding: utf-8 -*-
from io import BytesIO

import networkx as nx
import numpy as np
import pandas as pd
import pytest

from errors import DomainError
from mod_insight import CausalReport
from repanomalias import anomalies_to_excel, build_anomaly_table, build_rc_heatmap
from repcausal import build_graph_figure, build_heatmap, build_mcr_frame
from repprediccion import build_influence_chart, build_influence_frame, parse_context


@pytest.fixture
def cases():
    return pd.DataFrame({
        "id": [0, 1, 2],
        "surprisal_contribution": [1.0, 9.0, 2.0],
        "sigma": [1.0, 1.0, 1.0],
        "similarity_conviction": [1.1, 0.1, 0.9],
        "cluster": [1, -1, 1],
        "group_conviction": [1.0, 0.2, 1.0],
        "minimal_conviction": [1.0, 0.1, 0.9],
        "anomalous": [False, True, False],
    })


# ==========================================
# 1. PREDICCIÓN
# ==========================================
def test_parse_context(make_store):
    df = pd.DataFrame({"x": [1.0, 2.0], "c": [3, 4], "o": ["lo", "hi"]})
    store = make_store(df, {"c": "nominal", "o": "ordinal"}, o={"ordinal_ranks": ["lo", "hi"]})
    ctx = parse_context(store, {"x": " 2.5 ", "c": "4", "o": "hi", "vacío": ""})
    assert ctx == {"x": 2.5, "c": 4, "o": "hi"}
    with pytest.raises(DomainError):
        parse_context(store, {"x": "abc"})


def test_influence_frame_and_chart():
    entries = [
        {"id": 3, "surprisal": 0.5, "probability": 0.6, "weight": 0.2, "session": "s", "train_index": 3},
        {"id": 1, "surprisal": 0.0, "probability": 1.0, "weight": 0.8, "session": "s", "train_index": 1},
    ]
    frame = build_influence_frame(entries)
    assert frame["id"].tolist() == [1, 3]
    fig = build_influence_chart(frame)
    assert list(fig.data[0].x) == ["1", "3"]


# ==========================================
# 2. ANOMALÍAS
# ==========================================
def test_anomaly_table_orders_and_renames(cases):
    table = build_anomaly_table(cases)
    assert table["ID"].tolist() == [1, 2, 0]
    assert "sigma" not in table.columns
    assert table.columns[-1] == "Anómalo"


def test_rc_heatmap(cases):
    assert build_rc_heatmap(cases) is None
    with_rc = cases.assign(rc_x=[1.0, 0.2, 0.8], rc_y=[1.2, 0.5, 1.0])
    fig = build_rc_heatmap(with_rc, top=2)
    assert list(fig.data[0].y) == ["1", "2"]
    assert build_anomaly_table(with_rc).columns[-2:].tolist() == ["rc_x", "rc_y"]


def test_anomalies_to_excel(cases):
    table = build_anomaly_table(cases)
    data = anomalies_to_excel(table)
    assert data[:2] == b"PK"
    back = pd.read_excel(BytesIO(data), sheet_name="Anomalias")
    assert back["ID"].tolist() == [1, 2, 0]


# ==========================================
# 3. CAUSALIDAD
# ==========================================
def test_heatmap_and_mcr_frame():
    iac = pd.DataFrame([[0.0, 1.5], [np.nan, 0.0]], index=["a", "b"], columns=["a", "b"])
    fig = build_heatmap(iac, "IAC")
    assert fig.layout.title.text == "IAC"
    report = CausalReport(iac=iac, iaac=iac, mcr={"a": 1.2, "b": 3.0}, edges=[], flagged=[])
    assert build_mcr_frame(report)["feature"].tolist() == ["b", "a"]


def test_graph_figure():
    graph = nx.DiGraph()
    graph.add_edge("x", "y", style="solid")
    graph.add_edge("y", "z", style="dashed")
    fig = build_graph_figure(graph, seed=1)
    assert len(fig.layout.annotations) == 2
    assert sorted(fig.data[0].text) == ["x", "y", "z"]
    assert build_graph_figure(nx.DiGraph()).data[0].x == ()
