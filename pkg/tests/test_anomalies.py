# -*- coding: utf-8 -*-
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

import mod_anomalies
from errors import DomainError
from mod_analysis import analyze
from mod_anomalies import (
    Contributions, average_group_surprisal, cluster, conviction_clustering, detect_anomalies, exponential_kl,
    group_anomalousness, score_anomalies, similarity_conviction, surprisal_contribution, surprisal_contributions,
)
from tests.conftest import SMALL_CONFIG, build_store

N_BLOB, N_OUT = 200, 5


@pytest.fixture(scope="module")
def blob_with_outliers():
    r = np.random.default_rng(17)
    blob = r.normal(0.0, 1.0, size=(N_BLOB, 2))
    # atípicos aislados: más cerca del blob que entre sí
    angle = np.arange(N_OUT) * 2 * np.pi / N_OUT + r.uniform(0, 0.5)
    out = np.column_stack([10.0 * np.cos(angle), 10.0 * np.sin(angle)])
    df = pd.DataFrame(np.vstack([blob, out]), columns=["x", "y"])
    store = build_store(df)
    model = analyze(store, config=SMALL_CONFIG, seed=0)
    truth = np.array([0] * N_BLOB + [1] * N_OUT)
    return store, model, truth


@pytest.fixture(scope="module")
def two_blobs():
    r = np.random.default_rng(5)
    a = r.normal(0.0, 0.5, size=(120, 2))
    b = r.normal(10.0, 0.5, size=(120, 2))
    store = build_store(pd.DataFrame(np.vstack([a, b]), columns=["x", "y"]))
    return store, analyze(store, config=SMALL_CONFIG, seed=0)


# ==========================================
# 1. CONTRIBUCIONES Y CONVICCIÓN
# ==========================================
def test_outliers_have_larger_contribution(blob_with_outliers):
    store, model, truth = blob_with_outliers
    S = surprisal_contributions(store, model).S
    assert np.all(S >= 0)
    assert S[truth == 1].min() > np.median(S[truth == 0])
    assert surprisal_contribution(store, model, N_BLOB) == pytest.approx(S[N_BLOB])


def test_similarity_conviction_low_for_outliers(blob_with_outliers):
    store, model, _ = blob_with_outliers
    sc_out, sigma = similarity_conviction(store, model, N_BLOB + 1)
    assert sc_out == sigma
    sc_in, _ = similarity_conviction(store, model, 0)
    assert sc_out < 1.0
    assert sc_out < sc_in


# ==========================================
# 2. AGRUPAMIENTO
# ==========================================
def test_cluster_separates_blobs(two_blobs):
    store, model = two_blobs
    cmap = cluster(store, model)
    labels = np.array([cmap.labels[i] for i in range(240)])
    assert cmap.n_clusters >= 2
    first = pd.Series(labels[:120]).mode()[0]
    second = pd.Series(labels[120:]).mode()[0]
    assert first != -1 and second != -1
    assert first != second
    assert set(cmap.max_sigma) == set(cmap.max_surprisal)
    assert sorted(set(labels.tolist()) - {-1}) == list(range(1, cmap.n_clusters + 1))


def test_cluster_is_deterministic(two_blobs):
    store, model = two_blobs
    assert cluster(store, model, seed=3).labels == cluster(store, model, seed=3).labels


BRIDGE_SC = [2.0, 1.9, 1.8, 3.0, 2.9, 2.8, 0.9, 0.2, 0.2]


def _bridge_neighbors(to_a, to_b):
    return [
        {1: 0.5, 2: 0.5}, {0: 0.5, 2: 0.5}, {0: 0.4, 1: 0.4, 6: 0.2},
        {4: 0.5, 5: 0.5}, {3: 0.5, 5: 0.5}, {3: 0.5, 4: 0.5},
        {2: to_a, 3: to_b},
        {0: 1.0},
        {0: 0.5, 3: 0.5},
    ]


def test_bridge_goes_to_cluster_with_most_probability():
    labels = conviction_clustering(BRIDGE_SC, _bridge_neighbors(0.3, 0.7))
    a, b = labels[0], labels[3]
    assert a != b and -1 not in (a, b)
    assert labels[:3].tolist() == [a] * 3
    assert labels[3:6].tolist() == [b] * 3
    assert labels[6] == b
    # adjunto: un único cluster en su conjunto influyente
    assert labels[7] == a
    # vecinos en dos clusters: queda suelto
    assert labels[8] == -1


def test_bridge_skipped_while_neighbor_pending():
    sc = [2.5, 2.4, 1.0, 0.9, 3.0, 2.9]
    neighbors = [{3: 0.5, 2: 0.3, 1: 0.2}, {0: 1.0}, {0: 1.0}, {0: 0.5, 4: 0.3, 2: 0.2}, {5: 1.0}, {4: 1.0}]
    labels = conviction_clustering(sc, neighbors)
    assert labels[0] == labels[1] == labels[2] != -1
    assert labels[4] == labels[5] != labels[0]
    # sus vecinos terminan en dos clusters y el adjunto exige uno solo
    assert labels[3] == -1


# ==========================================
# 3. ANOMALÍA DE GRUPO
# ==========================================
def test_group_measures():
    assert average_group_surprisal([1.0, 3.0], [1.0, 3.0]) == pytest.approx(2.5)
    # todo el grupo en un solo bin equiprobable
    assert exponential_kl([1.0] * 5, [1.0] * 5, 1.0) == pytest.approx(math.log(10))
    assert exponential_kl([1.0] * 5, [1.0] * 5, 1.0, bins=4) == pytest.approx(math.log(4))
    # cuantiles exactos de la referencia: un caso por bin
    centers = stats.expon.ppf((np.arange(10) + 0.5) / 10, scale=2.0)
    assert exponential_kl(centers, np.ones(10), 2.0) == pytest.approx(0.0, abs=1e-12)


def test_density_spike_raises_kl_with_ordinary_ags(monkeypatch, make_store):
    n = 200
    spread = np.random.default_rng(8).exponential(1.0, size=n)
    spread /= spread.mean()
    S = np.r_[np.ones(n), spread]
    store = make_store(pd.DataFrame({"x": np.arange(2.0 * n), "g": ["spike"] * n + ["spread"] * n}),
                       {"g": "nominal"})
    fixed = Contributions(S=S, idx=np.zeros((2 * n, 1), dtype=np.int64), W=np.ones((2 * n, 1)))
    monkeypatch.setattr(mod_anomalies, "surprisal_contributions", lambda *args, **kwargs: fixed)
    groups = {g["group"]: g for g in group_anomalousness(store, None, "g")}
    assert groups["spike"]["ags"] == pytest.approx(groups["spread"]["ags"])
    assert groups["spike"]["conviction"] == pytest.approx(1.0)
    assert groups["spike"]["kl"] == pytest.approx(math.log(10))
    assert groups["spike"]["kl"] > groups["spread"]["kl"] + 0.1


def test_group_anomalousness(blob_with_outliers):
    store, _, truth = blob_with_outliers
    df = store.snapshot.to_frame()[["x", "y"]]
    df["g"] = np.where(truth == 1, "out", "in")
    labelled = build_store(df, {"g": "nominal"})
    groups = {g["group"]: g for g in group_anomalousness(labelled, None, "g")}
    assert groups["out"]["size"] == N_OUT
    assert groups["out"]["ags"] > groups["in"]["ags"]
    assert groups["out"]["conviction"] < 1.0 < groups["in"]["conviction"]
    assert groups["out"]["kl"] > groups["in"]["kl"]
    with pytest.raises(DomainError):
        group_anomalousness(labelled, None, "x")


def test_empty_group_warns(make_store):
    df = pd.DataFrame({"x": np.arange(10.0), "g": ["a", "b"] * 5})
    store = make_store(df, {"g": "nominal"}, g={"domain": ["a", "b", "c"]})
    with pytest.warns(UserWarning):
        out = group_anomalousness(store, None, "g")
    assert [g["group"] for g in out] == ["a", "b"]


# ==========================================
# 4. PIPELINE
# ==========================================
def test_detect_anomalies_finds_outliers(blob_with_outliers):
    store, model, truth = blob_with_outliers
    report = detect_anomalies(store, model)
    cols = {"id", "surprisal_contribution", "sigma", "similarity_conviction", "cluster", "group_conviction",
            "minimal_conviction", "anomalous"}
    assert cols <= set(report.cases.columns)
    scores = score_anomalies(report, truth)
    assert scores["roc_auc"] > 0.95
    assert scores["pr_auc"] > 0.8
    flagged = set(report.anomalous_ids)
    assert len(flagged & set(range(N_BLOB, N_BLOB + N_OUT))) >= N_OUT - 1
    assert report.to_dict()["threshold"] == 0.5


def test_residual_conviction_columns(blob_with_outliers):
    store, model, _ = blob_with_outliers
    config = {"anomalies": {"residual_convictions": True}}
    report = detect_anomalies(store, model, config=config, threshold=0.3)
    assert {"rc_x", "rc_y"} <= set(report.cases.columns)
    assert report.threshold == 0.3
    assert (report.cases["minimal_conviction"] <= report.cases["similarity_conviction"] + 1e-12).all()


def test_score_requires_both_classes(blob_with_outliers):
    store, model, _ = blob_with_outliers
    report = detect_anomalies(store, model)
    with pytest.raises(DomainError):
        score_anomalies(report, np.zeros(N_BLOB + N_OUT))


def test_duplicated_case_dominates_unique(blob_frame, make_store):
    df = pd.concat([blob_frame, pd.DataFrame({"x": [2.0] * 3 + [-2.0], "y": [0.0] * 4})], ignore_index=True)
    store = make_store(df)
    sc_dup, _ = similarity_conviction(store, None, 200)
    sc_unique, _ = similarity_conviction(store, None, 203)
    assert sc_dup > sc_unique
