# -*- coding: utf-8 -*-
import math

import numpy as np
import pandas as pd
import pytest

from errors import DomainError, NotFoundError
from mod_analysis import UncertaintyModel, analyze
from mod_data import FeatureAttribute
from mod_query import Goal, Query, influential_cases
from mod_react import (
    boundary_cases, boundary_value, case_contributions, case_residuals, local_deviations, nominal_branch,
    predict_matrix, react_aggregate, react_discriminative, react_generative, residual_conviction,
)
from mod_surprisal import initial_deviations
from tests.conftest import SMALL_CONFIG, build_store


def _setosa_context(iris_frame):
    row = iris_frame.iloc[0]
    return {"petal_length": row["petal_length"], "petal_width": row["petal_width"]}


# ==========================================
# 1. PREDICCIÓN PONDERADA
# ==========================================
def test_predict_matrix_kinds():
    cont = FeatureAttribute("x")
    pred, res, mass = predict_matrix(cont, [[1.0, 3.0]], [[0.5, 0.5]])
    assert pred[0] == pytest.approx(2.0)
    assert res[0] == pytest.approx(1.0)
    assert mass is None

    nom = FeatureAttribute("c", kind="nominal")
    pred, res, mass = predict_matrix(nom, [[0.0, 1.0, 1.0]], [[0.5, 0.25, 0.25]], n_classes=3)
    assert mass[0].tolist() == pytest.approx([0.5, 0.5, 0.0])
    assert pred[0] == 0.0
    assert res[0] == pytest.approx(0.5)

    cyc = FeatureAttribute("a", kind="cyclic", cycle_period=360.0)
    pred, _, _ = predict_matrix(cyc, [[350.0, 10.0]], [[0.5, 0.5]])
    assert min(pred[0], 360.0 - pred[0]) == pytest.approx(0.0, abs=1e-9)

    ordi = FeatureAttribute("o", kind="ordinal", ordinal_ranks=["a", "b", "c"])
    pred, _, _ = predict_matrix(ordi, [[0.0, 2.0, 2.0]], [[0.2, 0.4, 0.4]])
    assert pred[0] == 2.0


def test_predict_matrix_ignores_nulls_and_zero_weights():
    cont = FeatureAttribute("x", allows_null=True)
    pred, _, _ = predict_matrix(cont, [[np.nan, 4.0, 100.0]], [[0.9, 0.1, 0.0]])
    assert pred[0] == pytest.approx(4.0)
    pred, res, _ = predict_matrix(cont, [[np.nan]], [[1.0]])
    assert math.isnan(pred[0]) and math.isnan(res[0])


# ==========================================
# 2. REACT DISCRIMINATIVO
# ==========================================
def test_react_discriminative_iris(iris_analyzed, iris_frame):
    store, model = iris_analyzed
    res = react_discriminative(store, model, _setosa_context(iris_frame), ["species", "sepal_length"],
                               details={"influential_cases", "residuals", "categorical_probabilities",
                                        "case_contributions"})
    assert res.values["species"] == "setosa"
    assert 4.0 < res.values["sepal_length"] < 6.0
    probs = res.details["categorical_probabilities"]["species"]
    assert sum(probs.values()) == pytest.approx(1.0)
    assert probs["setosa"] == max(probs.values())
    infl = res.details["influential_cases"]["species"]
    assert sum(e["weight"] for e in infl) == pytest.approx(1.0)
    assert res.details["residuals"]["species"] >= 0.0
    assert len(res.details["case_contributions"]["sepal_length"]) == len(res.details["influential_cases"]["sepal_length"])
    assert res.to_dict()["mode"] == "discriminative"


def test_react_excludes_own_case(iris_analyzed):
    store, model = iris_analyzed
    snap = store.snapshot
    context = {"petal_length": 1.4, "petal_width": 0.2}
    res = react_discriminative(store, model, context, ["sepal_width"], details={"influential_cases"}, case_id=0)
    ids = [e["id"] for e in res.details["influential_cases"]["sepal_width"]]
    assert 0 not in ids
    assert snap.n == 150


def test_react_action_validation(iris_analyzed):
    store, model = iris_analyzed
    with pytest.raises(DomainError):
        react_discriminative(store, model, {"petal_length": 1.4}, [])
    with pytest.raises(DomainError):
        react_discriminative(store, model, {"petal_length": 1.4}, ["petal_length"])
    with pytest.raises(DomainError):
        react_discriminative(store, model, {"petal_length": 1.4}, ["nope"])


def test_react_with_goals(make_store):
    df = pd.DataFrame({"x": np.linspace(0, 1, 21), "y": np.linspace(0, 1, 21) ** 2, "z": np.arange(21.0)})
    store = make_store(df)
    q = Query(context={"x": 0.5}, k=5, goals=[Goal("y", "max")])
    res = react_discriminative(store, None, q, ["z"])
    # y se fija con el caso influyente de mayor y; z se predice con ese contexto
    assert res.values["y"] == pytest.approx(df["y"].iloc[12])
    assert res.values["z"] == pytest.approx(12.0, abs=1.0)


# ==========================================
# 3. REACT GENERATIVO
# ==========================================
def test_generative_is_seeded(iris_analyzed, iris_frame):
    store, model = iris_analyzed
    ctx = _setosa_context(iris_frame)
    a = react_generative(store, model, ctx, ["sepal_length", "species"], conviction=1.0, seed=5)
    b = react_generative(store, model, ctx, ["sepal_length", "species"], conviction=1.0, seed=5)
    assert a.values == b.values
    assert a.mode == "generative" and a.conviction == 1.0


def test_generative_high_conviction_stays_close(iris_analyzed, iris_frame):
    store, model = iris_analyzed
    ctx = _setosa_context(iris_frame)
    draws = [react_generative(store, model, ctx, ["sepal_length"], conviction=50.0, seed=s).values["sepal_length"]
             for s in range(40)]
    assert 4.0 < np.mean(draws) < 6.0
    assert np.std(draws) < 0.6


def test_generative_respects_bounds(make_store):
    r = np.random.default_rng(2)
    df = pd.DataFrame({"x": r.uniform(0, 1, 100), "y": r.uniform(0, 1, 100)})
    store = make_store(df, y={"bounds": (0.0, 1.0)})
    for s in range(30):
        v = react_generative(store, None, {"x": 0.5}, ["y"], conviction=0.2, seed=s).values["y"]
        assert 0.0 <= v <= 1.0


def test_generative_conviction_validation(iris_analyzed):
    store, model = iris_analyzed
    with pytest.raises(DomainError):
        react_generative(store, model, {}, ["species"], conviction=0.0)


def test_generative_branch_detail(iris_analyzed, iris_frame):
    store, model = iris_analyzed
    res = react_generative(store, model, _setosa_context(iris_frame), ["species"], seed=1, details={"branches"})
    assert res.details["branches"]["species"] in {"influence", "marginal", "uniform"}


def test_nominal_branch_frequencies(make_store):
    df = pd.DataFrame({"c": ["a", "b", "c", "d"] * 10})
    store = make_store(df, {"c": "nominal"}, c={"domain": ["a", "b", "c", "d"]})
    snap = store.snapshot
    rng = np.random.default_rng(0)
    mass = np.array([1.0, 0.0, 0.0, 0.0])
    b = 0.5
    n = 20000
    counts = {"influence": 0, "marginal": 0, "uniform": 0}
    for _ in range(n):
        _, branch = nominal_branch(snap, 0, mass, b, rng)
        counts[branch] += 1
    assert counts["influence"] / n == pytest.approx(1 - b, abs=0.015)
    assert counts["marginal"] / n == pytest.approx(b - b * b, abs=0.015)
    assert counts["uniform"] / n == pytest.approx(b * b, abs=0.015)


# ==========================================
# 4. EXPLICACIONES
# ==========================================
def test_residual_conviction_positive(iris_analyzed):
    store, model = iris_analyzed
    rc = residual_conviction(store, model, 10, "petal_width")
    assert rc > 0 and math.isfinite(rc)
    rc = residual_conviction(store, model, 10, "species")
    assert rc > 0
    with pytest.raises(NotFoundError):
        residual_conviction(store, model, 999, "species")


def test_boundary_value_threshold(make_store):
    x = np.round(np.arange(0.0, 10.0, 0.1), 1)
    df = pd.DataFrame({"x": x, "y": np.where(x < 5.0, "lo", "hi")})
    store = make_store(df, {"y": "nominal"})
    out = boundary_value(store, None, {"x": 4.0, "y": "lo"}, "x", "y")
    assert 0.8 < out["boundary"] < 1.1
    assert out["negative"] is None
    with pytest.raises(DomainError):
        boundary_value(store, None, {"x": 4.0, "y": "lo"}, "y", "x")


def test_boundary_value_unbounded_without_influence(make_store):
    x = np.round(np.arange(0.0, 10.0, 0.1), 1)
    df = pd.DataFrame({"x": x, "z": np.tile([0.0, 1.0], 50), "y": np.where(x < 5.0, "lo", "hi")})
    store = make_store(df, {"y": "nominal"})
    q = pd.DataFrame({"y": [1.0, 0.0, 0.0]}, index=["x", "z", "y"])
    model = UncertaintyModel(deviations=initial_deviations(store.snapshot), influence=q)
    out = boundary_value(store, model, {"x": 4.0, "z": 0.0, "y": "lo"}, "z", "y")
    assert out == {"boundary": "unbounded", "positive": None, "negative": None}
    # el piso de q sigue dando peso a z al consultar
    weights = model.feature_weights("y", ["x", "z"])
    assert weights["z"] == pytest.approx(0.01 / 1.02)
    assert weights["x"] + weights["z"] == pytest.approx(1.0)


def test_boundary_cases_shape(iris_analyzed, iris_frame):
    store, model = iris_analyzed
    values = iris_frame.iloc[60].to_dict()
    out = boundary_cases(store, model, values, ["petal_length", "petal_width"], ["species"], k=5)
    assert len(out) == 5
    ratios = [o["ratio"] for o in out]
    assert ratios == sorted(ratios, reverse=True)
    with pytest.raises(DomainError):
        boundary_cases(store, model, values, ["species"], ["species"])


def test_case_contributions_nominal(make_store):
    df = pd.DataFrame({"x": [0.0, 0.1, 0.2, 5.0], "c": ["a", "a", "b", "b"]})
    store = make_store(df, {"c": "nominal"})
    infl = influential_cases(store, None, Query(context={"x": 0.1}, k=3))
    out = case_contributions(store, infl, "c")
    assert sorted(o["id"] for o in out) == sorted(infl.case_ids.tolist())
    assert all(o["contribution"] >= -1e-12 for o in out if o["id"] in (0, 1))


def test_local_deviations_shape(iris_analyzed):
    store, model = iris_analyzed
    loc = local_deviations(store, model)
    assert loc.shape == (150, 5)
    assert np.all(loc > 0)
    assert local_deviations(store, model) is loc


def test_case_residuals_exclude_own_feature(make_store):
    r = np.random.default_rng(12)
    store = make_store(pd.DataFrame({"x": r.uniform(0, 10, 100), "y": r.normal(0, 1, 100)}))
    wide = initial_deviations(store.snapshot, overrides={"x": 2.0, "y": 0.05})
    res = case_residuals(store, wide, "y")
    assert res.shape == (100,)
    assert np.all(res >= 0.05)
    # y fuera del contexto: los vecinos no se pegan al propio valor
    assert res.mean() > 0.4
    assert res.mean() > 5 * local_deviations(store, wide)[:, 1].mean()
    assert case_residuals(store, wide, "y") is res


def test_single_feature_residual_is_marginal(make_store):
    store = make_store(pd.DataFrame({"x": [0.0, 1.0, 2.0, 3.0, 4.0]}))
    assert case_residuals(store, None, "x").tolist() == pytest.approx([1.2] * 5)


# ==========================================
# 5. REACT AGREGADO
# ==========================================
def test_react_aggregate_iris(iris_analyzed):
    store, model = iris_analyzed
    nominal = react_aggregate(store, model, "species", n=200, seed=1)
    assert nominal["accuracy"] >= 0.93
    assert -1.0 <= nominal["mcc"] <= 1.0
    cont = react_aggregate(store, model, "petal_width", n=200, seed=1)
    assert cont["r2"] > 0.8
    assert cont["spearman"] > 0.8
    loo = react_aggregate(store, model, "species", scheme="loo")
    assert loo["n"] == 150
    with pytest.raises(DomainError):
        react_aggregate(store, model, "species", scheme="kfold")


def test_react_aggregate_iris_targeted(iris_frame):
    store = build_store(iris_frame, {"species": "nominal"})
    model = analyze(store, targets=["species"], config=SMALL_CONFIG, seed=0, grid_search=True)
    report = react_aggregate(store, model, "species", n=200, seed=1)
    assert report["accuracy"] >= 0.93


def test_react_aggregate_breast_cancer(cancer_frame):
    store = build_store(cancer_frame, {"diagnosis": "nominal"})
    model = analyze(store, targets=["diagnosis"], config=SMALL_CONFIG, seed=0, grid_search=True)
    report = react_aggregate(store, model, "diagnosis", n=200, seed=1)
    assert report["accuracy"] >= 0.92
