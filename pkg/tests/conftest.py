# -*- coding: utf-8 -*-
"""Fixtures compartidos: generadores sembrados, almacenes pequeños y datasets de scikit-learn."""
import numpy as np
import pandas as pd
import pytest
from sklearn import datasets

from mod_analysis import analyze
from mod_data import CaseStore, FeatureAttribute

# escala de escritorio: mismas aserciones, muestras más chicas
SMALL_CONFIG = {
    "analysis": {"sample_size": 300, "coalition_samples": 64, "eval_cases": 80, "grid_bootstrap": 120},
}

IRIS_NAMES = ["sepal_length", "sepal_width", "petal_length", "petal_width"]


def build_store(df, kinds=None, **attr_kwargs):
    """CaseStore con tipos explícitos; `kinds` = {columna: tipo}, el resto continuo."""
    kinds = kinds or {}
    feats = []
    for col in df.columns:
        extra = dict(attr_kwargs.get(col, {}))
        declared = extra.pop("allows_null", False)
        allows_null = bool(df[col].isna().any()) or declared
        feats.append(FeatureAttribute(name=str(col), kind=kinds.get(col, "continuous"),
                                      allows_null=allows_null, **extra))
    store = CaseStore(feats)
    store.train(df.to_dict("records"))
    return store


@pytest.fixture
def make_store():
    return build_store


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def iris_frame():
    data = datasets.load_iris()
    df = pd.DataFrame(data.data, columns=IRIS_NAMES)
    df["species"] = [str(data.target_names[t]) for t in data.target]
    return df


@pytest.fixture(scope="session")
def iris_analyzed(iris_frame):
    """(store, model) de iris con análisis sin target; no modificar en los tests."""
    store = build_store(iris_frame, {"species": "nominal"})
    model = analyze(store, config=SMALL_CONFIG, seed=0)
    return store, model


@pytest.fixture(scope="session")
def cancer_frame():
    data = datasets.load_breast_cancer()
    df = pd.DataFrame(data.data, columns=[f"f{i}" for i in range(data.data.shape[1])])
    df["diagnosis"] = [str(data.target_names[t]) for t in data.target]
    return df


@pytest.fixture
def blob_frame():
    """Blob gaussiano 2-D de 200 casos."""
    r = np.random.default_rng(7)
    return pd.DataFrame(r.normal(0.0, 1.0, size=(200, 2)), columns=["x", "y"])
