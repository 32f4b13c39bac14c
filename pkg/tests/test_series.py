# -*- coding: utf-8 -*-
import numpy as np
import pandas as pd
import pytest

from errors import DomainError, SchemaError
from mod_series import SeriesConfig, derive_series_features, react_series, rederive_series_features
from mod_surprisal import initial_deviations
from tests.conftest import build_store


def _series_store(df, kinds=None, **series_kwargs):
    store = build_store(df, kinds, t={"is_time": True})
    series_kwargs.setdefault("rate_orders", {"x": 1})
    series_kwargs.setdefault("lags", {"x": 2})
    return derive_series_features(store, SeriesConfig("t", **series_kwargs))


def _column(store, name):
    snap = store.snapshot
    return snap.X[:, snap.index_of(name)]


@pytest.fixture
def ramp():
    t = np.arange(60.0)
    return _series_store(pd.DataFrame({"t": t, "x": 3.0 * t}))


# ==========================================
# 1. CONFIGURACIÓN
# ==========================================
def test_series_config_validation(make_store):
    with pytest.raises(DomainError):
        SeriesConfig("t", rate_orders={"x": 3})
    with pytest.raises(DomainError):
        SeriesConfig("t", lags={"x": -1})
    store = make_store(pd.DataFrame({"t": [0.0, 1.0], "x": [1.0, 2.0]}))
    with pytest.raises(SchemaError):
        derive_series_features(store, SeriesConfig("t"))


def test_derived_names(ramp):
    names = ramp.series_config.derived
    assert names == ["t_delta", "x_delta", "x_lag1", "x_lag2"]
    assert set(names) <= set(ramp.snapshot.names)


# ==========================================
# 2. DERIVACIÓN
# ==========================================
def test_ramp_rates_and_lags(ramp):
    d = _column(ramp, "x_delta")
    assert np.isnan(d[0])
    assert np.allclose(d[1:], 3.0)
    assert np.allclose(_column(ramp, "t_delta")[1:], 1.0)
    lag2 = _column(ramp, "x_lag2")
    assert np.isnan(lag2[:2]).all()
    assert lag2[5] == pytest.approx(9.0)


def test_second_difference_of_square():
    t = np.arange(20.0)
    store = _series_store(pd.DataFrame({"t": t, "x": t ** 2}), rate_orders={"x": 2}, lags={"x": 0})
    d2 = _column(store, "x_delta2")
    assert np.isnan(d2[:2]).all()
    assert np.allclose(d2[2:], 2.0)


def test_panel_rows_stay_within_series():
    t = np.tile(np.arange(10.0), 2)
    df = pd.DataFrame({"t": t, "s": ["a"] * 10 + ["b"] * 10, "x": np.r_[np.arange(10.0), 100 - 2 * np.arange(10.0)]})
    store = _series_store(df, {"s": "nominal"}, id_features=["s"])
    d = _column(store, "x_delta")
    assert np.isnan(d[0]) and np.isnan(d[10])
    assert np.allclose(d[1:10], 1.0)
    assert np.allclose(d[11:], -2.0)


def test_progress_features():
    t = np.arange(5.0)
    store = _series_store(pd.DataFrame({"t": t, "x": t}), progress=True)
    assert _column(store, "series_progress").tolist() == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])
    assert _column(store, "series_time_to_end").tolist() == pytest.approx([4.0, 3.0, 2.0, 1.0, 0.0])


def test_rederive_is_idempotent_and_follows_train(ramp):
    before = ramp.snapshot.X.copy()
    rederive_series_features(ramp)
    assert np.array_equal(before, ramp.snapshot.X, equal_nan=True)
    ramp.train([{"t": 60.0, "x": 180.0}])
    assert _column(ramp, "x_delta")[-1] == pytest.approx(3.0)
    assert _column(ramp, "x_lag1")[-1] == pytest.approx(177.0)


# ==========================================
# 3. PRONÓSTICO
# ==========================================
def test_ramp_forecast_continues_trend(ramp):
    frame = react_series(ramp, None, {}, horizon=5)
    assert frame.columns[0] == "step"
    assert frame["step"].tolist() == [1, 2, 3, 4, 5]
    assert frame["t"].tolist() == pytest.approx([60.0, 61.0, 62.0, 63.0, 64.0])
    assert frame["x"].tolist() == pytest.approx([180.0, 183.0, 186.0, 189.0, 192.0])


def test_constant_series_stays_flat():
    t = np.arange(30.0)
    store = _series_store(pd.DataFrame({"t": t, "x": np.full(30, 5.0)}))
    frame = react_series(store, None, {}, horizon=4)
    assert frame["x"].tolist() == pytest.approx([5.0] * 4)


def test_panel_forecast_follows_requested_series():
    t = np.tile(np.arange(30.0), 2)
    df = pd.DataFrame({
        "t": t, "s": ["a"] * 30 + ["b"] * 30, "z": [1.0] * 30 + [7.0] * 30,
        "x": np.r_[np.arange(30.0), -2 * np.arange(30.0)],
    })
    store = _series_store(df, {"s": "nominal"}, id_features=["s"], stationary=["z"])
    frame = react_series(store, None, {"s": "b"}, horizon=3)
    assert (frame["s"] == "b").all()
    assert frame["z"].tolist() == pytest.approx([7.0] * 3)
    assert frame["x"].iloc[0] == pytest.approx(-60.0, abs=0.5)
    assert (frame["x"].diff().dropna() < 0).all()
    with pytest.raises(DomainError):
        react_series(store, None, {"s": "zz"}, horizon=1)


def test_sine_forecast_beats_persistence():
    t = np.arange(200.0)
    store = _series_store(pd.DataFrame({"t": t, "x": np.sin(t / 3.0)}))
    wide = initial_deviations(store.snapshot, overrides={"x": 0.05, "x_delta": 0.05, "x_lag1": 0.05, "x_lag2": 0.05})
    frame = react_series(store, wide, {}, horizon=3)
    truth = np.sin(np.arange(200.0, 203.0) / 3.0)
    model_err = np.abs(frame["x"].to_numpy() - truth).mean()
    persistence_err = np.abs(np.sin(199.0 / 3.0) - truth).mean()
    assert model_err < persistence_err


def test_generative_ensemble_adds_spread(ramp):
    frame = react_series(ramp, None, {}, horizon=2, mode="generative", ensemble=3, seed=4)
    assert {"x", "x_mad"} <= set(frame.columns)
    assert (frame["x_mad"] >= 0).all()
    again = react_series(ramp, None, {}, horizon=2, mode="generative", ensemble=3, seed=4)
    pd.testing.assert_frame_equal(frame, again)


def test_react_series_validation(ramp, make_store):
    with pytest.raises(DomainError):
        react_series(ramp, None, {}, horizon=0)
    with pytest.raises(DomainError):
        react_series(ramp, None, {}, horizon=1, mode="sideways")
    plain = make_store(pd.DataFrame({"t": [0.0, 1.0], "x": [1.0, 2.0]}))
    with pytest.raises(DomainError):
        react_series(plain, None, {}, horizon=1)
