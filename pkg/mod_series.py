# -*- coding: utf-8 -*-
"""
Series de tiempo y datos de panel: features derivados (tasas, Δ², rezagos,
progreso) y pronóstico paso a paso con react_series.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config import section
from errors import DomainError, SchemaError
from mod_data import FeatureAttribute, as_snapshot, decode_value, is_null
from mod_query import Query
from mod_react import react_discriminative, react_generative

logger = logging.getLogger(__name__)

PROGRESS_FEATURES = ("series_progress", "series_time_to_end", "series_event_index")


# ==========================================
# 1. CONFIGURACIÓN DE SERIES
# ==========================================
@dataclass
class SeriesConfig:
    time_feature: str
    id_features: list = field(default_factory=list)
    rate_orders: dict = None        # {feature: 0|1|2}; None = orden por defecto a cada continuo
    lags: dict = None               # {feature: n}; None = rezagos por defecto a cada feature base
    stationary: list = field(default_factory=list)
    progress: bool = False
    derived: list = field(default_factory=list)

    def __post_init__(self):
        for name, order in (self.rate_orders or {}).items():
            if not 0 <= int(order) <= 2:
                raise DomainError(f"{name}: orden de tasa fuera de [0, 2]")
        for name, n in (self.lags or {}).items():
            if int(n) < 0:
                raise DomainError(f"{name}: número de rezagos negativo")

    def base_features(self, features):
        derived = set(self.derived)
        return [a for a in features if a.name not in derived]

    def plan(self, base, config=None):
        """Órdenes de tasa y rezagos efectivos para los features base."""
        cfg = section(config, "series")
        fixed = {self.time_feature, *self.id_features, *self.stationary}
        rates, lags = {}, {}
        for a in base:
            if a.name in fixed:
                continue
            if a.kind == "continuous":
                rates[a.name] = int((self.rate_orders or {}).get(a.name, cfg["rate_order"]))
            lags[a.name] = int((self.lags or {}).get(a.name, cfg["lags"]))
        return rates, lags

    def derived_names(self, base, config=None):
        names = [f"{self.time_feature}_delta"]
        rates, lags = self.plan(base, config)
        for name, order in rates.items():
            if order >= 1:
                names.append(f"{name}_delta")
            if order >= 2:
                names.append(f"{name}_delta2")
        for name, n in lags.items():
            names.extend(f"{name}_lag{k}" for k in range(1, n + 1))
        if self.progress:
            names.extend(PROGRESS_FEATURES)
        return names

    def validate(self, snapshot):
        j = snapshot.index_of(self.time_feature)
        a = snapshot.features[j]
        if not a.is_time:
            raise SchemaError(f"{self.time_feature} no está declarado is_time")
        for name in [*self.id_features, *self.stationary]:
            snapshot.index_of(name)
        return self


# ==========================================
# 2. DERIVACIÓN
# ==========================================
def series_groups(snapshot, cfg):
    """Filas de cada serie ordenadas por tiempo; empates por train index."""
    tj = snapshot.index_of(cfg.time_feature)
    t = snapshot.X[:, tj]
    if cfg.id_features:
        keys = snapshot.X[:, snapshot.indices(cfg.id_features)]
        keys = np.where(np.isnan(keys), -1.0, keys)
        _, group = np.unique(keys, axis=0, return_inverse=True)
        group = np.asarray(group).reshape(-1)
    else:
        group = np.zeros(snapshot.n, dtype=np.int64)
    order = np.lexsort((snapshot.train_index, t, group))
    out = []
    for g in np.unique(group):
        rows = order[group[order] == g]
        tt = t[rows]
        if np.any(np.diff(tt[~np.isnan(tt)]) == 0):
            msg = f"Marcas de tiempo repetidas en una serie de {cfg.time_feature}; se desempata por train index"
            warnings.warn(msg)
            logger.warning(msg)
        out.append(rows)
    return out


def _derive_rows(X, rows, tj, columns, time_delta, rates, lags, progress):
    """Valores derivados de una serie; devuelve (filas, {nombre: valores})."""
    t = X[rows, tj]
    m = len(rows)
    dt = np.full(m, np.nan)
    dt[1:] = np.diff(t)
    safe = np.where(dt > 0, dt, np.nan)
    out = {time_delta: dt}
    for name, order in rates.items():
        v = X[rows, columns[name]]
        d1 = np.full(m, np.nan)
        d1[1:] = np.diff(v) / safe[1:]
        if order >= 1:
            out[f"{name}_delta"] = d1
        if order >= 2:
            d2 = np.full(m, np.nan)
            d2[1:] = np.diff(d1) / safe[1:]
            out[f"{name}_delta2"] = d2
    for name, n in lags.items():
        v = X[rows, columns[name]]
        for k in range(1, n + 1):
            lag = np.full(m, np.nan)
            if k < m:
                lag[k:] = v[:-k]
            out[f"{name}_lag{k}"] = lag
    if progress:
        span = t[-1] - t[0]
        out["series_progress"] = (t - t[0]) / span if span > 0 else np.zeros(m)
        out["series_time_to_end"] = t[-1] - t
        out["series_event_index"] = np.arange(m, dtype=float)
    return rows, out


def derive_series_features(store, series_config, config=None, n_jobs=1):
    """Agrega (o recalcula) los features derivados de series sobre el almacén."""
    snapshot = store.snapshot
    series_config.validate(snapshot)
    base = series_config.base_features(snapshot.features)
    rates, lags = series_config.plan(base, config)
    tj = snapshot.index_of(series_config.time_feature)
    columns = {a.name: snapshot.index_of(a.name) for a in base}
    time_delta = f"{series_config.time_feature}_delta"
    groups = series_groups(snapshot, series_config)
    args = (tj, columns, time_delta, rates, lags, series_config.progress)
    if n_jobs and n_jobs != 1 and len(groups) > 1:
        parts = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_derive_rows)(snapshot.X, rows, *args) for rows in groups)
    else:
        parts = [_derive_rows(snapshot.X, rows, *args) for rows in groups]

    names = series_config.derived_names(base, config)
    full = {name: np.full(snapshot.n, np.nan) for name in names}
    for rows, vals in parts:
        for name, v in vals.items():
            full[name][rows] = v
    lag_source = {f"{name}_lag{k}": name for name, n in lags.items() for k in range(1, n + 1)}
    attrs, cols, tables = [], [], []
    for name in names:
        source = lag_source.get(name)
        src = snapshot.features[snapshot.index_of(source)] if source else None
        if src is not None and src.kind != "continuous":
            attrs.append(FeatureAttribute(name, kind=src.kind, cycle_period=src.cycle_period,
                                          ordinal_ranks=src.ordinal_ranks, allows_null=True))
            tables.append(snapshot.tables[snapshot.index_of(source)])
        else:
            attrs.append(FeatureAttribute(name, kind="continuous", allows_null=True))
            tables.append(None)
        cols.append(full[name])
    series_config.derived = list(names)
    store.series_config = series_config
    store.set_columns(attrs, cols, tables)
    logger.info("series: %d series, %d features derivados", len(groups), len(names))
    return store


def rederive_series_features(store):
    """Recalcula los derivados tras train/edit/remove; equivale a derivar desde cero."""
    if store.series_config is None or len(store) == 0:
        return store
    return derive_series_features(store, store.series_config)


# ==========================================
# 3. PRONÓSTICO
# ==========================================
def _history(snapshot, cfg, series_context):
    """Filas decodificadas de la serie pedida, en orden temporal."""
    if isinstance(series_context, pd.DataFrame):
        return series_context.to_dict("records")
    if isinstance(series_context, list):
        return [dict(r) for r in series_context]
    wanted = dict(series_context or {})
    rows = None
    for g in series_groups(snapshot, cfg):
        first = g[0]
        ok = all(decode_value(snapshot.features[snapshot.index_of(k)], snapshot.tables[snapshot.index_of(k)],
                              snapshot.X[first, snapshot.index_of(k)]) == v for k, v in wanted.items())
        if ok:
            rows = g
            break
    if rows is None:
        raise DomainError(f"Serie no encontrada: {wanted}")
    return [{a.name: decode_value(a, snapshot.tables[j], snapshot.X[r, j]) for j, a in enumerate(snapshot.features)}
            for r in rows]


def _step_context(hist, cfg, rates, lags, step_dt):
    last = hist[-1]
    ctx = {name: last.get(name) for name in [*cfg.id_features, *cfg.stationary]}
    ctx[f"{cfg.time_feature}_delta"] = step_dt
    for name, n in lags.items():
        for k in range(1, n + 1):
            if len(hist) >= k:
                ctx[f"{name}_lag{k}"] = hist[-k].get(name)
    return {k: v for k, v in ctx.items() if not is_null(v)}


def _actions(cfg, rates, lags):
    fixed = {cfg.time_feature, *cfg.id_features, *cfg.stationary}
    out = []
    for name in lags:
        if name in fixed:
            continue
        order = rates.get(name, 0)
        out.append(name if order == 0 else (f"{name}_delta" if order == 1 else f"{name}_delta2"))
    if cfg.progress:
        out.append("series_time_to_end")
    return out


def _integrate(last, name, order, predicted, dt):
    """Reconstruye el valor desde la tasa de mayor orden; devuelve (valor, Δ, Δ²)."""
    x_last = float(last.get(name) or 0.0)
    if order == 2:
        d1_last = last.get(f"{name}_delta")
        d1_last = 0.0 if is_null(d1_last) else float(d1_last)
        d2 = float(predicted)
        d1 = d1_last + d2 * dt
        return x_last + d1 * dt, d1, d2
    d1 = float(predicted)
    return x_last + d1 * dt, d1, None


def _forecast_once(store, model, cfg, hist, horizon, mode, conviction, seed, config):
    snapshot = as_snapshot(store)
    base = cfg.base_features(snapshot.features)
    rates, lags = cfg.plan(base, config)
    actions = _actions(cfg, rates, lags)
    times = np.array([float(h[cfg.time_feature]) for h in hist], dtype=float)
    step_dt = float(np.median(np.diff(times))) if len(times) > 1 else 1.0
    hist = [dict(h) for h in hist]
    steps = []
    for s in range(horizon):
        ctx = _step_context(hist, cfg, rates, lags, step_dt)
        query = Query.from_config(config, context=ctx)
        if mode == "generative":
            res = react_generative(store, model, query, actions, conviction=conviction, seed=seed + s, config=config)
        else:
            res = react_discriminative(store, model, query, actions, config=config)
        last = hist[-1]
        row = {k: last.get(k) for k in [*cfg.id_features, *cfg.stationary]}
        row[cfg.time_feature] = float(last[cfg.time_feature]) + step_dt
        row[f"{cfg.time_feature}_delta"] = step_dt
        for name in lags:
            if name in row or name == cfg.time_feature:
                continue
            order = rates.get(name, 0)
            if order == 0:
                row[name] = res.values.get(name)
                continue
            key = f"{name}_delta" if order == 1 else f"{name}_delta2"
            predicted = res.values.get(key)
            if predicted is None:
                predicted = 0.0
            row[name], row[f"{name}_delta"], d2 = _integrate(last, name, order, predicted, step_dt)
            if d2 is not None:
                row[f"{name}_delta2"] = d2
        if cfg.progress:
            row["series_time_to_end"] = res.values.get("series_time_to_end")
        hist.append(row)
        steps.append(row)
        tte = row.get("series_time_to_end")
        if cfg.progress and tte is not None and tte <= 0.5 * step_dt:
            logger.info("serie terminada por el pronóstico en el paso %d", s + 1)
            break
    return steps


def react_series(store, model, series_context, horizon, mode="discriminative", conviction=1.0, seed=0,
                 ensemble=None, config=None):
    """
    Pronostica `horizon` pasos de una serie. Cada paso infiere los nominales y
    las tasas de mayor orden, integra hacia abajo y se suma al contexto.
    Devuelve un DataFrame con una fila por paso; en modo generativo agrega
    columnas `<feature>_mad` del ensamble.
    """
    if horizon is None or int(horizon) < 1:
        raise DomainError("El horizonte debe ser ≥ 1")
    if mode not in ("discriminative", "generative"):
        raise DomainError(f"Modo desconocido: {mode}")
    snapshot = as_snapshot(store)
    cfg = store.series_config
    if cfg is None:
        raise DomainError("El almacén no tiene configuración de series")
    hist = _history(snapshot, cfg, series_context)
    if not hist:
        raise DomainError("Serie vacía")
    horizon = int(horizon)
    if mode == "discriminative":
        frame = pd.DataFrame(_forecast_once(store, model, cfg, hist, horizon, mode, conviction, seed, config))
        frame.insert(0, "step", np.arange(1, len(frame) + 1))
        return frame

    E = int(ensemble or section(config, "series")["ensemble"])
    runs = [pd.DataFrame(_forecast_once(store, model, cfg, hist, horizon, mode, conviction, seed + 1000 * e, config))
            for e in range(E)]
    steps = min(len(r) for r in runs)
    runs = [r.iloc[:steps].reset_index(drop=True) for r in runs]
    frame = runs[0].copy()
    for col in frame.columns:
        stack = [pd.to_numeric(r[col], errors="coerce") for r in runs]
        arr = np.column_stack(stack).astype(float)
        if np.all(np.isnan(arr)):
            continue
        center = np.nanmedian(arr, axis=1)
        if col not in (*cfg.id_features, *cfg.stationary, cfg.time_feature):
            frame[col] = center
            frame[f"{col}_mad"] = np.nanmean(np.abs(arr - center[:, None]), axis=1)
    frame.insert(0, "step", np.arange(1, len(frame) + 1))
    return frame
