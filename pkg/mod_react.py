# -*- coding: utf-8 -*-
"""
Inferencia sobre el conjunto influyente: discriminativa (valor esperado) y
generativa (sorteo con convicción ρ), más los detalles de explicación.
"""
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn import metrics

from config import section
from errors import DomainError, EmptyResultError
from mod_data import as_snapshot, decode_value
from mod_query import (
    Query, batch_neighbors, condition_on_goals, goal_values, influential_cases,
    resolve_deviations, surprisal_matrix,
)
from mod_surprisal import compile_kernels, cyclic_difference, lk_expected_difference_laplace

logger = logging.getLogger(__name__)

BOUNDARY_EPS = 1e-12


# ==========================================
# 1. RESULTADO
# ==========================================
@dataclass
class ReactResult:
    values: dict
    details: dict = field(default_factory=dict)
    mode: str = "discriminative"
    conviction: float = None

    def to_dict(self):
        return {"values": self.values, "details": self.details, "mode": self.mode, "conviction": self.conviction}


# ==========================================
# 2. PREDICCIÓN A PARTIR DE VALORES Y PESOS
# ==========================================
def predict_matrix(attr, V, W, n_classes=None):
    """
    Predicción por fila de V (valores codificados) con pesos W.
    Devuelve (pred, residual, masas): residual = MAD ponderado, o 1 − P(clase) en nominales.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    ok = ~np.isnan(V) & (W > 0)
    Wm = np.where(ok, W, 0.0)
    tot = Wm.sum(axis=1, keepdims=True)
    Wn = np.divide(Wm, tot, out=np.zeros_like(Wm), where=tot > 0)
    Vz = np.where(ok, V, 0.0)
    empty = tot[:, 0] <= 0

    if attr.kind == "nominal":
        K = max(int(n_classes or 0), int(Vz.max()) + 1 if Vz.size else 1)
        mass = np.stack([(Wn * ((Vz == c) & ok)).sum(axis=1) for c in range(K)], axis=1)
        pred = mass.argmax(axis=1).astype(float)
        res = 1.0 - mass.max(axis=1)
        pred[empty] = np.nan
        res[empty] = np.nan
        return pred, res, mass

    if attr.kind == "cyclic":
        T = attr.cycle_period
        ang = 2.0 * math.pi * Vz / T
        pred = np.arctan2((Wn * np.sin(ang)).sum(axis=1), (Wn * np.cos(ang)).sum(axis=1)) * T / (2.0 * math.pi)
        pred = np.mod(pred, T)
        res = (Wn * cyclic_difference(Vz, pred[:, None], T)).sum(axis=1)
    else:
        pred = (Wn * Vz).sum(axis=1)
        if attr.kind == "ordinal":
            top = len(attr.ordinal_ranks) - 1
            pred = np.clip(np.floor(pred + 0.5), 0, top)
        res = (Wn * np.abs(Vz - pred[:, None])).sum(axis=1)
    pred[empty] = np.nan
    res[empty] = np.nan
    return pred, res, None


def predict_influence(snapshot, influence, j):
    """(pred, residual, masas) para un único conjunto influyente."""
    a = snapshot.features[j]
    pred, res, mass = predict_matrix(a, snapshot.X[influence.rows, j][None, :], influence.weights[None, :],
                                     snapshot.n_classes(j))
    return float(pred[0]), float(res[0]), (None if mass is None else mass[0])


def class_probabilities(snapshot, j, mass):
    table = snapshot.tables[j]
    return {str(table[c]): float(mass[c]) for c in range(min(len(mass), len(table))) if mass[c] > 0}


# ==========================================
# 3. CONSULTAS DIRIGIDAS
# ==========================================
def _as_query(query, config=None):
    if isinstance(query, Query):
        return query
    return Query.from_config(config, context=dict(query or {}))


def query_for(model, query, target, context=None, exclude=(), config=None):
    """Copia de la consulta apuntando a `target` con la configuración dirigida del modelo."""
    q = _as_query(query, config)
    ctx = dict(q.context if context is None else context)
    changes = dict(context=ctx, target=target, require_values=(target,),
                   exclude=tuple(q.exclude) + tuple(exclude), goals=[])
    targeted = (getattr(model, "targeted_config", None) or {}).get(target)
    if targeted and ctx:
        changes["p"] = targeted["p"]
        changes["k"] = targeted["k"]
        if targeted.get("weighting") == "accuracy_contribution":
            changes["feature_weights"] = model.feature_weights(target, list(ctx))
    return dataclasses.replace(q, **changes)


def _stored_values(snapshot, case_id):
    r = snapshot.row_of(case_id)
    return {a.name: decode_value(a, snapshot.tables[j], snapshot.X[r, j]) for j, a in enumerate(snapshot.features)}


def _check_actions(query, actions):
    if not actions:
        raise DomainError("Sin features de acción")
    overlap = set(actions) & set(query.context)
    if overlap:
        raise DomainError(f"Features de acción presentes en el contexto: {sorted(overlap)}")


def _resolve_goals(snapshot, model, query, config):
    """Si la consulta trae metas, las fija en el contexto con el mejor caso influyente."""
    if not query.goals:
        return query, {}
    infl = influential_cases(snapshot, model, query, config=config)
    values = goal_values(snapshot, infl, query.goals, model)
    return condition_on_goals(query, values), values


# ==========================================
# 4. REACT DISCRIMINATIVO
# ==========================================
def react_discriminative(store, model, query, actions, details=None, case_id=None, config=None):
    """
    Valor esperado de cada feature de acción dado el contexto.
    details: conjunto de banderas {"influential_cases", "residuals", "categorical_probabilities",
    "residual_conviction", "boundary_values", "boundary_cases", "case_contributions"}.
    """
    snapshot = as_snapshot(store)
    details = set(details or ())
    query = _as_query(query, config)
    _check_actions(query, actions)
    query, goal_vals = _resolve_goals(snapshot, model, query, config)
    exclude = (case_id,) if case_id is not None else ()

    values = dict(goal_vals)
    out = {}
    for t in actions:
        j = snapshot.index_of(t)
        infl = influential_cases(snapshot, model, query_for(model, query, t, exclude=exclude, config=config),
                                 config=config)
        if len(infl) == 0:
            raise EmptyResultError(f"Conjunto influyente vacío para {t}")
        pred, res, mass = predict_influence(snapshot, infl, j)
        values[t] = decode_value(snapshot.features[j], snapshot.tables[j], pred)
        if "influential_cases" in details:
            out.setdefault("influential_cases", {})[t] = infl.entries(snapshot)
        if "residuals" in details:
            out.setdefault("residuals", {})[t] = res
        if "categorical_probabilities" in details and mass is not None:
            out.setdefault("categorical_probabilities", {})[t] = class_probabilities(snapshot, j, mass)
        if "case_contributions" in details:
            out.setdefault("case_contributions", {})[t] = case_contributions(snapshot, infl, t)
        if "residual_conviction" in details and case_id is not None:
            out.setdefault("residual_conviction", {})[t] = residual_conviction(snapshot, model, case_id, t,
                                                                                config=config)
        if "boundary_values" in details:
            case_values = dict(query.context)
            bv = {}
            for name in query.context:
                if snapshot.features[snapshot.index_of(name)].kind == "continuous":
                    bv[name] = boundary_value(snapshot, model, case_values, name, t, config=config)
            out.setdefault("boundary_values", {})[t] = bv
    if "boundary_cases" in details and query.context:
        case_values = dict(query.context)
        case_values.update({t: values[t] for t in actions})
        out["boundary_cases"] = boundary_cases(snapshot, model, case_values, list(query.context), list(actions),
                                               k=10, exclude=exclude)
    logger.info("react discriminativo: %s", sorted(actions))
    return ReactResult(values=values, details=out, mode="discriminative")


# ==========================================
# 5. DESVIACIONES LOCALES
# ==========================================
def _deviation_key(deviations):
    return repr(sorted(deviations.continuous.items())) + repr(
        sorted((k, v.delta, tuple(sorted(v.pairs.items()))) for k, v in deviations.nominal.items()))


def local_deviations(store, model, config=None):
    """
    Desviación por caso y feature: MAD ponderado (o tasa de desacierto nominal)
    de los casos influyentes del propio caso con contexto completo, sin él mismo.
    """
    snapshot = as_snapshot(store)
    deviations = resolve_deviations(snapshot, model)
    key = ("local_dev", _deviation_key(deviations))
    hit = snapshot.cache.get(key)
    if hit is not None:
        return hit
    n, f = snapshot.n, snapshot.f
    glob = np.array([deviations.delta(a.name) for a in snapshot.features])
    out = np.tile(glob, (n, 1))
    if n >= 2:
        rows = np.arange(n)
        feat = list(range(f))
        idx, _, W, _ = batch_neighbors(snapshot, deviations, snapshot.X, feat, exclude_rows=rows, config=config)
        for j, a in enumerate(snapshot.features):
            V = snapshot.X[idx, j]
            own = snapshot.X[:, j][:, None]
            ok = ~np.isnan(V) & ~np.isnan(own) & (W > 0)
            if a.kind == "nominal":
                d = (V != own).astype(float)
            elif a.kind == "cyclic":
                d = cyclic_difference(np.nan_to_num(V), np.nan_to_num(own), a.cycle_period)
            else:
                d = np.abs(np.nan_to_num(V) - np.nan_to_num(own))
            Wm = np.where(ok, W, 0.0)
            tot = Wm.sum(axis=1)
            local = np.divide((Wm * np.where(ok, d, 0.0)).sum(axis=1), tot, out=glob[j] * np.ones(n),
                              where=tot > 0)
            out[:, j] = np.maximum(local, deviations.floors.get(a.name, 1e-12))
    snapshot.cache[key] = out
    return out


def _targeted_key(model):
    targeted = getattr(model, "targeted_config", None) or {}
    return tuple(sorted((t, _deviation_key(c["deviations"])) for t, c in targeted.items()
                        if c.get("deviations") is not None))


def case_residuals(store, model, feature, config=None):
    """
    Residual de `feature` por caso: el conjunto influyente de cada caso se busca
    con el resto de features como contexto, sin el propio caso. Acotado por
    debajo con la desviación del feature.
    """
    snapshot = as_snapshot(store)
    j = snapshot.index_of(feature)
    a = snapshot.features[j]
    deviations = resolve_deviations(snapshot, model, feature)
    key = ("case_residuals", feature, _deviation_key(resolve_deviations(snapshot, model)), _targeted_key(model))
    hit = snapshot.cache.get(key)
    if hit is not None:
        return hit
    n = snapshot.n
    delta = deviations.delta(feature)
    out = np.full(n, delta)
    mask = ~np.isnan(snapshot.X[:, j])
    if mask.sum() >= 2:
        feat = [c for c in range(snapshot.f) if c != j]
        if feat:
            rows = np.arange(n)
            idx, _, W, _ = batch_neighbors(snapshot, model, snapshot.X[:, feat], feat, exclude_rows=rows, mask=mask,
                                           config=config, target=feature)
            _, res, _ = predict_matrix(a, snapshot.X[idx, j], W, snapshot.n_classes(j))
        else:
            # sin otros features: residual del marginal
            cols = np.flatnonzero(mask)
            _, res, _ = predict_matrix(a, snapshot.X[cols, j][None, :], snapshot.weights[cols][None, :],
                                       snapshot.n_classes(j))
            res = np.full(n, res[0])
        ok = ~np.isnan(res)
        out[ok] = np.maximum(res[ok], delta)
    snapshot.cache[key] = out
    return out


# ==========================================
# 6. REACT GENERATIVO
# ==========================================
def _draw_continuous(snapshot, model, infl, j, conviction, rng, cfg, config):
    a = snapshot.features[j]
    col = snapshot.X[infl.rows, j]
    ok = ~np.isnan(col)
    if not ok.any():
        return np.nan
    p = infl.weights[ok] / infl.weights[ok].sum()
    center_row = int(rng.choice(infl.rows[ok], p=p))
    center = snapshot.X[center_row, j]
    scale = case_residuals(snapshot, model, a.name, config)[center_row] / conviction
    lo, hi = (a.bounds if a.bounds is not None else (-np.inf, np.inf))
    x = center
    for _ in range(int(cfg["generative_retries"])):
        x = rng.laplace(center, scale)
        if a.kind == "cyclic":
            x = float(np.mod(x, a.cycle_period))
        if lo <= x <= hi:
            break
    else:
        x = float(np.clip(x, lo, hi))
    if a.kind == "ordinal":
        x = float(np.clip(np.floor(x + 0.5), 0, len(a.ordinal_ranks) - 1))
    return float(x)


def _store_marginal(snapshot, j):
    col = snapshot.X[:, j]
    ok = ~np.isnan(col)
    mass = np.bincount(col[ok].astype(np.int64), weights=snapshot.weights[ok], minlength=len(snapshot.tables[j]))
    return mass / mass.sum() if mass.sum() > 0 else None


def nominal_branch(snapshot, j, mass, escape, rng):
    """
    Sorteo nominal en tres ramas con probabilidad de escape b:
    (1−b) masa influyente, (b−b²) marginal del almacén, b² uniforme sobre el dominio.
    Devuelve (código, rama).
    """
    eta = rng.random()
    if eta < 1.0 - escape and mass is not None and mass.sum() > 0:
        return int(rng.choice(mass.size, p=mass / mass.sum())), "influence"
    if eta < 1.0 - escape * escape:
        marg = _store_marginal(snapshot, j)
        if marg is not None:
            return int(rng.choice(marg.size, p=marg)), "marginal"
    a = snapshot.features[j]
    if a.domain is None:
        warnings.warn(f"{a.name}: sin dominio declarado, la rama uniforme usa los valores observados")
    return int(rng.integers(len(snapshot.tables[j]))), "uniform"


def react_generative(store, model, query, actions, conviction=1.0, seed=0, details=None, config=None):
    """
    Sorteo de cada feature de acción. Las acciones se encadenan: cada valor
    generado entra al contexto del siguiente.
    """
    if conviction is None or not conviction > 0:
        raise DomainError("La convicción debe ser > 0")
    snapshot = as_snapshot(store)
    cfg = section(config, "react")
    details = set(details or ())
    query = _as_query(query, config)
    _check_actions(query, actions)
    rng = np.random.default_rng(seed)
    context = dict(query.context)
    values, branches = {}, {}
    for t in actions:
        j = snapshot.index_of(t)
        a = snapshot.features[j]
        infl = influential_cases(snapshot, model, query_for(model, query, t, context=context, config=config),
                                 config=config)
        if len(infl) == 0:
            raise EmptyResultError(f"Conjunto influyente vacío para {t}")
        if a.kind == "nominal":
            _, res, mass = predict_influence(snapshot, infl, j)
            escape = min(1.0, (0.0 if math.isnan(res) else res) / conviction)
            code, branches[t] = nominal_branch(snapshot, j, mass, escape, rng)
        else:
            code = _draw_continuous(snapshot, model, infl, j, conviction, rng, cfg, config)
        values[t] = decode_value(a, snapshot.tables[j], code)
        if values[t] is not None:
            context[t] = values[t]
    out = {"branches": branches} if "branches" in details else {}
    return ReactResult(values=values, details=out, mode="generative", conviction=float(conviction))


# ==========================================
# 7. VALORES Y CASOS FRONTERA
# ==========================================
def _predict_context(snapshot, model, context, target, config):
    infl = influential_cases(snapshot, model, query_for(model, Query.from_config(config), target, context=context,
                                                        config=config), config=config)
    return predict_influence(snapshot, infl, snapshot.index_of(target))


def boundary_value(store, model, case_values, feature, target, config=None):
    """
    Menor perturbación η del feature continuo que cambia la predicción de target:
    cambio de clase (nominal) o desplazamiento mayor al residual (continuo).
    Búsqueda exponencial desde δ y luego bisección, en ambos sentidos.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "react")
    j = snapshot.index_of(feature)
    a = snapshot.features[j]
    if a.kind != "continuous":
        raise DomainError(f"{feature} debe ser continuo")
    context = {k: v for k, v in case_values.items() if k != target}
    if feature not in context:
        raise DomainError(f"{feature} no está en el caso")
    unbounded = {"boundary": "unbounded", "positive": None, "negative": None}
    influence = getattr(model, "influence", None)
    if influence is not None and feature in influence.index and target in influence.columns:
        if float(influence.at[feature, target]) <= 0.0:
            return unbounded

    t_attr = snapshot.features[snapshot.index_of(target)]
    base, base_res, _ = _predict_context(snapshot, model, context, target, config)
    x0 = snapshot.encode(j, context[feature])
    if a.bounds is not None:
        lo, hi = a.bounds
    else:
        st = snapshot.column_stats(j)
        lo, hi = st["min"], st["max"]
    step0 = resolve_deviations(snapshot, model, target).delta(feature)

    def changed(eta):
        ctx = dict(context)
        ctx[feature] = decode_value(a, snapshot.tables[j], x0 + eta)
        pred, _, _ = _predict_context(snapshot, model, ctx, target, config)
        if t_attr.kind == "nominal":
            return pred != base
        return abs(pred - base) > max(base_res, BOUNDARY_EPS)

    found = {}
    for sign, name in ((1.0, "positive"), (-1.0, "negative")):
        limit = (hi - x0) if sign > 0 else (x0 - lo)
        found[name] = None
        if limit <= 0:
            continue
        prev, eta = 0.0, min(step0, limit)
        while True:
            if changed(sign * eta):
                lo_b, hi_b = prev, eta
                for _ in range(int(cfg["boundary_bisection"])):
                    mid = 0.5 * (lo_b + hi_b)
                    if changed(sign * mid):
                        hi_b = mid
                    else:
                        lo_b = mid
                found[name] = sign * hi_b
                break
            if eta >= limit:
                break
            prev, eta = eta, min(eta * 2.0, limit)
    cands = [v for v in (found["positive"], found["negative"]) if v is not None]
    if not cands:
        return unbounded
    return {"boundary": min(cands, key=abs), **found}


def boundary_cases(store, model, case_values, F, J, k=10, exclude=(), seed=0):
    """Top-k casos por I(i,n|F) / I(i,n|F∪J)."""
    snapshot = as_snapshot(store)
    F, J = list(F), list(J)
    if not F or not J or set(F) & set(J):
        raise DomainError("F y J deben ser no vacíos y disjuntos")
    kernels = compile_kernels(snapshot, resolve_deviations(snapshot, model))
    idx_f, q_f = snapshot.encode_context({n: case_values[n] for n in F})
    idx_fj, q_fj = snapshot.encode_context({n: case_values[n] for n in F + J})
    num = surprisal_matrix(snapshot, kernels, idx_f, q_f[None, :])[0]
    den = surprisal_matrix(snapshot, kernels, idx_fj, q_fj[None, :])[0]
    ratio = num / np.maximum(den, BOUNDARY_EPS)
    keep = np.ones(snapshot.n, dtype=bool)
    for cid in exclude:
        keep[snapshot.row_of(cid)] = False
    rows = np.flatnonzero(keep)
    ranks = snapshot.tie_ranks(seed)
    rows = rows[np.lexsort((ranks[rows], -ratio[rows]))][:k]
    return [{"id": int(snapshot.case_ids[r]), "ratio": float(ratio[r]),
             "surprisal_context": float(num[r]), "surprisal_full": float(den[r])} for r in rows]


# ==========================================
# 8. CONVICCIÓN DE RESIDUAL Y CONTRIBUCIONES DE CASO
# ==========================================
def residual_conviction(store, model, case, feature, config=None):
    """
    RC = E_LK(r | δ) / E_LK(|pred − real| | δ). `case` es un id almacenado
    (se excluye de su propio conjunto) o un dict de valores.
    """
    snapshot = as_snapshot(store)
    j = snapshot.index_of(feature)
    a = snapshot.features[j]
    if isinstance(case, dict):
        values, exclude = dict(case), ()
    else:
        values, exclude = _stored_values(snapshot, case), (case,)
    actual = snapshot.encode(j, values.get(feature))
    if math.isnan(actual):
        raise DomainError(f"{feature} es NULL en el caso")
    context = {n: v for n, v in values.items() if n != feature and v is not None}
    q = query_for(model, Query.from_config(config), feature, context=context, exclude=exclude, config=config)
    infl = influential_cases(snapshot, model, q, config=config)
    pred, res, mass = predict_influence(snapshot, infl, j)
    if a.kind == "nominal":
        p_actual = float(mass[int(actual)]) if int(actual) < mass.size else 0.0
        err = 1.0 - p_actual
    elif a.kind == "cyclic":
        err = float(cyclic_difference(pred, actual, a.cycle_period))
    else:
        err = abs(pred - actual)
    delta = resolve_deviations(snapshot, model, feature).delta(feature)
    return lk_expected_difference_laplace(0.0, res, delta) / lk_expected_difference_laplace(0.0, err, delta)


def case_contributions(store, influence, target):
    """Cambio en la predicción al retirar cada caso influyente."""
    snapshot = as_snapshot(store)
    j = snapshot.index_of(target)
    a = snapshot.features[j]
    V = snapshot.X[influence.rows, j]
    m = len(influence.rows)
    full, _, full_mass = predict_matrix(a, V[None, :], influence.weights[None, :], snapshot.n_classes(j))
    W = np.tile(influence.weights, (m, 1))
    np.fill_diagonal(W, 0.0)
    pred, _, mass = predict_matrix(a, np.tile(V, (m, 1)), W, snapshot.n_classes(j))
    out = []
    for i in range(m):
        if a.kind == "nominal":
            c = int(full[0])
            without = mass[i, c] if not np.isnan(pred[i]) else 0.0
            delta = float(full_mass[0, c] - without)
        else:
            delta = float(full[0] - pred[i]) if not np.isnan(pred[i]) else float("nan")
        out.append({"id": int(influence.case_ids[i]), "contribution": delta})
    return out


# ==========================================
# 9. REACT AGREGADO (BOOTSTRAP DEJANDO UNO FUERA)
# ==========================================
def targeted_neighbors(snapshot, model, target, rows, context_names=None, config=None, seed=0):
    """Vecinos dejando fuera cada fila, con la configuración dirigida si existe."""
    j = snapshot.index_of(target)
    names = context_names if context_names is not None else [n for n in snapshot.names if n != target]
    feat = snapshot.indices(names)
    p, k, fw = 1.0, None, None
    targeted = (getattr(model, "targeted_config", None) or {}).get(target)
    if targeted and feat:
        p, k = targeted["p"], targeted["k"]
        if targeted.get("weighting") == "accuracy_contribution":
            weights = model.feature_weights(target, names)
            fw = np.array([weights[n] for n in names])
    mask = ~np.isnan(snapshot.X[:, j])
    return batch_neighbors(snapshot, model, snapshot.X[rows][:, feat], feat, exclude_rows=rows, fw=fw, p=p, k=k,
                           mask=mask, seed=seed, config=config, target=target)


def react_aggregate(store, model, target, n=500, scheme="loo-bootstrap", seed=0, config=None):
    """Métricas de predicción dejando uno fuera sobre una muestra bootstrap."""
    snapshot = as_snapshot(store)
    j = snapshot.index_of(target)
    a = snapshot.features[j]
    eligible = np.flatnonzero(~np.isnan(snapshot.X[:, j]))
    if eligible.size < 2:
        raise EmptyResultError(f"Casos insuficientes para evaluar {target}")
    rng = np.random.default_rng(seed)
    if scheme == "loo-bootstrap":
        rows = rng.choice(eligible, size=int(n), replace=True)
    elif scheme == "loo":
        rows = eligible
    else:
        raise DomainError(f"Esquema desconocido: {scheme}")
    idx, _, W, _ = targeted_neighbors(snapshot, model, target, rows, config=config, seed=seed)
    pred, _, _ = predict_matrix(a, snapshot.X[idx, j], W, snapshot.n_classes(j))
    actual = snapshot.X[rows, j]
    ok = ~np.isnan(pred)
    y_true, y_pred = actual[ok], pred[ok]
    report = {"target": target, "scheme": scheme, "n": int(rows.size), "evaluated": int(ok.sum())}
    if a.kind == "nominal":
        report.update(
            accuracy=float(metrics.accuracy_score(y_true, y_pred)),
            precision=float(metrics.precision_score(y_true, y_pred, average="macro", zero_division=0)),
            recall=float(metrics.recall_score(y_true, y_pred, average="macro", zero_division=0)),
            f1=float(metrics.f1_score(y_true, y_pred, average="macro", zero_division=0)),
            mcc=float(metrics.matthews_corrcoef(y_true, y_pred)),
        )
    else:
        err = cyclic_difference(y_true, y_pred, a.cycle_period) if a.kind == "cyclic" else np.abs(y_true - y_pred)
        rho = stats.spearmanr(y_true, y_pred).correlation if np.ptp(y_pred) > 0 else 0.0
        report.update(
            mae=float(np.mean(err)),
            spearman=float(0.0 if np.isnan(rho) else rho),
            r2=float(metrics.r2_score(y_true, y_pred)),
        )
    logger.info("react_aggregate %s: %s", target, report)
    return report
