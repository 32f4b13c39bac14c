# -*- coding: utf-8 -*-
"""
Verbo analyze: converge desviaciones, residuales, residuales robustos y
probabilidades de influencia de features; búsqueda en rejilla opcional
para un target.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn import metrics

from config import FIBONACCI_K, LEBESGUE_P, section
from errors import ConvergenceWarning, DomainError, EmptyResultError
from mod_data import as_snapshot
from mod_insight import (
    evaluate_coalitions, full_residual, robust_residual, shapley,
)
from mod_query import batch_neighbors, neighbors_from_matrix, surprisal_matrix
from mod_react import predict_matrix, targeted_neighbors
from mod_surprisal import (
    DeviationSpec, NominalDeviation, NullDeviation, compile_kernels, cyclic_difference, initial_deviations,
)

logger = logging.getLogger(__name__)


# ==========================================
# 1. MODELO DE INCERTIDUMBRE
# ==========================================
@dataclass
class UncertaintyModel:
    deviations: DeviationSpec
    residuals: dict = field(default_factory=dict)
    robust_residuals: dict = field(default_factory=dict)
    influence: pd.DataFrame = None              # q[j, t]
    accuracy_contributions: pd.DataFrame = None  # AC[j, t]
    convergence: dict = field(default_factory=dict)
    targeted_config: dict = field(default_factory=dict)
    coalitions: dict = field(default_factory=dict)
    snapshot_id: str = None
    seed: int = 0
    q_floor: float = 0.01

    def feature_weights(self, target, active):
        """Pesos de consulta sobre `active`; el piso solo aplica aquí."""
        weights = redistribute_influence(self.influence, active, target)
        vals = np.array(list(weights.values())) + self.q_floor
        return dict(zip(weights, vals / vals.sum()))

    def deviations_for(self, target=None):
        targeted = self.targeted_config.get(target) if target else None
        if targeted and targeted.get("deviations") is not None:
            return targeted["deviations"]
        return self.deviations

    def mcr(self):
        return {n: float(r / self.deviations_for(n).delta(n)) for n, r in self.residuals.items()}

    def to_dict(self):
        def _frame(df):
            if df is None:
                return None
            return {c: {r: float(v) for r, v in df[c].items()} for c in df.columns}

        return {
            "snapshot_id": self.snapshot_id,
            "seed": self.seed,
            "deviations": self.deviations.to_dict(),
            "residuals": dict(self.residuals),
            "robust_residuals": dict(self.robust_residuals),
            "influence": _frame(self.influence),
            "accuracy_contributions": _frame(self.accuracy_contributions),
            "convergence": self.convergence,
            "targeted_config": {
                t: {k: (v.to_dict() if isinstance(v, DeviationSpec) else v) for k, v in c.items()}
                for t, c in self.targeted_config.items()
            },
            "coalitions": self.coalitions,
        }


# ==========================================
# 2. DESVIACIONES
# ==========================================
def _null_deviation(actual, V, W):
    """Masa de desacierto del estado NULL, suavizada con ½."""
    case_null = np.isnan(actual)[:, None]
    mismatch = (W * (np.isnan(V) != case_null)).sum(axis=1)
    m = actual.size
    p_nv = (mismatch.sum() + 0.5) / (m + 1.0)
    nulls = np.isnan(actual)
    if nulls.any():
        p_nn = ((1.0 - mismatch[nulls]).sum() + 0.5) / (nulls.sum() + 1.0)
    else:
        p_nn = 1.0 - p_nv
    return NullDeviation(float(p_nv), float(p_nn))


def _nominal_deviation(attr, actual, V, W, K, floor, sparse_min):
    pred, _, mass = predict_matrix(attr, V, W, K)
    has = ~np.isnan(actual)
    codes = np.where(has, actual, 0).astype(np.int64)
    inside = codes < mass.shape[1]
    p_act = np.where(inside, mass[np.arange(actual.size), np.minimum(codes, mass.shape[1] - 1)], 0.0)
    valid = has & ~np.isnan(pred)
    if not valid.any():
        return None
    delta = max(float(np.mean(1.0 - p_act[valid])), floor)
    pairs = {}
    for a in np.unique(codes[valid]):
        rows_a = valid & (codes == a)
        for c in range(mass.shape[1]):
            if c == a:
                continue
            obs = int((mass[rows_a, c] > 0).sum())
            if obs >= sparse_min:
                pairs[(int(a), int(c))] = float(mass[rows_a, c].mean())
    return NominalDeviation(delta, max(K, mass.shape[1]), pairs)


def _converge_deviations(snapshot, config=None, seed=0, fw=None, p=1.0, n_jobs=1):
    cfg = section(config, "analysis")
    scfg = section(config, "surprisal")
    n = snapshot.n
    if n == 0:
        raise EmptyResultError("Almacén vacío")
    overrides = cfg["initial_deviations"] if isinstance(cfg["initial_deviations"], dict) else None
    dev = initial_deviations(snapshot, overrides, scfg["min_floor"], scfg["gap_floor_factor"])
    rng = np.random.default_rng(seed)
    m = min(n, int(cfg["sample_size"]))
    sample = np.sort(rng.choice(n, size=m, replace=True))
    feat = list(range(snapshot.f))
    actual_all = snapshot.X[sample]
    trace, converged = [], False
    if n < 2:
        converged = True
    for it in range(int(cfg["max_iterations"]) if n >= 2 else 0):
        kernels = compile_kernels(snapshot, dev)
        idx, _, W, _ = batch_neighbors(snapshot, dev, actual_all, feat, exclude_rows=sample, fw=fw, p=p,
                                       seed=seed, config=config, kernels=kernels, n_jobs=n_jobs)
        new = DeviationSpec(floors=dict(dev.floors))
        change = 0.0
        for j, a in enumerate(snapshot.features):
            V = snapshot.X[idx, j]
            actual = actual_all[:, j]
            floor = dev.floors[a.name]
            if a.kind == "nominal":
                nd = _nominal_deviation(a, actual, V, W, snapshot.n_classes(j), floor, int(cfg["sparse_pair_min"]))
                new.nominal[a.name] = nd or dev.nominal[a.name]
                old, now = dev.nominal[a.name].delta, new.nominal[a.name].delta
            else:
                pred, _, _ = predict_matrix(a, V, W, snapshot.n_classes(j))
                ok = ~np.isnan(actual) & ~np.isnan(pred)
                if a.kind == "cyclic":
                    err = cyclic_difference(pred[ok], actual[ok], a.cycle_period)
                else:
                    err = np.abs(pred[ok] - actual[ok])
                old = dev.continuous[a.name]
                now = max(float(np.mean(err)), floor) if ok.any() else old
                new.continuous[a.name] = now
            new.null[a.name] = _null_deviation(actual, V, W)
            change = max(change, abs(now - old) / max(old, floor))
        dev = new
        trace.append({"iteration": it + 1, "max_relative_change": change,
                      "deltas": {a.name: dev.delta(a.name) for a in snapshot.features}})
        logger.debug("desviaciones, iteración %d: cambio relativo %.3g", it + 1, change)
        if change < cfg["tolerance"]:
            converged = True
            break
    if not converged:
        msg = f"Las desviaciones no convergieron en {len(trace)} iteraciones"
        warnings.warn(msg, ConvergenceWarning)
        logger.warning(msg)
    return dev, {"iterations": len(trace), "converged": converged, "sample_size": m, "trace": trace}


def compute_deviations(store, sample_size=None, max_iterations=None, config=None, seed=0, n_jobs=1):
    """
    δ por feature: error de predecir cada valor de una muestra con todos los
    features (incluido él mismo) como contexto, iterado hasta converger.
    """
    snapshot = as_snapshot(store)
    cfg = {k: dict(v) for k, v in (config or {}).items()}
    cfg.setdefault("analysis", {})
    if sample_size is not None:
        cfg["analysis"]["sample_size"] = sample_size
    if max_iterations is not None:
        cfg["analysis"]["max_iterations"] = max_iterations
    dev, _ = _converge_deviations(snapshot, cfg, seed, n_jobs=n_jobs)
    return dev


# ==========================================
# 3. PROBABILIDADES DE INFLUENCIA
# ==========================================
def _q_column(ac_col, scale, cfg):
    """Columna de q sin piso: un feature sin aporte queda en cero."""
    a = -np.asarray(ac_col, dtype=float)
    a = np.nan_to_num(a)
    if cfg["q_form"] == "literal":
        raw = np.exp(np.clip(a, -700, 700))
    else:
        if scale is not None and scale > 0:
            a = a / scale
        raw = np.maximum(0.0, np.expm1(np.clip(a, -700, 50)))
    total = raw.sum()
    return raw / total if total > 0 else np.full(raw.size, 1.0 / max(raw.size, 1))


def feature_probabilities(ac, scales, config=None):
    """q[j, t] desde AC[j, t]; columnas normalizadas, diagonal cero."""
    cfg = section(config, "analysis")
    q = pd.DataFrame(0.0, index=ac.index, columns=ac.columns)
    for t in ac.columns:
        others = [j for j in ac.index if j != t]
        if not others:
            continue
        q.loc[others, t] = _q_column(ac.loc[others, t].to_numpy(), scales.get(t), cfg)
    return q


def _scale_for(cfg, t, rr, deviations):
    if cfg["q_scale"] == "robust_residual":
        return rr.get(t)
    if cfg["q_scale"] == "deviation":
        return deviations.delta(t)
    return None


def _contribution_pass(snapshot, deviations, targets, config=None, seed=0, n_jobs=1):
    """AC, rr y r por target a partir de una evaluación de coaliciones."""
    names = snapshot.names

    def _one(t):
        table = evaluate_coalitions(snapshot, deviations, t, config, seed)
        ac = shapley(table, table.error)
        return t, dict(zip(table.features, ac)), robust_residual(table), full_residual(table), {
            "coalitions": len(table.index), "exhaustive": table.exhaustive}

    if n_jobs and n_jobs != 1 and len(targets) > 1:
        results = Parallel(n_jobs=n_jobs, backend="threading")(delayed(_one)(t) for t in targets)
    else:
        results = [_one(t) for t in targets]
    ac = pd.DataFrame(np.nan, index=names, columns=list(targets))
    rr, r, meta = {}, {}, {}
    for t, row, rr_t, r_t, info in results:
        for j, v in row.items():
            ac.at[j, t] = v
        ac.at[t, t] = 0.0
        rr[t], r[t], meta[t] = rr_t, r_t, info
    return ac, rr, r, meta


def compute_feature_probabilities(store, deviations, targets=None, config=None, seed=0, n_jobs=1):
    """q por (feature, target), con todas las influencias iniciales en 1."""
    snapshot = as_snapshot(store)
    cfg = section(config, "analysis")
    targets = list(targets or snapshot.names)
    ac, rr, _, _ = _contribution_pass(snapshot, deviations, targets, config, seed, n_jobs)
    scales = {t: _scale_for(cfg, t, rr, deviations) for t in targets}
    return feature_probabilities(ac, scales, config)


def redistribute_influence(q, active, target):
    """
    Probabilidades sobre los features activos F: la masa de cada feature
    inactivo j′ se reparte sobre F según q[F, j′].
    """
    active = list(active)
    if not active or target in active:
        raise DomainError("F debe ser no vacío y no contener al target")
    uniform = np.full(len(active), 1.0 / len(active))
    if q is None or target not in q.columns:
        return dict(zip(active, uniform))
    col = q[target].drop(labels=[target], errors="ignore").fillna(0.0).clip(lower=0.0)
    total = col.sum()
    col = col / total if total > 0 else pd.Series(1.0 / len(col), index=col.index)
    out = col.reindex(active).fillna(0.0).to_numpy(dtype=float)
    for jp in col.index:
        if jp in active or col[jp] == 0:
            continue
        if jp in q.columns:
            row = q.loc[active, jp].fillna(0.0).clip(lower=0.0).to_numpy(dtype=float)
        else:
            row = np.zeros(len(active))
        s = row.sum()
        row = row / s if s > 0 else uniform
        out = out + row * col[jp]
    s = out.sum()
    out = out / s if s > 0 else uniform
    out = out / out.sum()
    return dict(zip(active, out))


# ==========================================
# 4. RESIDUALES
# ==========================================
@dataclass
class ResidualEstimate:
    value: float
    per_case: np.ndarray
    rows: np.ndarray


def compute_residuals(store, model, target, context=None, sample_size=None, config=None, seed=0):
    """
    Residual de target con contexto F (por defecto todos los demás features):
    media del MAD ponderado (o 1 − P(clase)) dejando cada caso fuera.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "analysis")
    j = snapshot.index_of(target)
    eligible = np.flatnonzero(~np.isnan(snapshot.X[:, j]))
    if eligible.size < 2:
        raise EmptyResultError(f"Casos insuficientes para el residual de {target}")
    rng = np.random.default_rng(seed)
    m = min(eligible.size, int(sample_size or cfg["sample_size"]))
    rows = np.sort(rng.choice(eligible, size=m, replace=True))
    names = list(context) if context is not None else None
    if names is not None and target in names:
        raise DomainError("El contexto no puede incluir al target")
    idx, _, W, sizes = targeted_neighbors(snapshot, model, target, rows, names, config, seed)
    if not (sizes > 0).any():
        raise EmptyResultError("Conjuntos influyentes vacíos")
    _, res, _ = predict_matrix(snapshot.features[j], snapshot.X[idx, j], W, snapshot.n_classes(j))
    return ResidualEstimate(value=float(np.nanmean(res)), per_case=res, rows=rows)


def compute_robust_residuals(store, model, target, coalition_samples=None, config=None, seed=0):
    """Residual esperado sobre coaliciones de 𝓕\\{t}."""
    snapshot = as_snapshot(store)
    cfg = section(config, "analysis")
    samples = int(coalition_samples or cfg["coalition_samples"])
    if samples < 30:
        raise DomainError("coalition_samples debe ser ≥ 30")
    table = evaluate_coalitions(snapshot, model, target, config, seed, samples=samples)
    return robust_residual(table)


# ==========================================
# 5. BÚSQUEDA EN REJILLA
# ==========================================
def _topk_weights(idx, I, w_all, k):
    I = I[:, :k]
    w = w_all[idx[:, :k]]
    finite = np.isfinite(I)
    logp = np.where(finite, -w * np.where(finite, I, 0.0), -np.inf)
    top = np.where(np.isfinite(logp[:, :1]), logp[:, :1], 0.0)
    P = np.exp(logp - top)
    tot = P.sum(axis=1, keepdims=True)
    return np.divide(P, tot, out=np.zeros_like(P), where=tot > 0)


def _grid_pass(snapshot, model, target, rows, config, seed, deviations=None):
    j = snapshot.index_of(target)
    attr = snapshot.features[j]
    names = [n for n in snapshot.names if n != target]
    feat = snapshot.indices(names)
    kernels = compile_kernels(snapshot, model.deviations if deviations is None else deviations)
    ranks = snapshot.tie_ranks(seed)
    w_all = snapshot.weights
    cand = ~np.isnan(snapshot.X[:, j])
    actual = snapshot.X[rows, j]
    weightings = [("accuracy_contribution", model.feature_weights(target, names)), ("equal", None)]
    kmax = max(FIBONACCI_K)
    results = []
    for w_order, (w_name, weights) in enumerate(weightings):
        fw = None if weights is None else np.array([weights[n] for n in names]) * len(names)
        for p in LEBESGUE_P:
            S = surprisal_matrix(snapshot, kernels, feat, snapshot.X[rows][:, feat], fw, p)
            S[:, ~cand] = np.inf
            S[np.arange(rows.size), rows] = np.inf
            idx, I, _, _ = neighbors_from_matrix(S, w_all, ranks, k_fixed=kmax)
            for k in FIBONACCI_K:
                if k > idx.shape[1]:
                    continue
                W = _topk_weights(idx, I, w_all, k)
                pred, _, _ = predict_matrix(attr, snapshot.X[idx[:, :k], j], W, snapshot.n_classes(j))
                ok = ~np.isnan(pred)
                if attr.kind == "nominal":
                    score = metrics.matthews_corrcoef(actual[ok], pred[ok])
                elif attr.kind == "cyclic":
                    score = -float(np.mean(cyclic_difference(pred[ok], actual[ok], attr.cycle_period)))
                else:
                    score = -float(np.mean(np.abs(pred[ok] - actual[ok])))
                results.append((round(float(score), 12), k, p, w_order, w_name))
    if not results:
        raise EmptyResultError(f"Sin configuraciones evaluables para {target}")
    best = min(results, key=lambda r: (-r[0], r[1], r[2], r[3]))
    return {"p": best[2], "k": best[1], "weighting": best[4], "score": best[0],
            "metric": "mcc" if attr.kind == "nominal" else "neg_mae"}


def targeted_grid_search(store, model, target, config=None, seed=0):
    """
    Mejor (p, k, ponderación) para un target por bootstrap dejando uno fuera.
    El proceso completo (desviaciones, influencias, rejilla) se itera dos veces.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "analysis")
    j = snapshot.index_of(target)
    eligible = np.flatnonzero(~np.isnan(snapshot.X[:, j]))
    if eligible.size < 2 * min(FIBONACCI_K):
        raise DomainError(f"Casos insuficientes para la rejilla de {target}")
    rng = np.random.default_rng([int(seed), j])
    rows = rng.choice(eligible, size=min(eligible.size, int(cfg["grid_bootstrap"])), replace=True)
    chosen = _grid_pass(snapshot, model, target, rows, config, seed)

    # segunda pasada: desviaciones y q recalculados con la configuración elegida
    fw = None
    if chosen["weighting"] == "accuracy_contribution":
        names = [n for n in snapshot.names if n != target]
        weights = model.feature_weights(target, names)
        fw = np.array([1.0 if n == target else weights[n] * len(names) for n in snapshot.names])
    dev, conv = _converge_deviations(snapshot, config, seed, fw=fw, p=chosen["p"])
    ac, rr, r, meta = _contribution_pass(snapshot, dev, [target], config, seed)
    model.robust_residuals[target] = rr[target]
    model.residuals[target] = r[target]
    model.coalitions[target] = meta[target]
    if model.accuracy_contributions is not None and target in model.accuracy_contributions.columns:
        model.accuracy_contributions[target] = ac[target]
        scales = {target: _scale_for(cfg, target, rr, dev)}
        model.influence[target] = feature_probabilities(ac, scales, config)[target]
    chosen = _grid_pass(snapshot, model, target, rows, config, seed, deviations=dev)
    # desviaciones propias del target
    chosen["deviations"] = dev
    chosen["convergence"] = conv
    model.targeted_config[target] = chosen
    logger.info("rejilla %s: p=%s k=%s %s", target, chosen["p"], chosen["k"], chosen["weighting"])
    return chosen


# ==========================================
# 6. VERBO ANALYZE
# ==========================================
def analyze(store, targets=None, config=None, seed=0, grid_search=False, n_jobs=1):
    """Modelo de incertidumbre completo (sin target) o restringido a `targets`."""
    snapshot = as_snapshot(store)
    if snapshot.n == 0:
        raise EmptyResultError("Almacén vacío")
    cfg = section(config, "analysis")
    targets = list(targets) if targets else snapshot.names
    for t in targets:
        snapshot.index_of(t)
    dev, conv = _converge_deviations(snapshot, config, seed, n_jobs=n_jobs)
    ac, rr, r, meta = _contribution_pass(snapshot, dev, targets, config, seed, n_jobs)
    scales = {t: _scale_for(cfg, t, rr, dev) for t in targets}
    model = UncertaintyModel(
        deviations=dev, residuals=r, robust_residuals=rr,
        influence=feature_probabilities(ac, scales, config), accuracy_contributions=ac,
        convergence=conv, coalitions=meta, snapshot_id=snapshot.snapshot_id, seed=int(seed),
        q_floor=float(cfg["q_floor"]),
    )
    if grid_search:
        for t in targets:
            targeted_grid_search(snapshot, model, t, config, seed)
    logger.info("analyze: %d features, %d targets, convergió=%s", snapshot.f, len(targets), conv["converged"])
    return model

