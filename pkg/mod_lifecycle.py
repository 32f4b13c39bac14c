# -*- coding: utf-8 -*-
"""
Gestión de pesos de casos: ablación al entrenar, reducción por lotes y
rebalanceo de masa por clase.
"""
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from config import section
from errors import ConvergenceWarning, DomainError
from mod_data import as_snapshot, is_null
from mod_query import Query, batch_neighbors, influential_cases, resolve_deviations
from mod_surprisal import compile_kernels

logger = logging.getLogger(__name__)


# ==========================================
# 1. POLÍTICA
# ==========================================
@dataclass
class AblationPolicy:
    min_trained_cases: int = 1000
    reduction_fraction: float = 1.0 / math.e
    batch_size: int = 64
    retention_quantile: float = 1.0 - 1.0 / math.e
    strict: bool = False

    def __post_init__(self):
        if not 0.0 < self.reduction_fraction < 1.0:
            raise DomainError("reduction_fraction debe estar en (0, 1)")
        if self.min_trained_cases < 1:
            raise DomainError("min_trained_cases debe ser ≥ 1")
        if self.batch_size < 1:
            raise DomainError("batch_size debe ser ≥ 1")

    @classmethod
    def from_config(cls, config=None):
        cfg = section(config, "lifecycle")
        return cls(
            min_trained_cases=int(cfg["min_trained_cases"]), reduction_fraction=float(cfg["reduction_fraction"]),
            batch_size=int(cfg["batch_size"]), retention_quantile=float(cfg["retention_quantile"]),
            strict=bool(cfg["strict"]),
        )


# ==========================================
# 2. ENTROPÍA DE INFLUENCIA Y CRITERIOS DE RETENCIÓN
# ==========================================
def entropy_of(weights):
    """Entropía de Shannon (nats) de probabilidades de influencia normalizadas."""
    p = np.asarray(weights, dtype=float)
    p = p[p > 0]
    if p.size <= 1:
        return 0.0
    p = p / p.sum()
    return float(-np.sum(p * np.log(p)))


def _row_entropies(W):
    P = np.where(W > 0, W, 0.0)
    tot = P.sum(axis=1, keepdims=True)
    P = np.divide(P, tot, out=np.zeros_like(P), where=tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return np.maximum(H, 0.0)


def _case_query(snapshot, case, config):
    if isinstance(case, dict):
        context = {k: v for k, v in case.items() if not is_null(v)}
        return Query.from_config(config, context=context)
    r = snapshot.row_of(case)
    context = {}
    for j, a in enumerate(snapshot.features):
        v = snapshot.decode(j, snapshot.X[r, j])
        if v is not None:
            context[a.name] = v
    return Query.from_config(config, context=context, exclude=(case,))


def influence_entropy(store, model, case, config=None):
    """Entropía de las probabilidades de influencia del caso (id almacenado o dict)."""
    snapshot = as_snapshot(store)
    infl = influential_cases(snapshot, model, _case_query(snapshot, case, config), config=config)
    return entropy_of(infl.weights)


def _max_pairwise(snapshot, kernels, rows):
    """Mayor surprisal entre pares de casos del conjunto (0 si hay uno solo)."""
    if len(rows) < 2:
        return 0.0
    Q = snapshot.X[rows]
    S = np.zeros((len(rows), len(rows)))
    for j in range(snapshot.f):
        S += kernels[j].terms_matrix(Q[:, j], Q[:, j])
    return float(S.max())


def _retained(entropy, neighbor_entropies, min_surprisal, max_pairwise, policy):
    """Criterios: entropía alta frente a los vecinos, o surprisal marginal significativo."""
    if len(neighbor_entropies):
        cut = float(np.quantile(neighbor_entropies, policy.retention_quantile))
    else:
        cut = 0.0
    high_entropy = entropy > 0.0 and entropy >= cut
    adds_surprisal = min_surprisal > 0.0 and min_surprisal > max_pairwise
    if policy.strict:
        return high_entropy and adds_surprisal
    return high_entropy or adds_surprisal


def _self_neighbors(snapshot, model, rows, config, seed):
    return batch_neighbors(snapshot, model, snapshot.X[rows], list(range(snapshot.f)), exclude_rows=rows,
                           seed=seed, config=config)


def _split_mass(amount, weights):
    """Reparte `amount` proporcional a weights; la última parte es el remanente."""
    weights = np.asarray(weights, dtype=float)
    shares = [amount * float(w) / float(weights.sum()) for w in weights[:-1]]
    shares.append(amount - math.fsum(shares))
    return shares


# ==========================================
# 3. ABLACIÓN AL ENTRENAR
# ==========================================
def train_with_ablation(store, model, cases, config=None, seed=0):
    """
    Entrena caso a caso. Pasado el mínimo de casos, un caso que no cumple los
    criterios de retención no se guarda: su masa unitaria se reparte entre
    sus casos influyentes. total_mass crece siempre en 1 por caso.
    """
    policy = AblationPolicy.from_config(config)
    if hasattr(cases, "to_dict"):
        cases = cases.to_dict("records")
    report = []
    for values in cases:
        snapshot = store.snapshot
        if model is None or snapshot.n < policy.min_trained_cases:
            res = store.train([values])
            report.append({"status": "trained" if res["accepted"] else "rejected", "ids": res["accepted"],
                           "rejected": res["rejected"]})
            continue
        query = _case_query(snapshot, values, config)
        infl = influential_cases(snapshot, model, query, config=config)
        H = entropy_of(infl.weights)
        _, _, Wn, _ = _self_neighbors(snapshot, model, infl.rows, config, seed)
        kernels = compile_kernels(snapshot, resolve_deviations(snapshot, model))
        keep = _retained(H, _row_entropies(Wn), float(infl.surprisals.min()),
                         _max_pairwise(snapshot, kernels, infl.rows), policy)
        if keep:
            res = store.train([values])
            report.append({"status": "trained" if res["accepted"] else "rejected", "ids": res["accepted"],
                           "rejected": res["rejected"]})
            continue
        shares = _split_mass(1.0, infl.weights)
        ids = [int(c) for c in infl.case_ids]
        store.add_weight(ids, shares)
        report.append({"status": "ablated", "recipients": [{"id": i, "amount": a} for i, a in zip(ids, shares)]})
    logger.info("train con ablación: %d casos, %d ablados", len(report),
                sum(1 for r in report if r["status"] == "ablated"))
    return report


# ==========================================
# 4. REDUCCIÓN POR LOTES
# ==========================================
def reduce(store, model, policy=None, config=None, seed=0):
    """
    Quita por lotes casos que no cumplen la retención hasta |C| ≤ fracción·|C|,
    sumando su peso a sus casos influyentes. La masa total se conserva.
    """
    policy = policy or AblationPolicy.from_config(config)
    qcfg = section(config, "query")
    start_n = len(store)
    mass_before = store.reconcile_mass()
    target = int(math.ceil(start_n * policy.reduction_fraction))
    viable = max(2, int(qcfg["k_min"]) + 1)
    if target < viable:
        msg = f"Objetivo de reducción {target} ajustado a {viable}"
        warnings.warn(msg)
        logger.warning(msg)
        target = viable
    removed, flows, stopped_early = [], [], False
    while len(store) > target:
        snapshot = store.snapshot
        n = snapshot.n
        rows = np.arange(n)
        idx, I, W, _ = _self_neighbors(snapshot, model, rows, config, seed)
        H = _row_entropies(W)
        kernels = compile_kernels(snapshot, resolve_deviations(snapshot, model))
        members = [idx[r][W[r] > 0] for r in rows]
        protected = set()
        for r in rows:
            if members[r].size == 1:
                protected.add(int(members[r][0]))
        candidates = []
        for r in rows:
            m = members[r]
            if m.size == 0:
                continue
            min_i = float(I[r][W[r] > 0].min())
            if not _retained(H[r], H[m], min_i, _max_pairwise(snapshot, kernels, m), policy):
                candidates.append(r)
        if not candidates:
            stopped_early = True
            break
        ranks = snapshot.tie_ranks(seed)
        candidates.sort(key=lambda r: (H[r], ranks[r]))
        chosen, receiving = [], set()
        budget = min(policy.batch_size, len(store) - target)
        for r in candidates:
            if len(chosen) >= budget:
                break
            recips = set(int(x) for x in members[r])
            if r in receiving or r in protected or recips & set(chosen):
                continue
            chosen.append(int(r))
            receiving |= recips
        if not chosen:
            stopped_early = True
            break
        ids, amounts = [], []
        for r in chosen:
            m = members[r]
            shares = _split_mass(float(snapshot.weights[r]), W[r][W[r] > 0])
            to = [int(snapshot.case_ids[x]) for x in m]
            ids.extend(to)
            amounts.extend(shares)
            flows.append({"from": int(snapshot.case_ids[r]), "to": [{"id": i, "amount": a} for i, a in zip(to, shares)]})
        removed_ids = [int(snapshot.case_ids[r]) for r in chosen]
        store.add_weight(ids, amounts)
        store.remove_cases(removed_ids)
        removed.extend(removed_ids)
        logger.debug("reducción: lote de %d, quedan %d", len(chosen), len(store))
    if stopped_early:
        msg = f"Reducción detenida antes del objetivo: {len(store)} > {target}"
        warnings.warn(msg, ConvergenceWarning)
        logger.warning(msg)
    mass_after = store.reconcile_mass()
    return {
        "removed": removed, "flows": flows, "cases_before": start_n, "cases_after": len(store),
        "target": target, "mass_before": mass_before, "mass_after": mass_after, "stopped_early": stopped_early,
    }


# ==========================================
# 5. REBALANCEO
# ==========================================
def rebalance(store, features, mode=None, config=None):
    """
    Ajusta pesos por la participación de masa de la clase de cada caso, un
    feature tras otro; luego renormaliza para conservar total_mass.
    mode: "inverse_share" (iguala clases) o "share" (fórmula literal).
    """
    cfg = section(config, "lifecycle")
    mode = mode or cfg["rebalance_mode"]
    if mode not in ("inverse_share", "share"):
        raise DomainError(f"Modo de rebalanceo desconocido: {mode}")
    if isinstance(features, str):
        features = [features]
    snapshot = store.snapshot
    for name in features:
        if snapshot.features[snapshot.index_of(name)].kind != "nominal":
            raise DomainError(f"{name} debe ser nominal")
    total = store.reconcile_mass()
    w = snapshot.weights.copy()
    for name in features:
        j = snapshot.index_of(name)
        col = snapshot.X[:, j]
        key = np.where(np.isnan(col), -1, col).astype(np.int64)
        share = {}
        for c in np.unique(key):
            share[int(c)] = float(w[key == c].sum()) / float(w.sum())
        factor = np.array([share[int(c)] for c in key])
        w = w / factor if mode == "inverse_share" else w * factor
    w = w * (total / math.fsum(w.tolist()))
    store.set_weights(w)
    logger.info("rebalanceo (%s) sobre %s", mode, features)
    return w
