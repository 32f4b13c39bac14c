# -*- coding: utf-8 -*-
"""
Explicaciones y descubrimiento causal: contribuciones de predicción y de
precisión por coaliciones de features, IAC/IAAC, MCR y grafo causal.
"""
import logging
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import pandas as pd
from scipy.special import comb

from config import section
from errors import DomainError, EmptyResultError
from mod_data import as_snapshot
from mod_query import Query, influential_cases, neighbors_from_matrix, resolve_deviations
from mod_react import predict_matrix
from mod_surprisal import compile_kernels, cyclic_difference, surprisal_of_ratio

logger = logging.getLogger(__name__)

TERM_CACHE_BYTES = 256 * 2 ** 20


# ==========================================
# 1. TIPOS
# ==========================================
@dataclass
class CoalitionTable:
    """Evaluaciones por coalición: filas indexadas por máscara de bits sobre `features`."""
    target: str
    features: list
    index: dict
    value: np.ndarray         # (C, E) predicción (o P(clase real) en nominales)
    error: np.ndarray         # (C, E) error absoluto dejando uno fuera
    residual: np.ndarray      # (C, E) residual estimado
    exhaustive: bool
    pairs: list = field(default_factory=list)   # (máscara previa, posición) en modo muestreado
    prefixes: list = field(default_factory=list)

    def row(self, mask):
        return self.index[mask]

    @property
    def full_mask(self):
        return (1 << len(self.features)) - 1


@dataclass
class ContributionReport:
    target: str
    directional: dict
    absolute: dict
    accuracy: dict
    coalitions: int
    exhaustive: bool
    eval_cases: int

    def values(self, mode="absolute"):
        if mode not in ("directional", "absolute", "accuracy"):
            raise DomainError(f"Modo desconocido: {mode}")
        return getattr(self, mode)

    def to_dict(self):
        return {
            "target": self.target, "directional": self.directional, "absolute": self.absolute,
            "accuracy": self.accuracy, "coalitions": self.coalitions, "exhaustive": self.exhaustive,
            "eval_cases": self.eval_cases,
        }


@dataclass
class CausalReport:
    iac: pd.DataFrame
    iaac: pd.DataFrame
    mcr: dict
    edges: list
    flagged: list = field(default_factory=list)

    def to_dict(self):
        return {
            "iac": {c: {r: float(v) for r, v in self.iac[c].items()} for c in self.iac.columns},
            "iaac": {c: {r: float(v) for r, v in self.iaac[c].items()} for c in self.iaac.columns},
            "mcr": self.mcr,
            "edges": self.edges,
            "flagged": self.flagged,
        }


# ==========================================
# 2. EVALUACIÓN DE COALICIONES
# ==========================================
class _Terms:
    """Matrices de surprisal por feature (casos de evaluación x almacén), con caché acotada."""

    def __init__(self, snapshot, kernels, rows, feat):
        self.snapshot = snapshot
        self.kernels = kernels
        self.rows = rows
        self.feat = feat
        self.keep = rows.size * snapshot.n * 8 * len(feat) <= TERM_CACHE_BYTES
        self._cache = {}

    def __getitem__(self, jj):
        hit = self._cache.get(jj)
        if hit is None:
            j = self.feat[jj]
            hit = self.kernels[j].terms_matrix(self.snapshot.X[self.rows, j], self.snapshot.X[:, j])
            if self.keep:
                self._cache[jj] = hit
        return hit


def evaluation_rows(snapshot, target, config=None, seed=0, condition=None, model=None):
    """Casos de evaluación con target no NULL; opcionalmente el conjunto influyente de `condition`."""
    t = snapshot.index_of(target)
    eligible = np.flatnonzero(~np.isnan(snapshot.X[:, t]))
    if condition:
        infl = influential_cases(snapshot, model, Query.from_config(config, context=dict(condition)), config=config)
        eligible = np.intersect1d(eligible, infl.rows)
    if eligible.size < 2:
        raise EmptyResultError(f"Casos insuficientes para evaluar {target}")
    cap = int(section(config, "analysis")["eval_cases"])
    if eligible.size <= cap:
        return eligible
    rng = np.random.default_rng([int(seed), t])
    return np.sort(rng.choice(eligible, size=cap, replace=False))


def evaluate_coalitions(store, model, target, config=None, seed=0, rows=None, samples=None,
                        exhaustive=None):
    """
    Predice target para los casos de evaluación (dejando cada uno fuera) con
    cada coalición de los demás features. Exhaustivo con código Gray cuando
    hay pocos features; si no, prefijos de permutaciones aleatorias.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "analysis")
    qcfg = section(config, "query")
    deviations = resolve_deviations(snapshot, model)
    kernels = compile_kernels(snapshot, deviations)
    t = snapshot.index_of(target)
    attr = snapshot.features[t]
    feat = [j for j in range(snapshot.f) if j != t]
    m = len(feat)
    if rows is None:
        rows = evaluation_rows(snapshot, target, config, seed)
    rows = np.asarray(rows, dtype=np.int64)
    E, n = rows.size, snapshot.n
    K = snapshot.n_classes(t)
    cand = ~np.isnan(snapshot.X[:, t])
    w_all = snapshot.weights
    ranks = snapshot.tie_ranks(seed)
    actual = snapshot.X[rows, t]
    col = snapshot.X[:, t]
    terms = _Terms(snapshot, kernels, rows, feat)
    ar = np.arange(E)

    # contexto vacío: predictor marginal ponderado sin el propio caso
    W0 = np.broadcast_to(np.where(cand, w_all, 0.0), (E, n)).copy()
    W0[ar, rows] = 0.0
    V0 = np.broadcast_to(col, (E, n))

    def _score(pred, res, mass):
        if attr.kind == "nominal":
            codes = actual.astype(np.int64)
            p_act = np.where(codes < mass.shape[1], mass[ar, np.minimum(codes, mass.shape[1] - 1)], 0.0)
            return p_act, 1.0 - p_act, res
        if attr.kind == "cyclic":
            err = cyclic_difference(pred, actual, attr.cycle_period)
        else:
            err = np.abs(pred - actual)
        return pred, err, res

    def _evaluate(S):
        if S is None:
            return _score(*predict_matrix(attr, V0, W0, K))
        S = S.copy()
        S[:, ~cand] = np.inf
        S[ar, rows] = np.inf
        idx, _, W, _ = neighbors_from_matrix(S, w_all, ranks, qcfg["threshold"], qcfg["k_min"], qcfg["k_max"],
                                             None, int(qcfg["prefetch"]))
        return _score(*predict_matrix(attr, col[idx], W, K))

    if exhaustive is None:
        exhaustive = m <= int(cfg["exhaustive_max_features"])
    if exhaustive:
        C = 1 << m
        value, error, residual = (np.empty((C, E)) for _ in range(3))
        S = np.zeros((E, n))
        prev = 0
        for i in range(C):
            gray = i ^ (i >> 1)
            if i > 0:
                bit = (gray ^ prev).bit_length() - 1
                S = S + terms[bit] if gray & (1 << bit) else S - terms[bit]
            prev = gray
            value[gray], error[gray], residual[gray] = _evaluate(S if gray else None)
        table = CoalitionTable(target, [snapshot.features[j].name for j in feat], {c: c for c in range(C)},
                               value, error, residual, True)
    else:
        n_perm = max(1, math.ceil(int(samples or cfg["coalition_samples"]) / max(m, 1)))
        rng = np.random.default_rng([int(seed), t, 7])
        index, vals, errs, ress, pairs, prefixes = {}, [], [], [], [], []

        def _record(mask, S):
            if mask not in index:
                v, e, r = _evaluate(S if mask else None)
                index[mask] = len(vals)
                vals.append(v)
                errs.append(e)
                ress.append(r)
            prefixes.append(mask)

        for _ in range(n_perm):
            perm = rng.permutation(m)
            S = np.zeros((E, n))
            mask = 0
            _record(mask, None)
            for jj in perm:
                pairs.append((mask, int(jj)))
                S = S + terms[int(jj)]
                mask |= 1 << int(jj)
                _record(mask, S)
        table = CoalitionTable(target, [snapshot.features[j].name for j in feat], index,
                               np.array(vals), np.array(errs), np.array(ress), False, pairs, prefixes)
    logger.debug("coaliciones %s: %d evaluadas (exhaustivo=%s)", target, len(table.index), table.exhaustive)
    return table


def shapley(table, quantity, absolute=False):
    """Esperanza de quantity(G∪{j}) − quantity(G) por feature; quantity es (C, E)."""
    m = len(table.features)
    out = np.zeros(m)
    if m == 0:
        return out
    if table.exhaustive:
        masks = np.arange(1 << m)
        sizes = np.array([bin(c).count("1") for c in masks])
        for j in range(m):
            sel = masks[(masks >> j) & 1 == 0]
            w = 1.0 / (m * comb(m - 1, sizes[sel]))
            D = quantity[sel | (1 << j)] - quantity[sel]
            D = np.abs(D) if absolute else D
            out[j] = float(np.sum(w * np.nanmean(D, axis=1)))
        return out
    acc = np.zeros(m)
    cnt = np.zeros(m)
    for mask, j in table.pairs:
        D = quantity[table.row(mask | (1 << j))] - quantity[table.row(mask)]
        acc[j] += np.nanmean(np.abs(D) if absolute else D)
        cnt[j] += 1
    return np.divide(acc, cnt, out=np.zeros(m), where=cnt > 0)


def robust_residual(table):
    """Residual medio sobre coaliciones uniformes (todas, o prefijos muestreados)."""
    per = np.nanmean(table.residual, axis=1)
    if table.exhaustive:
        return float(np.mean(per))
    return float(np.mean([per[table.row(c)] for c in table.prefixes]))


def full_residual(table):
    return float(np.nanmean(table.residual[table.row(table.full_mask)]))


# ==========================================
# 3. CONTRIBUCIONES
# ==========================================
def _report(table, rows):
    names = table.features
    dpc = shapley(table, table.value)
    apc = shapley(table, table.value, absolute=True)
    ac = shapley(table, table.error)
    return ContributionReport(
        target=table.target,
        directional=dict(zip(names, map(float, dpc))),
        absolute=dict(zip(names, map(float, apc))),
        accuracy=dict(zip(names, map(float, ac))),
        coalitions=len(table.index), exhaustive=table.exhaustive, eval_cases=int(len(rows)),
    )


def prediction_contributions(store, model, target, mode="absolute", condition=None, config=None, seed=0,
                             samples=None, exhaustive=None):
    """
    Contribución de cada feature a la predicción de target. `condition` (dict)
    restringe los casos de evaluación al conjunto influyente de ese contexto.
    """
    snapshot = as_snapshot(store)
    if mode not in ("directional", "absolute"):
        raise DomainError(f"Modo desconocido: {mode}")
    rows = evaluation_rows(snapshot, target, config, seed, condition=condition, model=model)
    table = evaluate_coalitions(snapshot, model, target, config, seed, rows, samples, exhaustive)
    return _report(table, rows)


def accuracy_contributions(store, model, target, config=None, seed=0, samples=None, exhaustive=None):
    """AC por feature: negativo cuando el feature reduce el error de target."""
    snapshot = as_snapshot(store)
    rows = evaluation_rows(snapshot, target, config, seed)
    table = evaluate_coalitions(snapshot, model, target, config, seed, rows, samples, exhaustive)
    return _report(table, rows).accuracy


# ==========================================
# 4. CAUSALIDAD
# ==========================================
def information_of_accuracy_contribution(ac, rr):
    """
    IAC[j, t] = g(|AC[j, t]| / rr_t) con g el surprisal LK-Laplace menos 1.5.
    Devuelve (IAC, entradas marcadas por rr no positivo).
    """
    ac = ac.astype(float)
    iac = pd.DataFrame(0.0, index=ac.index, columns=ac.columns)
    flagged = []
    for t in ac.columns:
        scale = float(rr.get(t, 0.0))
        if not scale > 0:
            flagged.append(t)
            iac[t] = np.nan
            continue
        iac[t] = surprisal_of_ratio(np.abs(ac[t].fillna(0.0).to_numpy()) / scale)
    for name in iac.index:
        if name in iac.columns:
            iac.at[name, name] = 0.0
    return iac, flagged


def causal_asymmetries(iac, mcr=None, threshold=None, undirected_mcr=None, config=None):
    """IAAC[j, t] = IAC[t, j] − IAC[j, t]; arista j→t cuando IAC[j, t] − IAC[t, j] supera el umbral."""
    cfg = section(config, "insight")
    threshold = cfg["edge_threshold"] if threshold is None else threshold
    undirected_mcr = cfg["undirected_mcr"] if undirected_mcr is None else undirected_mcr
    names = [n for n in iac.columns if n in iac.index]
    sq = iac.loc[names, names].fillna(0.0)
    iaac = sq.T - sq
    mcr = mcr or {}
    edges = []
    for a_i, a in enumerate(names):
        for b in names[a_i + 1:]:
            d = float(sq.at[a, b] - sq.at[b, a])
            if abs(d) <= threshold:
                continue
            src, dst = (a, b) if d > 0 else (b, a)
            undirected = mcr.get(a, 0.0) > undirected_mcr and mcr.get(b, 0.0) > undirected_mcr
            edges.append({"from": src, "to": dst, "strength": abs(d), "undirected": bool(undirected)})
    edges.sort(key=lambda e: (-e["strength"], e["from"], e["to"]))
    return iaac, edges


def missing_certainty_ratio(model):
    """MCR_j = r_j / δ_j y lista de features con δ en el piso."""
    out, flagged = {}, []
    for name, r in model.residuals.items():
        dev = model.deviations_for(name)
        delta = dev.delta(name)
        if dev.at_floor(name):
            flagged.append(name)
        out[name] = float(r / delta) if delta > 0 else float("inf")
    return out, flagged


def suggest_feature_discovery(model, top=None):
    """Features ordenados por MCR: dónde conviene buscar causas faltantes."""
    mcr, flagged = missing_certainty_ratio(model)
    rows = []
    for name, ratio in mcr.items():
        gap = float(model.residuals[name] - model.deviations_for(name).delta(name))
        rows.append({"feature": name, "mcr": ratio, "residual_gap": gap, "deviation_at_floor": name in flagged})
    rows.sort(key=lambda r: (-r["mcr"], r["feature"]))
    return rows[:top] if top else rows


def causal_report(model, config=None):
    """IAC, IAAC, MCR y aristas a partir de un análisis sin target."""
    cfg = section(config, "insight")
    ac = model.accuracy_contributions
    if ac is None or ac.empty:
        raise DomainError("El modelo no tiene contribuciones de precisión")
    scale = model.robust_residuals if cfg["iac_residual"] == "robust" else model.residuals
    iac, flagged = information_of_accuracy_contribution(ac, scale)
    mcr, _ = missing_certainty_ratio(model)
    iaac, edges = causal_asymmetries(iac, mcr, config=config)
    return CausalReport(iac=iac, iaac=iaac, mcr=mcr, edges=edges, flagged=flagged)


def causal_graph(report):
    g = nx.DiGraph()
    g.add_nodes_from(report.iac.columns)
    for e in report.edges:
        g.add_edge(e["from"], e["to"], weight=round(e["strength"], 6),
                   style="dashed" if e["undirected"] else "solid")
    return g


def to_dot(graph):
    return nx.nx_pydot.to_pydot(graph).to_string()


def graph_metrics(graph, truth):
    """Precisión, exhaustividad y distancia estructural de Hamming contra un grafo conocido."""
    pred = set(graph.edges())
    true = set(truth.edges())
    tp = len(pred & true)
    reversed_ = {(b, a) for a, b in pred} & true
    missing = {e for e in true if e not in pred and (e[1], e[0]) not in pred}
    extra = {e for e in pred if e not in true and (e[1], e[0]) not in true}
    return {
        "precision": tp / len(pred) if pred else 0.0,
        "recall": tp / len(true) if true else 0.0,
        "shd": len(missing) + len(extra) + len(reversed_),
    }
