# -*- coding: utf-8 -*-
"""
Anomalías y agrupamiento por convicción: contribución de surprisal S_i,
convicción de similitud SC_i (también expuesta como σ_i), agrupamiento,
anomalía de grupo y el pipeline que toma la mínima convicción.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from sklearn import metrics

from config import section
from errors import DomainError, EmptyResultError
from mod_data import as_snapshot
from mod_query import batch_neighbors, resolve_deviations
from mod_react import local_deviations, predict_matrix, targeted_neighbors
from mod_surprisal import NOMINAL, compile_kernels, cyclic_difference, lk_expected_difference_laplace

logger = logging.getLogger(__name__)

EPS = 1e-12


# ==========================================
# 1. TIPOS
# ==========================================
@dataclass
class ClusterMap:
    labels: dict                     # id de caso -> cluster (−1 = sin cluster)
    max_sigma: dict = field(default_factory=dict)
    max_surprisal: dict = field(default_factory=dict)

    @property
    def n_clusters(self):
        return len({c for c in self.labels.values() if c != -1})


@dataclass
class AnomalyReport:
    cases: pd.DataFrame
    clusters: ClusterMap
    groups: list = field(default_factory=list)
    threshold: float = 0.5

    @property
    def anomalous_ids(self):
        return self.cases.loc[self.cases["anomalous"], "id"].astype(int).tolist()

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "cases": self.cases.to_dict("records"),
            "clusters": {"n_clusters": self.clusters.n_clusters,
                         "max_sigma": {str(k): v for k, v in self.clusters.max_sigma.items()}},
            "groups": self.groups,
        }


@dataclass
class Contributions:
    """S_i de todos los casos junto con sus conjuntos influyentes."""
    S: np.ndarray
    idx: np.ndarray
    W: np.ndarray


# ==========================================
# 2. CONTRIBUCIÓN DE SURPRISAL Y CONVICCIÓN
# ==========================================
def surprisal_contributions(store, model, config=None, seed=0):
    snapshot = as_snapshot(store)
    cfg = section(config, "anomalies")
    if snapshot.n < 2:
        raise EmptyResultError("Se necesitan al menos 2 casos")
    key = ("contributions", id(model), bool(cfg["local_deviations"]), seed)
    hit = snapshot.cache.get(key)
    if hit is not None:
        return hit
    kernels = compile_kernels(snapshot, resolve_deviations(snapshot, model))
    if cfg["local_deviations"]:
        local = local_deviations(snapshot, model, config)
        kernels = [k if k.kind == NOMINAL else k.with_delta(local[:, j]) for j, k in enumerate(kernels)]
    rows = np.arange(snapshot.n)
    idx, I, W, _ = batch_neighbors(snapshot, model, snapshot.X, list(range(snapshot.f)), exclude_rows=rows,
                                   seed=seed, config=config, kernels=kernels)
    S = np.where(W > 0, W * np.where(np.isfinite(I), I, 0.0), 0.0).sum(axis=1)
    hit = Contributions(S=S, idx=idx, W=W)
    snapshot.cache[key] = hit
    return hit


def _convictions(contrib, cap):
    neigh = np.where(contrib.W > 0, contrib.W * contrib.S[contrib.idx], 0.0).sum(axis=1)
    neigh = np.maximum(neigh, EPS)
    with np.errstate(divide="ignore"):
        sc = np.where(contrib.S > 0, neigh / np.maximum(contrib.S, EPS), cap)
    return np.minimum(sc, cap)


def surprisal_contribution(store, model, case_id, config=None):
    """S_i: surprisal esperado del caso frente a sus casos influyentes (sin él mismo)."""
    snapshot = as_snapshot(store)
    r = snapshot.row_of(case_id)
    return float(surprisal_contributions(snapshot, model, config).S[r])


def similarity_conviction(store, model, case_id, config=None):
    """SC_i = E(S_n | n influyente de i) / S_i. Devuelve (SC, σ), que coinciden."""
    snapshot = as_snapshot(store)
    cfg = section(config, "anomalies")
    r = snapshot.row_of(case_id)
    sc = _convictions(surprisal_contributions(snapshot, model, config), cfg["sc_cap"])
    return float(sc[r]), float(sc[r])


# ==========================================
# 3. AGRUPAMIENTO POR CONVICCIÓN
# ==========================================
def _influential(contrib):
    """C_i de cada caso como dict {fila vecina: P(vecina | i)}, sin el propio caso."""
    out = []
    for i in range(contrib.S.size):
        row = {}
        for r, w in zip(contrib.idx[i], contrib.W[i]):
            if w > 0 and int(r) != i:
                row[int(r)] = row.get(int(r), 0.0) + float(w)
        out.append(row)
    return out


def _relabel(labels, old, cid):
    labels[labels == old] = cid


def conviction_clustering(sc, neighbors, expansion_threshold=0.75, inclusion_threshold=1.5, ranks=None):
    """
    Agrupamiento por convicción sobre arreglos planos.

    sc: convicción de similitud por caso (también usada como σ).
    neighbors: lista con el conjunto influyente C_i de cada caso, como dict
    {vecino: P(vecino | i)}.

    Devuelve las etiquetas crudas (−1 = sin cluster), sin renumerar.
    """
    sc = np.asarray(sc, dtype=float)
    n = sc.size
    ranks = np.arange(n) if ranks is None else np.asarray(ranks)
    labels = np.full(n, -1, dtype=np.int64)

    def frame(i, cid):
        U = [z for z in neighbors[i] if labels[z] != cid]
        for z in U:
            if labels[z] != -1 and labels[z] != cid and i in neighbors[z]:
                _relabel(labels, labels[z], cid)
        G = [z for z in U if sc[z] >= expansion_threshold]
        return iter(G), set(G)

    def expand(root, cid):
        # pila explícita en lugar de recursión; mismo orden de visita
        stack = [frame(root, cid)]
        while stack:
            it, G = stack[-1]
            z = next(it, None)
            if z is None:
                stack.pop()
                continue
            if labels[z] == cid:
                continue
            spanned = {int(labels[y]) for y in neighbors[z] if labels[y] != -1}
            if len(spanned) > 1:
                if any(labels[y] == -1 and y in G for y in neighbors[z]):
                    continue
                mass = {}
                for y, p in neighbors[z].items():
                    if labels[y] != -1:
                        mass[int(labels[y])] = mass.get(int(labels[y]), 0.0) + p
                best = max(sorted(mass), key=lambda c: mass[c])
                if best != cid:
                    labels[z] = best
                    continue
            labels[z] = cid
            stack.append(frame(z, cid))

    next_id = 0
    for s in np.lexsort((ranks, -sc)):
        if sc[s] < 1.0:
            break
        if labels[s] != -1:
            continue
        next_id += 1
        labels[s] = next_id
        expand(int(s), next_id)

    max_sigma = {int(c): float(sc[labels == c].max()) for c in np.unique(labels) if c != -1}
    changed = True
    while changed:
        changed = False
        free = np.flatnonzero(labels == -1)
        for i in free[np.lexsort((ranks[free], sc[free]))]:
            touched = {int(labels[y]) for y in neighbors[i] if labels[y] != -1}
            if len(touched) != 1:
                continue
            c = touched.pop()
            if sc[i] < inclusion_threshold * max_sigma[c]:
                labels[i] = c
                max_sigma[c] = max(max_sigma[c], float(sc[i]))
                changed = True
    return labels


def cluster(store, model, config=None, seed=0):
    """
    Semillas con SC ≥ 1 en orden descendente, expansión con reetiquetado y
    asignación por masa de probabilidad cuando los vecinos abarcan varios
    clusters; luego los casos libres se adjuntan por σ ascendente si su
    conjunto influyente toca un único cluster.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "anomalies")
    contrib = surprisal_contributions(snapshot, model, config, seed)
    sc = _convictions(contrib, cfg["sc_cap"])
    S = contrib.S
    n = snapshot.n
    ranks = snapshot.tie_ranks(seed)
    labels = conviction_clustering(sc, _influential(contrib), cfg["expansion_threshold"],
                                   cfg["inclusion_threshold"], ranks)

    # ids contiguos 1..K por orden de aparición
    remap, out = {}, {}
    for r in np.argsort(ranks, kind="stable"):
        c = int(labels[r])
        if c != -1 and c not in remap:
            remap[c] = len(remap) + 1
    final = np.array([remap.get(int(c), -1) for c in labels], dtype=np.int64)
    for r in range(n):
        out[int(snapshot.case_ids[r])] = int(final[r])
    max_sigma, max_surprisal = {}, {}
    for c in sorted(set(final.tolist()) - {-1}):
        members = final == c
        max_sigma[c] = float(sc[members].max())
        max_surprisal[c] = float(S[members].max())
    logger.info("cluster: %d clusters, %d sin cluster", len(max_sigma), int((final == -1).sum()))
    return ClusterMap(labels=out, max_sigma=max_sigma, max_surprisal=max_surprisal)


# ==========================================
# 4. ANOMALÍA DE GRUPO
# ==========================================
def average_group_surprisal(S, w):
    """AGS: suma de S_i normalizada por masa."""
    S = np.asarray(S, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(np.sum(w * S) / np.sum(w))


def exponential_kl(S, w, expected, bins=10):
    """
    KL de la distribución de S del grupo (ponderada por masa) frente a una
    exponencial de media `expected`, sobre bins equiprobables de la referencia.
    """
    S = np.asarray(S, dtype=float)
    w = np.asarray(w, dtype=float)
    edges = stats.expon.ppf(np.linspace(0.0, 1.0, bins + 1)[1:-1], scale=max(float(expected), EPS))
    mass = np.bincount(np.searchsorted(edges, S, side="right"), weights=w, minlength=bins)
    return float(stats.entropy(mass, np.full(bins, 1.0 / bins)))


def group_anomalousness(store, model, group_feature, config=None, seed=0):
    """AGS, KL y convicción de grupo por clase de un feature nominal."""
    snapshot = as_snapshot(store)
    cfg = section(config, "anomalies")
    j = snapshot.index_of(group_feature)
    if snapshot.features[j].kind != "nominal":
        raise DomainError(f"{group_feature} debe ser nominal")
    contrib = surprisal_contributions(snapshot, model, config, seed)
    w = snapshot.weights
    expected = average_group_surprisal(contrib.S, w)
    col = snapshot.X[:, j]
    out = []
    for code, label in enumerate(snapshot.tables[j]):
        members = col == code
        if not members.any():
            msg = f"Grupo vacío: {label}"
            warnings.warn(msg)
            logger.warning(msg)
            continue
        ags = average_group_surprisal(contrib.S[members], w[members])
        out.append({
            "group": label, "size": int(members.sum()), "mass": float(w[members].sum()), "ags": ags,
            "kl": exponential_kl(contrib.S[members], w[members], expected, cfg["kl_bins"]),
            "conviction": float(min(expected / ags, cfg["sc_cap"])) if ags > 0 else float(cfg["sc_cap"]),
        })
    return out


# ==========================================
# 5. CONVICCIÓN DE RESIDUAL POR FEATURE
# ==========================================
def residual_convictions(store, model, config=None, seed=0):
    """Matriz (casos x features) de convicción de residual, cada caso fuera de su conjunto."""
    snapshot = as_snapshot(store)
    rows = np.arange(snapshot.n)
    out = np.full((snapshot.n, snapshot.f), np.nan)
    for j, a in enumerate(snapshot.features):
        idx, _, W, _ = targeted_neighbors(snapshot, model, a.name, rows, config=config, seed=seed)
        pred, res, mass = predict_matrix(a, snapshot.X[idx, j], W, snapshot.n_classes(j))
        actual = snapshot.X[:, j]
        if a.kind == "nominal":
            codes = np.where(np.isnan(actual), 0, actual).astype(np.int64)
            p_act = np.where(codes < mass.shape[1], mass[rows, np.minimum(codes, mass.shape[1] - 1)], 0.0)
            err = 1.0 - p_act
        elif a.kind == "cyclic":
            err = cyclic_difference(pred, actual, a.cycle_period)
        else:
            err = np.abs(pred - actual)
        ok = ~np.isnan(actual) & ~np.isnan(pred)
        delta = resolve_deviations(snapshot, model, a.name).delta(a.name)
        out[ok, j] = (lk_expected_difference_laplace(0.0, res[ok], delta)
                      / lk_expected_difference_laplace(0.0, err[ok], delta))
    return out


# ==========================================
# 6. PIPELINE
# ==========================================
def detect_anomalies(store, model, config=None, seed=0, threshold=None):
    """
    σ/SC por caso, agrupamiento, convicción de grupo para clusters pequeños y
    casos sueltos, convicciones de residual opcionales; la mínima decide.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "anomalies")
    threshold = cfg["sc_threshold"] if threshold is None else threshold
    cap = cfg["sc_cap"]
    contrib = surprisal_contributions(snapshot, model, config, seed)
    sc = _convictions(contrib, cap)
    S = contrib.S
    w = snapshot.weights
    cmap = cluster(snapshot, model, config, seed)
    labels = np.array([cmap.labels[int(c)] for c in snapshot.case_ids])
    expected = average_group_surprisal(S, w)

    group = np.full(snapshot.n, np.nan)
    small = cfg["small_cluster_fraction"] * snapshot.n
    for c in set(labels.tolist()):
        members = labels == c
        if c == -1:
            group[members] = np.where(S[members] > 0, expected / np.maximum(S[members], EPS), cap)
        elif members.sum() < small:
            ags = average_group_surprisal(S[members], w[members])
            group[members] = expected / ags if ags > 0 else cap
    group = np.minimum(group, cap)

    frame = pd.DataFrame({
        "id": snapshot.case_ids.astype(int),
        "surprisal_contribution": S,
        "sigma": sc,
        "similarity_conviction": sc,
        "cluster": labels,
        "group_conviction": group,
    })
    forms = [sc, np.where(np.isnan(group), np.inf, group)]
    if cfg["residual_convictions"]:
        rc = residual_convictions(snapshot, model, config, seed)
        for j, a in enumerate(snapshot.features):
            frame[f"rc_{a.name}"] = rc[:, j]
        forms.append(np.nanmin(np.where(np.isnan(rc), np.inf, rc), axis=1))
    minimal = np.min(np.vstack(forms), axis=0)
    frame["minimal_conviction"] = minimal
    frame["anomalous"] = minimal <= threshold
    logger.info("anomalías: %d de %d casos", int(frame["anomalous"].sum()), snapshot.n)
    return AnomalyReport(cases=frame, clusters=cmap, threshold=threshold)


def score_anomalies(report, truth):
    """PR-AUC y ROC-AUC de la mínima convicción contra etiquetas reales (1 = anómalo)."""
    truth = np.asarray(truth, dtype=int)
    score = -report.cases["minimal_conviction"].to_numpy(dtype=float)
    if truth.min() == truth.max():
        raise DomainError("Las etiquetas deben contener ambas clases")
    flagged = report.cases["anomalous"].to_numpy(dtype=bool)
    return {
        "pr_auc": float(metrics.average_precision_score(truth, score)),
        "roc_auc": float(metrics.roc_auc_score(truth, score)),
        "f1": float(metrics.f1_score(truth, flagged.astype(int), zero_division=0)),
    }
