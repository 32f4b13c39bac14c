# -*- coding: utf-8 -*-
"""
Motor de consultas: casos influyentes y vecinos más cercanos por surprisal.

La ruta rápida usa sumas parciales por feature (coincidencias exactas y
valores dentro de 5δ), cotas inferiores acumuladas para los features no
poblados y descarte temprano contra la distancia de rechazo actual. La ruta
ingenua recorre todos los casos y sirve de oráculo.
"""
import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from config import section
from errors import DomainError, EmptyResultError
from mod_data import as_snapshot
from mod_surprisal import NOMINAL, CYCLIC, compile_kernels, initial_deviations, DeviationSpec

logger = logging.getLogger(__name__)

_tls = threading.local()
BOUND_EPS = 1e-12


# ==========================================
# 1. TIPOS
# ==========================================
@dataclass
class Constraint:
    feature: str
    values: list = None
    interval: tuple = None

    def __post_init__(self):
        if self.interval is not None and self.interval[0] > self.interval[1]:
            raise DomainError(f"Intervalo mal ordenado en {self.feature}")

    def mask(self, snapshot):
        j = snapshot.index_of(self.feature)
        col = snapshot.X[:, j]
        ok = np.ones(snapshot.n, dtype=bool)
        if self.values is not None:
            codes = [snapshot.encode(j, v) for v in self.values]
            ok &= np.isin(col, [c for c in codes if not math.isnan(c)])
            if any(math.isnan(c) for c in codes):
                ok |= np.isnan(col)
        if self.interval is not None:
            with np.errstate(invalid="ignore"):
                ok &= (col >= self.interval[0]) & (col <= self.interval[1])
        return ok


@dataclass
class Goal:
    feature: str
    direction: str = "max"        # min | max | approach
    value: float = None

    def score(self, values, nominal=False):
        values = np.asarray(values, dtype=float)
        if self.direction == "approach":
            if nominal:
                return np.where(values == self.value, 0.0, 1.0)
            return np.abs(values - float(self.value))
        if nominal:
            raise DomainError(f"Meta {self.direction} sobre nominal {self.feature}")
        if self.direction == "min":
            return values
        if self.direction == "max":
            return -values
        raise DomainError(f"Dirección de meta desconocida: {self.direction}")


@dataclass
class Query:
    context: dict = field(default_factory=dict)
    target: str = None
    k: int = None
    k_min: int = 1
    k_max: int = None
    threshold: float = math.exp(-3.0)
    constraints: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    seed: int = 0
    p: float = 1.0
    feature_weights: dict = None
    exclude: tuple = ()
    require_values: tuple = ()     # features que no pueden ser NULL en los candidatos

    def __post_init__(self):
        overlap = {g.feature for g in self.goals} & set(self.context)
        if overlap:
            raise DomainError(f"Features de meta en el contexto: {sorted(overlap)}")

    @classmethod
    def from_config(cls, config=None, **kwargs):
        cfg = section(config, "query")
        kwargs.setdefault("threshold", cfg["threshold"])
        kwargs.setdefault("k_min", cfg["k_min"])
        kwargs.setdefault("k_max", cfg["k_max"])
        return cls(**kwargs)


@dataclass
class Neighborhood:
    rows: np.ndarray
    surprisals: np.ndarray
    probabilities: np.ndarray
    weights: np.ndarray


@dataclass
class InfluenceSet:
    case_ids: np.ndarray
    rows: np.ndarray
    surprisals: np.ndarray
    probabilities: np.ndarray
    weights: np.ndarray
    query: Query = None

    def __len__(self):
        return len(self.rows)

    def entries(self, snapshot=None):
        out = []
        for i in range(len(self.rows)):
            e = {
                "id": int(self.case_ids[i]),
                "surprisal": float(self.surprisals[i]),
                "probability": float(self.probabilities[i]),
                "weight": float(self.weights[i]),
            }
            if snapshot is not None:
                r = int(self.rows[i])
                e["session"] = snapshot.sessions[r]
                e["train_index"] = int(snapshot.train_index[r])
            out.append(e)
        return out


# ==========================================
# 2. PREPARACIÓN
# ==========================================
def resolve_deviations(snapshot, model, target=None):
    """Desviaciones del modelo; las de la rejilla dirigida si `target` las tiene."""
    if model is None:
        return initial_deviations(snapshot)
    if isinstance(model, DeviationSpec):
        return model
    targeted = (getattr(model, "targeted_config", None) or {}).get(target) if target else None
    if targeted and targeted.get("deviations") is not None:
        return targeted["deviations"]
    return model.deviations


@dataclass
class Prepared:
    idx: list
    qvec: np.ndarray
    kernels: list
    fw: np.ndarray
    p: float
    mask: np.ndarray
    ranks: np.ndarray


def candidate_mask(snapshot, query, deviations=None, kernels=None):
    mask = np.ones(snapshot.n, dtype=bool)
    for c in query.constraints:
        mask &= c.mask(snapshot)
    for name in query.require_values:
        mask &= ~np.isnan(snapshot.X[:, snapshot.index_of(name)])
    for cid in query.exclude:
        try:
            mask[snapshot.row_of(cid)] = False
        except KeyError:
            pass
    # features dependientes: solo casos que coinciden en los features de los que dependen
    for name in query.context:
        a = snapshot.features[snapshot.index_of(name)]
        for dep in a.dependent_on:
            if dep not in query.context:
                continue
            d = snapshot.index_of(dep)
            v = snapshot.encode(d, query.context[dep])
            col = snapshot.X[:, d]
            if math.isnan(v):
                mask &= np.isnan(col)
            elif snapshot.features[d].kind in ("nominal", "ordinal"):
                mask &= col == v
            else:
                tol = deviations.continuous.get(dep, 0.0) if deviations is not None else 0.0
                with np.errstate(invalid="ignore"):
                    mask &= np.abs(col - v) <= tol
    return mask


def prepare(snapshot, model, query, kernels=None):
    deviations = resolve_deviations(snapshot, model, query.target)
    if kernels is None:
        kernels = compile_kernels(snapshot, deviations)
    idx, qvec = snapshot.encode_context(query.context)
    fw = None
    if query.feature_weights is not None:
        fw = np.array([float(query.feature_weights.get(snapshot.features[j].name, 0.0)) for j in idx])
    if query.p not in (0.1, 0.5, 1, 1.0, 2.0):
        raise DomainError(f"p={query.p} no soportado")
    return Prepared(
        idx=idx, qvec=qvec, kernels=[kernels[j] for j in idx], fw=fw, p=float(query.p),
        mask=candidate_mask(snapshot, query, deviations), ranks=snapshot.tie_ranks(query.seed),
    )


def _term(prep, jj, col):
    t = prep.kernels[jj].terms(prep.qvec[jj], col)
    if prep.fw is not None:
        t = t * prep.fw[jj]
    if prep.p != 1.0:
        t = np.power(t, prep.p)
    return t


def exact_surprisals(snapshot, prep, rows):
    """Distancia canónica: misma suma, mismo orden en ambas rutas."""
    rows = np.asarray(rows, dtype=np.int64)
    acc = np.zeros(rows.size)
    for jj, j in enumerate(prep.idx):
        acc = acc + _term(prep, jj, snapshot.X[rows, j])
    if prep.p != 1.0:
        acc = np.power(acc, 1.0 / prep.p)
    return acc


def _order(I, rows, ranks):
    o = np.lexsort((ranks[rows], I))
    return rows[o], I[o]


# ==========================================
# 3. VECINOS MÁS CERCANOS
# ==========================================
def naive_nearest(snapshot, prep, k=None):
    rows = np.flatnonzero(prep.mask)
    I = exact_surprisals(snapshot, prep, rows)
    rows, I = _order(I, rows, prep.ranks)
    if k is not None:
        rows, I = rows[:k], I[:k]
    return rows, I


def _sorted_column(snapshot, j):
    key = ("sorted", j)
    hit = snapshot.cache.get(key)
    if hit is None:
        col = snapshot.X[:, j]
        order = np.argsort(col, kind="stable")          # NaN al final
        n_valid = int((~np.isnan(col)).sum())
        hit = (order, col[order], n_valid)
        snapshot.cache[key] = hit
    return hit


def _populated_rows(snapshot, prep, jj, expansion):
    """Filas con coincidencia exacta o dentro de expansion·δ para el feature jj."""
    j = prep.idx[jj]
    k = prep.kernels[jj]
    order, sorted_col, n_valid = _sorted_column(snapshot, j)
    qv = prep.qvec[jj]
    if math.isnan(qv):
        return order[n_valid:]
    valid = sorted_col[:n_valid]
    if k.kind == NOMINAL:
        lo = np.searchsorted(valid, qv, side="left")
        hi = np.searchsorted(valid, qv, side="right")
        return order[lo:hi]
    radius = expansion * float(k.delta)
    if k.kind == CYCLIC:
        T = k.period
        if 2 * radius >= T:
            return order[:n_valid]
        lo_v, hi_v = qv - radius, qv + radius
        parts = [(max(lo_v, 0.0), min(hi_v, T))]
        if lo_v < 0:
            parts.append((lo_v + T, T))
        if hi_v > T:
            parts.append((0.0, hi_v - T))
        chunks = []
        for a, b in parts:
            lo = np.searchsorted(valid, a, side="left")
            hi = np.searchsorted(valid, b, side="right")
            chunks.append(order[lo:hi])
        return np.unique(np.concatenate(chunks))
    lo = np.searchsorted(valid, qv - radius, side="left")
    hi = np.searchsorted(valid, qv + radius, side="right")
    return order[lo:hi]


def find_nearest_cases(store, model, query, k_upper, naive=False, verify=False, config=None, prep=None):
    """Top-k exacto por surprisal. Devuelve (filas, surprisals) ordenados."""
    snapshot = as_snapshot(store)
    if k_upper is None or k_upper < 1:
        raise DomainError("k_upper debe ser ≥ 1")
    if snapshot.n == 0:
        raise EmptyResultError("Almacén vacío")
    cfg = section(config, "query")
    if prep is None:
        prep = prepare(snapshot, model, query)
    cand = np.flatnonzero(prep.mask)
    if cand.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    if naive or not prep.idx or cand.size <= max(k_upper, 64):
        return naive_nearest(snapshot, prep, k_upper)

    n = snapshot.n
    F = len(prep.idx)
    expansion = cfg["expansion"]

    # 1) sumas parciales de los features poblados
    partial = np.zeros(n)
    pop_count = np.zeros(n, dtype=np.int64)
    populated = np.zeros((n, F), dtype=bool)
    for jj in range(F):
        rows = _populated_rows(snapshot, prep, jj, expansion)
        if rows.size:
            partial[rows] += _term(prep, jj, snapshot.X[rows, prep.idx[jj]])
            pop_count[rows] += 1
            populated[rows, jj] = True

    # 2) cota inferior por feature no poblado y mínimos acumulados
    lbs = []
    for jj, k in enumerate(prep.kernels):
        lb = k.lower_bound_outside(0.0 if k.kind == NOMINAL else expansion * float(k.delta))
        if prep.fw is not None:
            lb *= prep.fw[jj]
        if prep.p != 1.0:
            lb = lb ** prep.p
        lbs.append(lb)
    cum_min = np.concatenate([[0.0], np.cumsum(np.sort(lbs))])
    bound = partial + cum_min[F - pop_count]

    # 3) semillas: candidatos con más features poblados + resultado previo del hilo
    n_seed = int(min(cfg["seed_cap"], max(k_upper, cand.size * cfg["seed_fraction"])))
    n_seed = min(max(n_seed, k_upper), cand.size)
    order = np.lexsort((bound[cand], -pop_count[cand]))
    seeds = cand[order[:n_seed]]
    prev = getattr(_tls, "previous", None)
    if prev is not None and prev[0] == snapshot.snapshot_id and prev[1] == tuple(prep.idx):
        extra = prev[2][prep.mask[prev[2]]]
        seeds = np.unique(np.concatenate([seeds, extra]))
    top_rows, top_I = _order(exact_surprisals(snapshot, prep, seeds), seeds, prep.ranks)
    top_rows, top_I = top_rows[:k_upper], top_I[:k_upper]

    def _reject():
        r = top_I[-1] if prep.p == 1.0 else top_I[-1] ** prep.p
        return r + BOUND_EPS * (1.0 + abs(r))

    # 4) descarte por cota y resolución feature a feature por bloques
    done = np.zeros(n, dtype=bool)
    done[seeds] = True
    rest = cand[~done[cand]]
    limit = _reject()
    rest = rest[bound[rest] <= limit]
    rest = rest[np.argsort(bound[rest], kind="stable")]
    pruned = [int(cand.size - seeds.size - rest.size)]
    for start in range(0, rest.size, int(cfg["chunk"])):
        limit = _reject()
        block = rest[start:start + int(cfg["chunk"])]
        block = block[bound[block] <= limit]
        if block.size == 0:
            break
        acc = np.zeros(block.size)
        pop_done = np.zeros(block.size)
        unpop_left = F - pop_count[block]
        alive = np.ones(block.size, dtype=bool)
        for jj in range(F):
            live = np.flatnonzero(alive)
            if live.size == 0:
                break
            b = block[live]
            t = _term(prep, jj, snapshot.X[b, prep.idx[jj]])
            acc[live] += t
            popj = populated[b, jj]
            pop_done[live] += np.where(popj, t, 0.0)
            unpop_left[live] -= ~popj
            lb = acc[live] + np.maximum(partial[b] - pop_done[live], 0.0) + cum_min[unpop_left[live]]
            alive[live] = lb <= limit
        pruned.append(int((~alive).sum()))
        survivors = block[alive]
        if survivors.size:
            merged_rows = np.concatenate([top_rows, survivors])
            merged_I = np.concatenate([top_I, exact_surprisals(snapshot, prep, survivors)])
            top_rows, top_I = _order(merged_I, merged_rows, prep.ranks)
            top_rows, top_I = top_rows[:k_upper], top_I[:k_upper]

    if verify:
        _verify_pruning(snapshot, prep, top_rows, top_I)
    _tls.previous = (snapshot.snapshot_id, tuple(prep.idx), top_rows.copy())
    logger.debug("find_nearest_cases: %d candidatos, %d descartados", cand.size, sum(pruned))
    return top_rows, top_I


def _verify_pruning(snapshot, prep, top_rows, top_I):
    """Instrumentación: ningún caso descartado podía entrar en la cola final."""
    rows, I = naive_nearest(snapshot, prep, len(top_rows))
    if not np.allclose(np.sort(I), np.sort(top_I), atol=1e-9):
        raise AssertionError("Poda no exacta: la ruta rápida difiere del recorrido completo")


# ==========================================
# 4. CASOS INFLUYENTES (ANCHO DE BANDA DINÁMICO)
# ==========================================
def _probabilities(I, w):
    """P = e^(−w·I) y pesos normalizados calculados en espacio log."""
    logp = -w * I
    P = np.exp(logp)
    shifted = np.exp(logp - logp.max()) if logp.size else logp
    total = shifted.sum()
    weights = shifted / total if total > 0 else np.full(I.size, 1.0 / max(I.size, 1))
    return P, weights


def bandwidth_size(I, w, threshold, k_min=1, k_max=None, k_fixed=None, complete=True):
    """
    Tamaño del conjunto influyente sobre candidatos ya ordenados por surprisal.
    Devuelve None si hace falta ver más candidatos para decidir.
    """
    m = I.size
    cap = m if k_max is None else min(m, k_max)
    if k_fixed is not None:
        if k_fixed > m and not complete:
            return None
        return min(k_fixed, m)
    if m == 0:
        return 0
    logp = -w * I
    P = np.exp(logp - logp.max())
    cum = np.cumsum(P)
    ratio = P[1:] / cum[:-1]
    fails = np.flatnonzero(ratio < threshold) + 1
    fails = fails[fails >= k_min]
    if fails.size:
        return min(int(fails[0]), cap)
    if not complete and cap == m:
        return None
    return cap


def _neighborhood(snapshot, rows, I, empty_context=False):
    w = snapshot.weights[rows]
    P, weights = _probabilities(I, w)
    if empty_context:
        weights = w / w.sum()
    return Neighborhood(rows=rows, surprisals=I, probabilities=P, weights=weights)


def influential_cases(store, model, query, naive=False, config=None):
    """Conjunto influyente de una consulta (Query)."""
    snapshot = as_snapshot(store)
    if snapshot.n == 0:
        raise EmptyResultError("Almacén vacío")
    cfg = dict(section(config, "query"))
    cfg.update(threshold=query.threshold, k_min=query.k_min, k_max=query.k_max)
    prep = prepare(snapshot, model, query)
    cand = np.flatnonzero(prep.mask)
    if cand.size == 0:
        raise EmptyResultError("Ningún caso satisface las restricciones")

    if not prep.idx:
        rows = cand[np.argsort(prep.ranks[cand], kind="stable")]
        if query.k is not None:
            rows = rows[:query.k]
        elif query.k_max is not None:
            rows = rows[:query.k_max]
        nb = _neighborhood(snapshot, rows, np.zeros(rows.size), empty_context=True)
    else:
        k_up = max(int(cfg["prefetch"]), (query.k or 0) + 1)
        while True:
            rows, I = find_nearest_cases(snapshot, model, query, k_up, naive=naive, config=config, prep=prep)
            complete = rows.size < k_up or rows.size >= cand.size
            size = bandwidth_size(I, snapshot.weights[rows], cfg["threshold"], cfg["k_min"],
                                  cfg["k_max"], query.k, complete=complete)
            if size is not None and (size < rows.size or complete):
                break
            k_up *= 2
        nb = _neighborhood(snapshot, rows[:size], I[:size])
    return InfluenceSet(
        case_ids=snapshot.case_ids[nb.rows], rows=nb.rows, surprisals=nb.surprisals,
        probabilities=nb.probabilities, weights=nb.weights, query=query,
    )


# ==========================================
# 5. CONSULTAS EN LOTE
# ==========================================
def surprisal_matrix(snapshot, kernels, feature_idx, Q, fw=None, p=1.0, cand_rows=None):
    """Surprisal (consultas x candidatos) con la misma suma canónica."""
    X = snapshot.X if cand_rows is None else snapshot.X[cand_rows]
    S = np.zeros((Q.shape[0], X.shape[0]))
    for jj, j in enumerate(feature_idx):
        T = kernels[j].terms_matrix(Q[:, jj], X[:, j])
        if fw is not None:
            T = T * fw[jj]
        if p != 1.0:
            T = np.power(T, p)
        S = S + T
    if p != 1.0:
        S = np.power(S, 1.0 / p)
    return S


def batch_neighbors(store, model, Q, feature_idx, exclude_rows=None, fw=None, p=1.0, k=None,
                    mask=None, seed=0, config=None, kernels=None, n_jobs=1, target=None):
    """
    Conjuntos influyentes de muchas consultas con los mismos features.

    Q: (m x |F|) valores codificados; exclude_rows: fila a excluir por consulta (o -1).
    Devuelve (idx, I, W, sizes) como neighbors_from_matrix, con relleno W = 0.
    """
    snapshot = as_snapshot(store)
    cfg = section(config, "query")
    if kernels is None:
        kernels = compile_kernels(snapshot, resolve_deviations(snapshot, model, target))
    Q = np.asarray(Q, dtype=float).reshape(-1, len(feature_idx))
    m, n = Q.shape[0], snapshot.n
    ranks = snapshot.tie_ranks(seed)
    w_all = snapshot.weights
    base_mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    exclude_rows = np.full(m, -1) if exclude_rows is None else np.asarray(exclude_rows, dtype=np.int64)
    sel = np.flatnonzero(exclude_rows >= 0)

    if not feature_idx:
        # contexto vacío: todos los candidatos, pesos proporcionales a w
        order = np.flatnonzero(base_mask)
        order = order[np.argsort(ranks[order], kind="stable")]
        idx = np.broadcast_to(order, (m, order.size)).copy()
        keep = np.ones(idx.shape, dtype=bool)
        keep[sel] = idx[sel] != exclude_rows[sel, None]
        if k is not None:
            keep &= np.cumsum(keep, axis=1) <= k
        W = np.where(keep, w_all[idx], 0.0)
        tot = W.sum(axis=1, keepdims=True)
        W = np.divide(W, tot, out=np.zeros_like(W), where=tot > 0)
        return idx, np.zeros(idx.shape), W, keep.sum(axis=1)

    step = max(1, int(4_000_000 // max(n, 1)))

    def _run(lo, hi):
        S = surprisal_matrix(snapshot, kernels, feature_idx, Q[lo:hi], fw, p)
        S[:, ~base_mask] = np.inf
        local = sel[(sel >= lo) & (sel < hi)]
        S[local - lo, exclude_rows[local]] = np.inf
        return neighbors_from_matrix(S, w_all, ranks, cfg["threshold"], cfg["k_min"], cfg["k_max"],
                                     k, int(cfg["prefetch"]))

    spans = [(lo, min(m, lo + step)) for lo in range(0, m, step)]
    if n_jobs and n_jobs != 1 and len(spans) > 1:
        parts = Parallel(n_jobs=n_jobs, backend="threading")(delayed(_run)(lo, hi) for lo, hi in spans)
    else:
        parts = [_run(lo, hi) for lo, hi in spans]
    if len(parts) == 1:
        return parts[0]
    width = max(part[0].shape[1] for part in parts)

    def _pad(a, fill):
        extra = width - a.shape[1]
        return a if extra == 0 else np.pad(a, ((0, 0), (0, extra)), constant_values=fill)

    idx = np.vstack([_pad(part[0], 0) for part in parts])
    I = np.vstack([_pad(part[1], np.inf) for part in parts])
    W = np.vstack([_pad(part[2], 0.0) for part in parts])
    sizes = np.concatenate([part[3] for part in parts])
    return idx, I, W, sizes


# ==========================================
# 6. METAS
# ==========================================
def goal_scores(snapshot, rows, goals, deviations=None):
    total = np.zeros(len(rows))
    for g in goals:
        j = snapshot.index_of(g.feature)
        nominal = snapshot.features[j].kind == "nominal"
        goal = g
        if g.direction == "approach" and g.value is not None:
            goal = Goal(g.feature, g.direction, snapshot.encode(j, g.value) if nominal else float(g.value))
        s = goal.score(snapshot.X[rows, j], nominal=nominal)
        scale = 1.0
        if deviations is not None and len(goals) > 1 and not nominal:
            scale = deviations.continuous.get(g.feature, 1.0)
        total += s / scale
    return total


def goal_cases(store, influence, goals, model=None):
    """Ids de los casos influyentes que mejor cumplen las metas (todos los empatados)."""
    snapshot = as_snapshot(store)
    if influence is None or len(influence) == 0:
        raise EmptyResultError("Conjunto influyente vacío")
    dev = resolve_deviations(snapshot, model) if model is not None else None
    scores = goal_scores(snapshot, influence.rows, goals, dev)
    best = scores.min()
    tied = np.flatnonzero(scores <= best)
    return sorted(int(influence.case_ids[t]) for t in tied)


def goal_values(store, influence, goals, model=None):
    """Valor de cada feature de meta en el caso que minimiza la función de meta."""
    snapshot = as_snapshot(store)
    ids = goal_cases(snapshot, influence, goals, model)
    rows = [snapshot.row_of(i) for i in ids]
    j0 = snapshot.index_of(goals[0].feature)
    # empate: menor valor, luego menor id
    best_row = min(rows, key=lambda r: (snapshot.X[r, j0], int(snapshot.case_ids[r])))
    out = {}
    for g in goals:
        j = snapshot.index_of(g.feature)
        out[g.feature] = snapshot.decode(j, snapshot.X[best_row, j])
    return out


def condition_on_goals(query, values):
    """Nueva consulta con los valores de meta agregados al contexto."""
    context = dict(query.context)
    context.update(values)
    return Query(
        context=context, target=query.target, k=query.k, k_min=query.k_min, k_max=query.k_max,
        threshold=query.threshold, constraints=list(query.constraints), goals=[], seed=query.seed,
        p=query.p, feature_weights=query.feature_weights, exclude=query.exclude,
        require_values=query.require_values,
    )


# ==========================================
# 7. ANCHO DE BANDA VECTORIZADO (LOTES GRANDES)
# ==========================================
def neighbors_from_matrix(S, w_all, ranks, threshold=math.exp(-3.0), k_min=1, k_max=None,
                          k_fixed=None, prefetch=64):
    """
    Aplica la regla de ancho de banda a cada fila de S (consultas x casos) a
    la vez. Devuelve (idx, I, W, sizes): índices ordenados, surprisals,
    pesos normalizados (cero fuera del conjunto) y tamaño por fila.
    """
    m, n = S.shape
    L = prefetch if k_fixed is None else max(prefetch, k_fixed + 1)
    while True:
        L = min(L, n)
        if L < n:
            part = np.argpartition(S, L - 1, axis=1)[:, :L]
        else:
            part = np.broadcast_to(np.arange(n), (m, n)).copy()
        Ssub = np.take_along_axis(S, part, axis=1)
        o = np.lexsort((ranks[part], Ssub), axis=1)
        idx = np.take_along_axis(part, o, axis=1)
        I = np.take_along_axis(Ssub, o, axis=1)
        finite = np.isfinite(I)
        n_finite = finite.sum(axis=1)
        W = w_all[idx]
        logp = np.where(finite, -W * np.where(finite, I, 0.0), -np.inf)
        top = logp[:, :1]
        top = np.where(np.isfinite(top), top, 0.0)
        P = np.exp(logp - top)
        if k_fixed is not None:
            sizes = np.minimum(k_fixed, n_finite)
            need_more = np.zeros(m, dtype=bool)
        else:
            cum = np.cumsum(P, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = P[:, 1:] / cum[:, :-1]
            fail = ~(ratio >= threshold)
            if k_min > 1:
                fail[:, :k_min - 1] = False
            any_fail = fail.any(axis=1)
            sizes = np.where(any_fail, fail.argmax(axis=1) + 1, L)
            sizes = np.minimum(sizes, n_finite)
            need_more = (~any_fail) & (L < n) & (n_finite >= L)
            if k_max is not None:
                sizes = np.minimum(sizes, k_max)
                need_more &= L < k_max
        if not need_more.any() or L >= n:
            break
        L *= 4
    keep = np.arange(idx.shape[1])[None, :] < sizes[:, None]
    P = np.where(keep, P, 0.0)
    tot = P.sum(axis=1, keepdims=True)
    Wn = np.divide(P, tot, out=np.zeros_like(P), where=tot > 0)
    return idx, I, Wn, sizes
