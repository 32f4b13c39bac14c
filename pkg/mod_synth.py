# -*- coding: utf-8 -*-
"""
Síntesis de datos: generación encadenada en orden aleatorio de features,
mecanismos diferencialmente privados y auditoría de preservación de anonimato.
"""
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import special, stats

from config import section
from errors import BudgetError, DomainError, EmptyResultError
from mod_data import as_snapshot, decode_value, is_null
from mod_query import Query, influential_cases, resolve_deviations
from mod_react import nominal_branch, predict_influence, query_for, react_generative
from mod_surprisal import compile_kernels

logger = logging.getLogger(__name__)

_LEDGER_LOCK = threading.Lock()


# ==========================================
# 1. CONFIGURACIÓN
# ==========================================
@dataclass
class SynthConfig:
    mode: str = "conviction"        # "conviction" | "dp"
    conviction: float = 1.0
    epsilon: float = None           # presupuesto por elemento en modo dp
    dp_variant: str = "aggregate"   # "aggregate" | "case"
    anonymity: str = "off"          # "off" | "min" | "max"
    ap_threshold: float = 1.0
    retries: int = 16
    seed: int = 0
    override_budget: bool = False

    def __post_init__(self):
        if self.mode not in ("conviction", "dp"):
            raise DomainError(f"Modo de síntesis desconocido: {self.mode}")
        if self.mode == "dp" and not (self.epsilon is not None and self.epsilon > 0):
            raise DomainError("ε debe ser > 0 en modo dp")
        if self.mode == "conviction" and not self.conviction > 0:
            raise DomainError("La convicción debe ser > 0")
        if self.anonymity not in ("off", "min", "max"):
            raise DomainError(f"Chequeo de anonimato desconocido: {self.anonymity}")
        if self.dp_variant not in ("aggregate", "case"):
            raise DomainError(f"Variante dp desconocida: {self.dp_variant}")
        if self.retries < 0:
            raise DomainError("retries debe ser ≥ 0")

    @classmethod
    def from_config(cls, config=None, **kwargs):
        cfg = section(config, "synth")
        kwargs.setdefault("retries", int(cfg["retries"]))
        kwargs.setdefault("anonymity", cfg["anonymity"])
        kwargs.setdefault("ap_threshold", float(cfg["ap_threshold"]))
        return cls(**kwargs)


# ==========================================
# 2. MECANISMOS DIFERENCIALMENTE PRIVADOS
# ==========================================
def dp_sensitivity(snapshot, influence, j, sensitivity=None):
    """
    Δ = max(rango / |conjunto|, mayor brecha entre valores consecutivos del
    conjunto, sensibilidad pedida). Devuelve (Δ, rango declarado?).
    """
    col = snapshot.X[influence.rows, j]
    vals = np.sort(col[~np.isnan(col)])
    if vals.size == 0:
        raise EmptyResultError(f"{snapshot.features[j].name}: conjunto influyente sin valores")
    span, declared = snapshot.value_range(j)
    gap = float(np.diff(vals).max()) if vals.size > 1 else 0.0
    delta = max(span / vals.size, gap, float(sensitivity or 0.0))
    return delta, declared


def dp_generate_continuous(store, influence, feature, epsilon, rng=None, sensitivity=None, variant="aggregate",
                           size=None):
    """
    Mecanismo de Laplace: centro = media ponderada del conjunto influyente
    ("aggregate") o un caso sorteado por su peso ("case"); escala Δ/ε.
    """
    if not (epsilon is not None and epsilon > 0):
        raise DomainError("ε debe ser > 0")
    snapshot = as_snapshot(store)
    j = snapshot.index_of(feature)
    a = snapshot.features[j]
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(influence) == 0:
        raise EmptyResultError("Conjunto influyente vacío")
    delta, _ = dp_sensitivity(snapshot, influence, j, sensitivity)
    col = snapshot.X[influence.rows, j]
    ok = ~np.isnan(col)
    p = influence.weights[ok] / influence.weights[ok].sum()
    if variant == "case":
        center = rng.choice(col[ok], p=p, size=size)
    else:
        center = float(np.sum(p * col[ok]))
    x = rng.laplace(center, delta / epsilon, size=size)
    if a.kind == "cyclic":
        x = np.mod(x, a.cycle_period)
    if a.bounds is not None:
        x = np.clip(x, a.bounds[0], a.bounds[1])
    if a.kind == "ordinal":
        x = np.clip(np.floor(x + 0.5), 0, len(a.ordinal_ranks) - 1)
    return x if size is not None else float(x)


def dp_escape(epsilon):
    """b = 1 − e^ε/(1+e^ε)."""
    return float(special.expit(-epsilon))


def dp_generate_nominal(store, influence, feature, epsilon, rng=None):
    """Selección nominal en tres ramas con umbrales e^ε/(1+e^ε). Devuelve (código, rama)."""
    if not (epsilon is not None and epsilon > 0):
        raise DomainError("ε debe ser > 0")
    snapshot = as_snapshot(store)
    j = snapshot.index_of(feature)
    rng = rng if rng is not None else np.random.default_rng(0)
    _, _, mass = predict_influence(snapshot, influence, j)
    return nominal_branch(snapshot, j, mass, dp_escape(epsilon), rng)


# ==========================================
# 3. PRESERVACIÓN DE ANONIMATO
# ==========================================
def anonymity_preservation(store, model, case_values, config=None):
    """
    AP_min y AP_max: surprisal del caso sintético a sus casos influyentes
    sobre el surprisal no nulo entre pares de esos casos. Sin pares no nulos
    el cociente queda indefinido y se marca.
    """
    snapshot = as_snapshot(store)
    context = {k: v for k, v in case_values.items() if not is_null(v)}
    infl = influential_cases(snapshot, model, Query.from_config(config, context=context), config=config)
    if len(infl) == 0:
        raise EmptyResultError("Conjunto influyente vacío")
    feat = snapshot.indices(list(context))
    kernels = compile_kernels(snapshot, resolve_deviations(snapshot, model))
    Q = snapshot.X[infl.rows]
    S = np.zeros((len(infl), len(infl)))
    for j in feat:
        S += kernels[j].terms_matrix(Q[:, j], Q[:, j])
    pair = S[~np.eye(len(infl), dtype=bool)]
    pair = pair[pair > 0]
    num_min = float(infl.surprisals.min())
    num_max = float(infl.surprisals.max())
    if pair.size == 0:
        return {"ap_min": math.nan, "ap_max": math.nan, "flagged": True}
    return {"ap_min": num_min / float(pair.min()), "ap_max": num_max / float(pair.max()), "flagged": False}


# ==========================================
# 4. PRESUPUESTO
# ==========================================
def _spend_budget(store, synth, n_cases):
    """Registro de un solo uso por snapshot; un segundo gasto requiere override."""
    sid = store.snapshot.snapshot_id
    with _LEDGER_LOCK:
        ledger = store.metadata.setdefault("budget_ledger", {})
        if sid in ledger and not synth.override_budget:
            raise BudgetError(f"El presupuesto de privacidad del snapshot {sid} ya fue gastado")
        entry = {"epsilon": synth.epsilon, "n_cases": int(n_cases), "variant": synth.dp_variant}
        if sid in ledger:
            entry["override"] = True
            entry["previous"] = ledger[sid]
        ledger[sid] = entry
    logger.info("presupuesto dp gastado sobre %s (ε=%s)", sid, synth.epsilon)
    return dict(ledger)


# ==========================================
# 5. SÍNTESIS DE CASOS
# ==========================================
def _draw_feature(snapshot, model, values, name, synth, rng, config, branches):
    j = snapshot.index_of(name)
    a = snapshot.features[j]
    context = {k: v for k, v in values.items() if v is not None}
    query = Query.from_config(config, context=context)
    if synth.mode == "conviction":
        res = react_generative(snapshot, model, query, [name], conviction=synth.conviction,
                               seed=int(rng.integers(2 ** 31)), details={"branches"}, config=config)
        for b in res.details.get("branches", {}).values():
            branches[b] += 1
        return res.values[name]
    infl = influential_cases(snapshot, model, query_for(model, query, name, config=config), config=config)
    if len(infl) == 0:
        raise EmptyResultError(f"Conjunto influyente vacío para {name}")
    if np.all(np.isnan(snapshot.X[infl.rows, j])):
        return None
    if a.kind == "nominal":
        code, branch = dp_generate_nominal(snapshot, infl, name, synth.epsilon, rng)
        branches[branch] += 1
    else:
        code = dp_generate_continuous(snapshot, infl, name, synth.epsilon, rng, variant=synth.dp_variant)
    return decode_value(a, snapshot.tables[j], code)


def _synthesize_case(snapshot, model, i, synth, config):
    rng = np.random.default_rng([int(synth.seed) & 0xFFFFFFFF, i])
    branches = Counter()
    names = snapshot.names
    audit = None
    for attempt in range(synth.retries + 1):
        values = {}
        for j in rng.permutation(len(names)):
            values[names[j]] = _draw_feature(snapshot, model, values, names[j], synth, rng, config, branches)
        if synth.anonymity == "off":
            return {"index": i, "values": values, "attempts": attempt + 1, "branches": branches, "audit": None}
        audit = anonymity_preservation(snapshot, model, values, config)
        ratio = audit["ap_min"] if synth.anonymity == "min" else audit["ap_max"]
        if audit["flagged"] or ratio >= synth.ap_threshold:
            return {"index": i, "values": values, "attempts": attempt + 1, "branches": branches, "audit": audit}
        logger.debug("caso %d rechazado por anonimato (%.4g < %.4g)", i, ratio, synth.ap_threshold)
    return {"index": i, "values": None, "attempts": synth.retries + 1, "branches": branches, "audit": audit}


def synthesize_dataset(store, model, n_cases, synth=None, config=None, n_jobs=1):
    """
    Genera n_cases casos sintéticos. Devuelve (DataFrame, reporte) con los
    cocientes de anonimato por caso, conteo de ramas y el registro de presupuesto.
    """
    synth = synth or SynthConfig.from_config(config)
    if n_cases is None or int(n_cases) < 0:
        raise DomainError("n_cases debe ser ≥ 0")
    n_cases = int(n_cases)
    snapshot = as_snapshot(store)
    report = {
        "n_requested": n_cases, "mode": synth.mode, "seed": synth.seed, "anonymity": synth.anonymity,
        "ap_threshold": synth.ap_threshold, "dropped": [], "cases": [], "branches": {},
    }
    if synth.mode == "dp":
        if not hasattr(store, "metadata"):
            raise DomainError("El modo dp requiere un CaseStore con registro de presupuesto")
        report["budget_ledger"] = _spend_budget(store, synth, n_cases)
        report["sensitivity"] = {a.name: ("declared" if snapshot.value_range(j)[1] else "observed")
                                 for j, a in enumerate(snapshot.features) if a.kind != "nominal"}
    if n_cases == 0 or snapshot.n == 0:
        report["n_emitted"] = 0
        return pd.DataFrame(columns=snapshot.names), report

    if n_jobs and n_jobs != 1:
        results = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_synthesize_case)(snapshot, model, i, synth, config) for i in range(n_cases))
    else:
        results = [_synthesize_case(snapshot, model, i, synth, config) for i in range(n_cases)]

    rows, branches, ratios = [], Counter(), []
    for r in results:
        branches.update(r["branches"])
        entry = {"index": r["index"], "attempts": r["attempts"]}
        if r["audit"] is not None:
            entry.update(r["audit"])
        if r["values"] is None:
            report["dropped"].append(entry)
            continue
        rows.append(r["values"])
        report["cases"].append(entry)
        if r["audit"] is not None and not r["audit"]["flagged"]:
            ratios.append(r["audit"]["ap_min"])
    report["branches"] = dict(branches)
    report["n_emitted"] = len(rows)
    if ratios:
        ratios = np.asarray(ratios)
        report["ap_min_of_min"] = float(ratios.min())
        positive = ratios[ratios > 0]
        report["ap_geometric_mean"] = float(stats.gmean(positive)) if positive.size else 0.0
    if report["dropped"]:
        logger.warning("síntesis: %d casos descartados tras %d reintentos", len(report["dropped"]),
                       synth.retries)
    logger.info("síntesis: %d/%d casos emitidos", len(rows), n_cases)
    return pd.DataFrame(rows, columns=snapshot.names), report
