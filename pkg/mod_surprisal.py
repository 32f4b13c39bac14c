# -*- coding: utf-8 -*-
"""
Núcleo de surprisal: convierte diferencias entre valores en nats.

Todo es vectorizado con numpy; las funciones escalares delegan en las
vectoriales para que exista una sola definición de cada fórmula.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from errors import DomainError

logger = logging.getLogger(__name__)

# ==========================================
# 1. CONSTANTES
# ==========================================
BASELINE = 1.5          # surprisal de una diferencia nula
LN2 = math.log(2.0)
CONTINUOUS, NOMINAL, CYCLIC, ORDINAL = 0, 1, 2, 3
KIND_CODES = {"continuous": CONTINUOUS, "nominal": NOMINAL, "cyclic": CYCLIC, "ordinal": ORDINAL}


def _check_delta(delta):
    if np.any(np.asarray(delta) <= 0):
        raise DomainError("La desviación debe ser > 0")


# ==========================================
# 2. DIFERENCIAS ESPERADAS (LK)
# ==========================================
def lk_expected_difference_laplace(a, b, delta):
    """Diferencia esperada entre dos valores con incertidumbre Laplace de escala δ."""
    _check_delta(delta)
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    out = d + 0.5 * np.exp(-d / delta) * (3.0 * delta + d)
    return float(out) if np.ndim(out) == 0 else out


def lk_expected_difference_exponential(a, b, delta):
    _check_delta(delta)
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    out = d + 2.0 * delta ** 2 / (d + 2.0 * delta)
    return float(out) if np.ndim(out) == 0 else out


def cyclic_difference(a, b, period):
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), period)
    return np.minimum(d, period - d)


def surprisal_of_ratio(u):
    """u = diferencia/δ; devuelve el surprisal marginal (≥ 0)."""
    u = np.asarray(u, dtype=float)
    out = u + 0.5 * np.exp(-u) * (3.0 + u) - BASELINE
    return np.maximum(out, 0.0)


# ==========================================
# 3. SURPRISAL MARGINAL
# ==========================================
def marginal_surprisal_continuous(a, b, delta, period=None):
    _check_delta(delta)
    if period is not None:
        d = cyclic_difference(a, b, period)
    else:
        d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    out = surprisal_of_ratio(d / delta)
    return float(out) if np.ndim(out) == 0 else out


def marginal_surprisal_nominal(observed_class, candidate_class, row):
    """
    row: probabilidades de coincidencia por clase candidata; la clave
    "_default" cubre las clases sin entrada explícita.
    """
    if not row:
        raise DomainError("Fila de desviación nominal vacía")
    probs = {k: v for k, v in row.items() if k != "_default"}
    default = row.get("_default")
    p = probs.get(candidate_class, default)
    if p is None:
        raise DomainError(f"Clase '{candidate_class}' sin entrada ni bucket por defecto")
    candidates = list(probs.values()) + ([default] if default is not None else [])
    if any(x <= 0 or x > 1 for x in candidates):
        raise DomainError("Probabilidades nominales fuera de (0, 1]")
    return max(0.0, -math.log(p) + math.log(max(candidates)))


def surprisal_of_probability(p):
    if p <= 0 or p > 1:
        raise DomainError("La probabilidad debe estar en (0, 1]")
    return -math.log(p)


def probability_of_surprisal(nats):
    return math.exp(-nats)


def to_bits(nats):
    return nats / LN2


def case_probability(surprisal, weight=1.0):
    s = np.asarray(surprisal, dtype=float)
    w = np.asarray(weight, dtype=float)
    if np.any(s < 0) or np.any(w <= 0):
        raise DomainError("case_probability requiere I ≥ 0 y w > 0")
    out = np.exp(-w * s)
    return float(out) if np.ndim(out) == 0 else out


# ==========================================
# 4. DESVIACIONES
# ==========================================
@dataclass
class NominalDeviation:
    """δ de desacierto por defecto más pares dispersos (clase observada, candidata)."""
    delta: float
    n_classes: int
    pairs: dict = field(default_factory=dict)

    def probabilities(self):
        K = max(self.n_classes, 1) + 1                  # + ranura de clase no vista
        delta = min(max(self.delta, 1e-12), (K - 1) / K)
        P = np.full((K, K), delta / (K - 1))
        np.fill_diagonal(P, 1.0 - delta)
        for (a, c), p in self.pairs.items():
            if a < K and c < K and a != c:
                P[a, c] = min(max(p, 1e-12), P[a, a])
        return P

    def table(self):
        P = self.probabilities()
        S = -np.log(P)
        S -= S.min(axis=1, keepdims=True)
        np.fill_diagonal(S, 0.0)
        return np.maximum(S, 0.0)


@dataclass
class NullDeviation:
    p_null_value: float       # masa de desacierto del estado NULL
    p_null_null: float        # masa de acierto del estado NULL

    def surprisals(self):
        pnv = min(max(self.p_null_value, 1e-12), 0.5)
        pnn = max(self.p_null_null, pnv)
        return math.log(pnn / pnv), 0.0


@dataclass
class DeviationSpec:
    continuous: dict = field(default_factory=dict)
    nominal: dict = field(default_factory=dict)
    null: dict = field(default_factory=dict)
    floors: dict = field(default_factory=dict)

    def delta(self, name):
        if name in self.continuous:
            return self.continuous[name]
        if name in self.nominal:
            return self.nominal[name].delta
        raise DomainError(f"Sin desviación para {name}")

    def at_floor(self, name):
        return name in self.floors and self.delta(name) <= self.floors[name] * (1 + 1e-9)

    def to_dict(self):
        return {
            "continuous": dict(self.continuous),
            "nominal": {k: {"delta": v.delta, "n_classes": v.n_classes,
                            "pairs": [[a, c, p] for (a, c), p in sorted(v.pairs.items())]}
                        for k, v in self.nominal.items()},
            "null": {k: {"p_null_value": v.p_null_value, "p_null_null": v.p_null_null} for k, v in self.null.items()},
            "floors": dict(self.floors),
        }


def deviation_floor(min_gap, min_floor=1e-12, factor=1e-6):
    return max(min_floor, min_gap * factor)


# ==========================================
# 5. KERNELS VECTORIZADOS POR FEATURE
# ==========================================
@dataclass
class FeatureKernel:
    name: str
    kind: int
    delta: object = 1.0          # escalar o vector alineado con los candidatos
    period: float = None
    table: np.ndarray = None     # surprisal nominal (K+1)x(K+1)
    s_null_value: float = 0.0
    s_null_null: float = 0.0

    def with_delta(self, delta):
        return FeatureKernel(self.name, self.kind, delta, self.period, self.table,
                             self.s_null_value, self.s_null_null)

    def terms(self, qv, col):
        """Surprisal de cada valor de col dado el valor de consulta qv (escalar)."""
        col = np.asarray(col, dtype=float)
        cnull = np.isnan(col)
        if np.isnan(qv):
            return np.where(cnull, self.s_null_null, self.s_null_value)
        if self.kind == NOMINAL:
            K = self.table.shape[0] - 1
            qa = min(int(qv), K)
            codes = np.where(cnull, 0, np.minimum(np.nan_to_num(col), K)).astype(np.int64)
            out = self.table[qa, codes]
        else:
            if self.kind == CYCLIC:
                d = cyclic_difference(col, qv, self.period)
            else:
                d = np.abs(col - qv)
            with np.errstate(invalid="ignore"):
                out = surprisal_of_ratio(np.nan_to_num(d) / self.delta)
        return np.where(cnull, self.s_null_value, out)

    def terms_matrix(self, qcol, col):
        """Matriz (consultas x candidatos)."""
        qcol = np.asarray(qcol, dtype=float)
        col = np.asarray(col, dtype=float)
        if self.kind == NOMINAL:
            K = self.table.shape[0] - 1
            qa = np.where(np.isnan(qcol), 0, np.minimum(np.nan_to_num(qcol), K)).astype(np.int64)
            ca = np.where(np.isnan(col), 0, np.minimum(np.nan_to_num(col), K)).astype(np.int64)
            out = self.table[qa[:, None], ca[None, :]]
        else:
            if self.kind == CYCLIC:
                d = cyclic_difference(qcol[:, None], col[None, :], self.period)
            else:
                d = np.abs(qcol[:, None] - col[None, :])
            out = surprisal_of_ratio(np.nan_to_num(d) / self.delta)
        qn = np.isnan(qcol)[:, None]
        cn = np.isnan(col)[None, :]
        out = np.where(qn & cn, self.s_null_null, out)
        out = np.where(qn ^ cn, self.s_null_value, out)
        return out

    def lower_bound_outside(self, radius):
        """Surprisal mínimo de un valor fuera de `radius` alrededor de la consulta."""
        if self.kind == NOMINAL:
            off = self.table[~np.eye(self.table.shape[0], dtype=bool)]
            base = float(off.min()) if off.size else 0.0
        else:
            base = float(np.min(surprisal_of_ratio(radius / np.asarray(self.delta))))
        return min(base, self.s_null_value)


def compile_kernels(snapshot, deviations):
    kernels = []
    for j, a in enumerate(snapshot.features):
        s_nv, s_nn = 0.0, 0.0
        if a.name in deviations.null:
            s_nv, s_nn = deviations.null[a.name].surprisals()
        if a.kind == "nominal":
            nd = deviations.nominal.get(a.name) or NominalDeviation(0.5, snapshot.n_classes(j))
            nd = NominalDeviation(nd.delta, max(nd.n_classes, snapshot.n_classes(j)), nd.pairs)
            kernels.append(FeatureKernel(a.name, NOMINAL, nd.delta, None, nd.table(), s_nv, s_nn))
        else:
            delta = deviations.continuous.get(a.name, 1.0)
            kernels.append(FeatureKernel(a.name, KIND_CODES[a.kind], delta, a.cycle_period, None, s_nv, s_nn))
    return kernels


# ==========================================
# 6. SURPRISAL DE CASO
# ==========================================
def combine(terms, q=None, p=1.0):
    """terms: (..., |F|). Suma q-ponderada o combinación de Lebesgue."""
    terms = np.asarray(terms, dtype=float)
    if q is not None:
        terms = terms * np.asarray(q, dtype=float)
    if p == 1.0:
        return terms.sum(axis=-1)
    return np.power(np.power(terms, p).sum(axis=-1), 1.0 / p)


def case_surprisal(query, candidate, kernels, q=None, p=1.0):
    """
    query, candidate: vectores codificados alineados con `kernels`
    (ya restringidos a los features del contexto).
    """
    if len(kernels) == 0:
        raise DomainError("Contexto vacío")
    if p not in (0.1, 0.5, 1.0, 2.0):
        raise DomainError(f"p={p} no soportado")
    t = np.array([k.terms(float(qv), np.array([cv]))[0] for k, qv, cv in zip(kernels, query, candidate)])
    return float(combine(t, q, p))


# ==========================================
# 7. DESVIACIONES INICIALES
# ==========================================
def initial_deviations(snapshot, overrides=None, min_floor=1e-12, gap_factor=1e-6):
    """Menor brecha para continuos; variante de la regla de Laplace para nominales y NULL."""
    dev = DeviationSpec()
    n = max(snapshot.n, 1)
    laplace = 1.0 / (n + 0.5)
    for j, a in enumerate(snapshot.features):
        st = snapshot.column_stats(j)
        if a.kind == "nominal":
            dev.nominal[a.name] = NominalDeviation(laplace, snapshot.n_classes(j))
            dev.floors[a.name] = min_floor
        else:
            floor = deviation_floor(st["min_gap"], min_floor, gap_factor)
            gap = st["min_gap"] if st["min_gap"] > 0 else floor
            if a.kind == "ordinal":
                gap = 1.0 if st["distinct"] > 1 else floor
            dev.continuous[a.name] = max(gap, floor)
            dev.floors[a.name] = floor
        dev.null[a.name] = NullDeviation(laplace, 1.0 - laplace)
    for name, value in (overrides or {}).items():
        if name in dev.nominal:
            dev.nominal[name].delta = float(value)
        elif name in dev.continuous:
            dev.continuous[name] = max(float(value), dev.floors[name])
    return dev
