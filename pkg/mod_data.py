# -*- coding: utf-8 -*-
"""
Esquema, almacenamiento de casos, procedencia e ingesta.

Los valores se guardan por columnas en una matriz float64 (NaN = NULL):
continuos y cíclicos tal cual, ordinales como índice de rango, nominales como
código de la tabla interna de la columna. Cada escritura publica una nueva
instantánea inmutable; las consultas trabajan siempre sobre una instantánea.
"""
import fcntl
import hashlib
import json
import logging
import math
import os
import threading
import uuid
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone

import joblib
import networkx as nx
import numpy as np
import pandas as pd

from config import ENGINE_VERSION, section
from errors import SchemaError, NotFoundError, DomainError

logger = logging.getLogger(__name__)

# ==========================================
# 1. CONSTANTES
# ==========================================
KINDS = ("continuous", "nominal", "ordinal", "cyclic")
TIME_FORMATS = ["%Y-%m-%d", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%d/%m/%Y", "%Y/%m/%d"]
STORE_FORMAT = 1


def is_null(v):
    if v is None or v is pd.NA or v is pd.NaT:
        return True
    if isinstance(v, str):
        return v.strip() == ""
    try:
        return bool(isinstance(v, (float, np.floating)) and math.isnan(v))
    except TypeError:
        return False


# ==========================================
# 2. TIPOS DE DOMINIO
# ==========================================
@dataclass
class FeatureAttribute:
    name: str
    kind: str = "continuous"
    cycle_period: float = None
    bounds: tuple = None
    ordinal_ranks: list = None
    allows_null: bool = False
    is_time: bool = False
    dependent_on: list = field(default_factory=list)
    domain: list = None
    time_format: str = None

    def validate(self):
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: tipo desconocido '{self.kind}'")
        if self.kind == "cyclic" and not (self.cycle_period and self.cycle_period > 0):
            raise SchemaError(f"{self.name}: cycle_period debe ser > 0")
        if self.bounds is not None:
            lo, hi = self.bounds
            if lo > hi:
                raise SchemaError(f"{self.name}: bounds.min > bounds.max")
        if self.kind == "ordinal":
            if not self.ordinal_ranks:
                raise SchemaError(f"{self.name}: ordinal sin ordinal_ranks")
            if len(set(map(str, self.ordinal_ranks))) != len(self.ordinal_ranks):
                raise SchemaError(f"{self.name}: ordinal_ranks repetidos")
        return self

    @property
    def numeric(self):
        return self.kind in ("continuous", "cyclic", "ordinal")

    def to_dict(self):
        d = asdict(self)
        if d["bounds"] is not None:
            d["bounds"] = list(d["bounds"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("bounds") is not None:
            d["bounds"] = tuple(float(b) for b in d["bounds"])
        d["dependent_on"] = list(d.get("dependent_on") or [])
        return cls(**d).validate()


@dataclass
class Case:
    values: dict
    weight: float = 1.0
    provenance: tuple = None


@dataclass(frozen=True)
class Snapshot:
    """Vista inmutable del almacén; todo lo que consulta parte de aquí."""
    features: tuple
    X: np.ndarray
    weights: np.ndarray
    case_ids: np.ndarray
    sessions: tuple
    train_index: np.ndarray
    tables: tuple
    snapshot_id: str
    cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def f(self):
        return self.X.shape[1]

    @property
    def names(self):
        return [a.name for a in self.features]

    @property
    def total_mass(self):
        return math.fsum(self.weights.tolist())

    def index_of(self, name):
        for j, a in enumerate(self.features):
            if a.name == name:
                return j
        raise DomainError(f"Feature desconocido: {name}")

    def indices(self, names):
        return [self.index_of(n) for n in names]

    def row_of(self, case_id):
        lookup = self.cache.get("rows")
        if lookup is None:
            lookup = {int(c): i for i, c in enumerate(self.case_ids)}
            self.cache["rows"] = lookup
        try:
            return lookup[int(case_id)]
        except KeyError:
            raise NotFoundError(f"Caso {case_id} no existe")

    def encode(self, j, value):
        return encode_value(self.features[j], self.tables[j], value, grow=False)

    def decode(self, j, code):
        return decode_value(self.features[j], self.tables[j], code)

    def encode_context(self, context):
        """dict nombre->valor a (índices, vector codificado)."""
        idx = self.indices(list(context))
        vals = np.array([self.encode(j, context[self.features[j].name]) for j in idx], dtype=float)
        return idx, vals

    def column_stats(self, j):
        key = ("stats", j)
        hit = self.cache.get(key)
        if hit is None:
            col = self.X[:, j]
            col = col[~np.isnan(col)]
            if col.size:
                uniq = np.unique(col)
                gaps = np.diff(uniq)
                hit = {
                    "min": float(uniq[0]), "max": float(uniq[-1]),
                    "min_gap": float(gaps.min()) if gaps.size else 0.0,
                    "max_gap": float(gaps.max()) if gaps.size else 0.0,
                    "distinct": int(uniq.size),
                }
            else:
                hit = {"min": 0.0, "max": 0.0, "min_gap": 0.0, "max_gap": 0.0, "distinct": 0}
            self.cache[key] = hit
        return hit

    def value_range(self, j):
        a = self.features[j]
        if a.bounds is not None:
            return float(a.bounds[1] - a.bounds[0]), True
        st = self.column_stats(j)
        return st["max"] - st["min"], False

    def n_classes(self, j):
        a = self.features[j]
        if a.kind == "ordinal":
            return len(a.ordinal_ranks)
        return len(self.tables[j])

    def tie_ranks(self, seed):
        """Permutación sembrada que desempata distancias iguales."""
        key = ("ranks", seed)
        hit = self.cache.get(key)
        if hit is None:
            rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, self.n])
            hit = rng.permutation(self.n).astype(np.int64)
            self.cache[key] = hit
        return hit

    def to_frame(self, as_text=False):
        data = {}
        for j, a in enumerate(self.features):
            data[a.name] = [decode_value(a, self.tables[j], v, as_text=as_text) for v in self.X[:, j]]
        df = pd.DataFrame(data)
        df.insert(0, "_id", self.case_ids)
        df["_weight"] = self.weights
        return df


def as_snapshot(obj):
    return obj.snapshot if isinstance(obj, CaseStore) else obj


# ==========================================
# 3. CODIFICACIÓN DE VALORES
# ==========================================
def _same_symbol(a, b):
    return a == b or str(a) == str(b)


def _parse_time(value, fmt):
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    try:
        dt = datetime.strptime(str(value).strip(), fmt)
    except ValueError:
        raise SchemaError(f"Fecha '{value}' no coincide con el formato {fmt}")
    return dt.replace(tzinfo=timezone.utc).timestamp()


def encode_value(attr, table, value, grow=True):
    if is_null(value):
        if not attr.allows_null:
            raise SchemaError(f"{attr.name}: NULL no permitido")
        return np.nan
    if attr.kind == "nominal":
        for code, sym in enumerate(table):
            if _same_symbol(sym, value):
                return float(code)
        if attr.domain is not None:
            raise SchemaError(f"{attr.name}: '{value}' fuera del dominio declarado")
        if not grow:
            return float(len(table))   # clase no vista
        table.append(value)
        return float(len(table) - 1)
    if attr.kind == "ordinal":
        for rank, sym in enumerate(attr.ordinal_ranks):
            if _same_symbol(sym, value):
                return float(rank)
        raise SchemaError(f"{attr.name}: símbolo ordinal '{value}' desconocido")
    if attr.time_format:
        x = _parse_time(value, attr.time_format)
    else:
        try:
            x = float(value)
        except (TypeError, ValueError):
            raise SchemaError(f"{attr.name}: '{value}' no es numérico")
    if not math.isfinite(x):
        raise SchemaError(f"{attr.name}: valor no finito")
    if attr.kind == "cyclic":
        x = math.fmod(x, attr.cycle_period)
        if x < 0:
            x += attr.cycle_period
    if attr.bounds is not None and not (attr.bounds[0] <= x <= attr.bounds[1]):
        raise SchemaError(f"{attr.name}: {value} fuera de [{attr.bounds[0]}, {attr.bounds[1]}]")
    return x


def decode_value(attr, table, code, as_text=False):
    if code is None or (isinstance(code, float) and math.isnan(code)):
        return None
    if attr.kind == "nominal":
        c = int(code)
        return table[c] if c < len(table) else None
    if attr.kind == "ordinal":
        return attr.ordinal_ranks[int(round(code))]
    if as_text and attr.time_format:
        return datetime.fromtimestamp(float(code), tz=timezone.utc).strftime(attr.time_format)
    return float(code)


# ==========================================
# 4. INFERENCIA DE ATRIBUTOS
# ==========================================
def _guess_time_format(values):
    for fmt in TIME_FORMATS:
        try:
            parsed = pd.to_datetime(pd.Series(values), format=fmt)
            return fmt, parsed
        except (ValueError, TypeError):
            continue
    return None, None


def infer_feature_attributes(table, config=None):
    """Asigna un tipo a cada columna de una tabla cruda (DataFrame o lista de filas)."""
    cfg = section(config, "data")
    if isinstance(table, pd.DataFrame):
        df = table
    else:
        rows = list(table)
        if not rows:
            raise SchemaError("Tabla vacía")
        if isinstance(rows[0], dict):
            keys = list(rows[0])
            if any(set(r) != set(keys) for r in rows):
                raise SchemaError("Filas con columnas distintas")
            df = pd.DataFrame(rows, columns=keys)
        else:
            width = len(rows[0])
            if any(len(r) != width for r in rows):
                raise SchemaError("Filas de longitud irregular")
            df = pd.DataFrame(rows, columns=[f"f{i}" for i in range(width)])
    if df.shape[0] == 0 or df.shape[1] == 0:
        raise SchemaError("Tabla vacía")

    total = df.shape[0]
    attrs = []
    for col in df.columns:
        raw = df[col].tolist()
        present = [v for v in raw if not is_null(v)]
        allows_null = len(present) < total
        if not present:
            attrs.append(FeatureAttribute(name=str(col), kind="nominal", allows_null=True))
            continue
        nums = pd.to_numeric(pd.Series(present), errors="coerce")
        if not nums.isna().any():
            distinct = int(nums.nunique())
            if distinct / total <= cfg["nominal_ratio"] and distinct <= cfg["nominal_max_distinct"]:
                attrs.append(FeatureAttribute(name=str(col), kind="nominal", allows_null=allows_null))
            else:
                attrs.append(FeatureAttribute(name=str(col), kind="continuous", allows_null=allows_null))
            continue
        fmt, parsed = _guess_time_format([str(v).strip() for v in present])
        if fmt is not None:
            monotone = bool(parsed.is_monotonic_increasing)
            attrs.append(FeatureAttribute(name=str(col), kind="continuous", allows_null=allows_null,
                                          is_time=monotone, time_format=fmt))
            continue
        attrs.append(FeatureAttribute(name=str(col), kind="nominal", allows_null=allows_null))
    logger.info("Atributos inferidos: %s", {a.name: a.kind for a in attrs})
    return attrs


def check_dependencies(features):
    names = {a.name for a in features}
    g = nx.DiGraph()
    g.add_nodes_from(names)
    for a in features:
        for d in a.dependent_on:
            if d not in names:
                raise SchemaError(f"{a.name}: dependent_on referencia '{d}' no declarado")
            g.add_edge(a.name, d)
    if not nx.is_directed_acyclic_graph(g):
        raise SchemaError("dependent_on contiene ciclos")


# ==========================================
# 5. ALMACÉN DE CASOS
# ==========================================
class CaseStore:
    """Casos ponderados con procedencia. Un escritor o muchos lectores."""

    def __init__(self, features, session=None):
        feats = [a if isinstance(a, FeatureAttribute) else FeatureAttribute.from_dict(a) for a in features]
        for a in feats:
            a.validate()
        if len({a.name for a in feats}) != len(feats):
            raise SchemaError("Nombres de feature repetidos")
        check_dependencies(feats)
        self._lock = threading.RLock()
        self.session = session or str(uuid.uuid4())
        self._features = feats
        self._tables = [list(a.domain or []) for a in feats]
        f = len(feats)
        self._X = np.empty((0, f))
        self._weights = np.empty(0)
        self._ids = np.empty(0, dtype=np.int64)
        self._sessions = []
        self._train_index = np.empty(0, dtype=np.int64)
        self._next_id = 0
        self._next_train = 0
        self.total_mass = 0.0
        self.series_config = None
        self.metadata = {"budget_ledger": {}, "verb_log": []}
        self._snapshot = None
        self._publish()

    # --- lectura ---
    @property
    def snapshot(self):
        return self._snapshot

    @property
    def features(self):
        return list(self._features)

    def __len__(self):
        return self._X.shape[0]

    # --- publicación ---
    def _publish(self):
        X = self._X.copy()
        w = self._weights.copy()
        ids = self._ids.copy()
        tix = self._train_index.copy()
        for arr in (X, w, ids, tix):
            arr.setflags(write=False)
        tables = tuple(tuple(t) for t in self._tables)
        h = hashlib.sha256()
        h.update(json.dumps([a.to_dict() for a in self._features], sort_keys=True, default=str).encode())
        h.update(repr(tables).encode())
        for arr in (X, w, ids, tix):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self._sessions).encode())
        self._snapshot = Snapshot(
            features=tuple(self._features), X=X, weights=w, case_ids=ids,
            sessions=tuple(self._sessions), train_index=tix, tables=tables,
            snapshot_id=h.hexdigest()[:16],
        )

    def _encode_row(self, values):
        if isinstance(values, Case):
            values = values.values
        if isinstance(values, (list, tuple, np.ndarray)):
            if len(values) != len(self._features):
                raise SchemaError("Número de valores distinto al de features")
            values = dict(zip([a.name for a in self._features], values))
        unknown = set(values) - {a.name for a in self._features}
        if unknown:
            raise SchemaError(f"Features desconocidos: {sorted(unknown)}")
        tables = [list(t) for t in self._tables]
        row = np.array([encode_value(a, tables[j], values.get(a.name)) for j, a in enumerate(self._features)])
        return row, tables

    def _append(self, rows, weights, ids=None, sessions=None, train_index=None):
        n = len(rows)
        if n == 0:
            return []
        if ids is None:
            ids = list(range(self._next_id, self._next_id + n))
        if sessions is None:
            sessions = [self.session] * n
        if train_index is None:
            train_index = list(range(self._next_train, self._next_train + n))
        self._X = np.vstack([self._X, np.asarray(rows, dtype=float).reshape(n, -1)])
        self._weights = np.concatenate([self._weights, np.asarray(weights, dtype=float)])
        self._ids = np.concatenate([self._ids, np.asarray(ids, dtype=np.int64)])
        self._sessions.extend(sessions)
        self._train_index = np.concatenate([self._train_index, np.asarray(train_index, dtype=np.int64)])
        self._next_id = max(self._next_id, int(max(ids)) + 1)
        self._next_train = max(self._next_train, int(max(train_index)) + 1)
        self.total_mass += math.fsum(float(x) for x in weights)
        return list(ids)

    def train(self, new_cases):
        """Agrega casos con peso 1; los que violan el esquema se rechazan uno a uno."""
        if isinstance(new_cases, pd.DataFrame):
            new_cases = new_cases.to_dict("records")
        accepted, rejected = [], []
        with self._lock:
            rows, weights = [], []
            for i, c in enumerate(new_cases):
                try:
                    row, tables = self._encode_row(c)
                except SchemaError as e:
                    rejected.append({"index": i, "reason": str(e)})
                    continue
                self._tables = tables
                rows.append(row)
                weights.append(c.weight if isinstance(c, Case) else 1.0)
            first_train = self._next_train
            accepted = self._append(rows, weights)
            self._publish()
        if accepted:
            self._rederive_series()
        if rejected:
            logger.warning("Train: %d casos rechazados", len(rejected))
        return {
            "accepted": accepted,
            "rejected": rejected,
            "session": self.session,
            "train_index": list(range(first_train, first_train + len(accepted))),
            "total_mass": self.total_mass,
        }

    def edit_case(self, case_id, values):
        with self._lock:
            row = self._snapshot.row_of(case_id)
            current = {a.name: decode_value(a, self._tables[j], self._X[row, j]) for j, a in enumerate(self._features)}
            current.update(values)
            new_row, tables = self._encode_row(current)
            self._tables = tables
            X = self._X.copy()
            X[row] = new_row
            self._X = X
            self._publish()
        self._rederive_series()
        return self._snapshot

    def remove_case(self, case_id):
        self.remove_cases([case_id])
        return self._snapshot

    def remove_cases(self, case_ids):
        with self._lock:
            rows = sorted({self._snapshot.row_of(c) for c in case_ids})
            removed = math.fsum(float(self._weights[r]) for r in rows)
            keep = np.ones(len(self._ids), dtype=bool)
            keep[rows] = False
            self._X = self._X[keep]
            self._weights = self._weights[keep]
            self._ids = self._ids[keep]
            self._sessions = [s for s, k in zip(self._sessions, keep) if k]
            self._train_index = self._train_index[keep]
            self.total_mass -= removed
            if len(self._ids) == 0:
                self.total_mass = 0.0
            self._publish()
        self._rederive_series()

    def add_weight(self, case_ids, amounts):
        """Suma masa a casos existentes (ablación / reducción)."""
        with self._lock:
            w = self._weights.copy()
            for cid, amt in zip(case_ids, amounts):
                w[self._snapshot.row_of(cid)] += amt
            self.total_mass += math.fsum(float(a) for a in amounts)
            self._weights = w
            self._publish()

    def set_weights(self, weights):
        weights = np.asarray(weights, dtype=float)
        if weights.shape != self._weights.shape or np.any(weights <= 0):
            raise DomainError("Pesos inválidos")
        with self._lock:
            self._weights = weights.copy()
            self.total_mass = math.fsum(weights.tolist())
            self._publish()

    def set_columns(self, attrs, columns, tables=None):
        """Agrega o reemplaza columnas completas (features derivados de series)."""
        col_tables = tables or [None] * len(attrs)
        with self._lock:
            X = self._X
            feats = list(self._features)
            tables = [list(t) for t in self._tables]
            for a, col, tab in zip(attrs, columns, col_tables):
                col = np.asarray(col, dtype=float)
                names = [x.name for x in feats]
                if a.name in names:
                    j = names.index(a.name)
                    feats[j] = a
                    X = X.copy()
                    X[:, j] = col
                    if tab is not None:
                        tables[j] = list(tab)
                else:
                    feats.append(a)
                    tables.append(list(tab or []))
                    X = np.column_stack([X, col])
            self._features = feats
            self._tables = tables
            self._X = X
            self._publish()

    def reconcile_mass(self):
        exact = math.fsum(self._weights.tolist())
        if abs(exact - self.total_mass) > 1e-9 * max(1.0, abs(exact)):
            logger.warning("total_mass desajustado: %.12g vs %.12g", self.total_mass, exact)
        self.total_mass = exact
        return exact

    def _rederive_series(self):
        if self.series_config is not None:
            from mod_series import rederive_series_features
            rederive_series_features(self)

    # --- exportación ---
    def export_json(self):
        snap = self._snapshot
        cases = []
        for r in range(snap.n):
            cases.append({
                "id": int(snap.case_ids[r]),
                "values": [decode_value(a, snap.tables[j], snap.X[r, j]) for j, a in enumerate(snap.features)],
                "weight": float(snap.weights[r]),
                "session": snap.sessions[r],
                "train_index": int(snap.train_index[r]),
            })
        return {
            "version": ENGINE_VERSION,
            "session": self.session,
            "features": [a.to_dict() for a in snap.features],
            "tables": [list(t) for t in snap.tables],
            "cases": cases,
        }

    @classmethod
    def import_json(cls, doc):
        store = cls([FeatureAttribute.from_dict(d) for d in doc["features"]], session=doc.get("session"))
        store._tables = [list(t) for t in doc.get("tables", store._tables)]
        rows, weights, ids, sessions, tix = [], [], [], [], []
        for c in doc["cases"]:
            row, tables = store._encode_row(c["values"])
            store._tables = tables
            rows.append(row)
            weights.append(c["weight"])
            ids.append(c["id"])
            sessions.append(c["session"])
            tix.append(c["train_index"])
        with store._lock:
            store._append(rows, weights, ids, sessions, tix)
            store._publish()
        return store


# ==========================================
# 6. E/S DE ARCHIVOS
# ==========================================
def read_csv(path):
    """CSV con cabecera; campo vacío = NULL; filas irregulares = error."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise SchemaError(f"CSV irregular: {e}")
    except (OSError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"No se pudo leer {path}: {e}")
    if df.isna().any().any():
        raise SchemaError("CSV irregular: filas con menos campos que la cabecera")
    return df


def store_from_frame(df, features=None, config=None):
    feats = features or infer_feature_attributes(df, config)
    store = CaseStore(feats)
    report = store.train(df.to_dict("records"))
    return store, report


def _lock_path(path):
    return f"{path}.lock"


def save_store(store, path, model=None, extra=None):
    payload = {
        "format": STORE_FORMAT,
        "version": ENGINE_VERSION,
        "store": store.export_json(),
        "weights_total": store.total_mass,
        "metadata": store.metadata,
        "series_config": store.series_config,
        "model": model,
        "extra": extra or {},
    }
    with open(_lock_path(path), "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            tmp = f"{path}.tmp"
            joblib.dump(payload, tmp)
            os.replace(tmp, path)
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)
    logger.info("Almacén guardado en %s (%s)", path, store.snapshot.snapshot_id)


def load_store(path):
    """Devuelve (store, model, extra)."""
    if not os.path.exists(path):
        raise NotFoundError(f"No existe el almacén {path}")
    with open(_lock_path(path), "a") as lock:
        fcntl.flock(lock, fcntl.LOCK_SH)
        try:
            payload = joblib.load(path)
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)
    if payload.get("format") != STORE_FORMAT:
        raise SchemaError(f"Formato de almacén no soportado: {payload.get('format')}")
    store = CaseStore.import_json(payload["store"])
    store.metadata = payload.get("metadata") or store.metadata
    store.series_config = payload.get("series_config")
    store.reconcile_mass()
    return store, payload.get("model"), payload.get("extra", {})
