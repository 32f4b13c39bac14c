# -*- coding: utf-8 -*-
import copy
import json
import math

from errors import ConfigError

# ==========================================
# 1. CONFIGURACIÓN Y CONSTANTES
# ==========================================
ENGINE_VERSION = "1.0.0"

FIBONACCI_K = [3, 5, 8, 13, 21, 34, 55, 89, 144]
LEBESGUE_P = [0.1, 0.5, 1.0, 2.0]

DEFAULT_CONFIG = {
    "data": {
        "nominal_ratio": 0.05,
        "nominal_max_distinct": 64,
        "bootstrap_n": 500,
    },
    "surprisal": {
        "baseline": 1.5,
        "min_floor": 1e-12,
        "gap_floor_factor": 1e-6,
    },
    "query": {
        "threshold": math.exp(-3.0),
        "k_min": 1,
        "k_max": None,          # None = |C|
        "expansion": 5.0,       # multiplos de δ para sumas parciales
        "seed_cap": 1024,
        "seed_fraction": 0.125,
        "chunk": 4096,
        "prefetch": 64,
    },
    "analysis": {
        "sample_size": 1000,
        "max_iterations": 10,
        "tolerance": 1e-3,
        "initial_deviations": "smallest_gap",   # o dict {feature: δ}
        "sparse_pair_min": 30,
        "coalition_samples": 256,
        "exhaustive_max_features": 12,
        "eval_cases": 200,
        "q_form": "baseline",                   # "baseline" | "literal"
        "q_scale": "robust_residual",           # "robust_residual" | "deviation" | "none"
        "q_floor": 0.01,
        "grid_bootstrap": 300,
    },
    "react": {
        "generative_retries": 64,
        "boundary_bisection": 20,
        "local_residual_sample": 2000,
    },
    "insight": {
        "edge_threshold": 0.1,
        "undirected_mcr": 2.0,
        "iac_residual": "robust",               # "robust" | "residual"
    },
    "anomalies": {
        "sc_threshold": 0.5,
        "sc_cap": 1e6,
        "expansion_threshold": 0.75,
        "inclusion_threshold": 1.5,
        "small_cluster_fraction": 0.15,
        "residual_convictions": False,
        "local_deviations": False,
        "kl_bins": 10,
    },
    "lifecycle": {
        "min_trained_cases": 1000,
        "reduction_fraction": 1.0 / math.e,
        "batch_size": 64,
        "retention_quantile": 1.0 - 1.0 / math.e,
        "strict": False,
        "rebalance_mode": "inverse_share",
    },
    "series": {
        "lags": 2,
        "rate_order": 1,
        "ensemble": 10,
    },
    "synth": {
        "retries": 16,
        "anonymity": "off",                     # "off" | "min" | "max"
        "ap_threshold": 1.0,
    },
}


# ==========================================
# 2. CARGA Y MEZCLA
# ==========================================
def _deep_merge(base, extra, path=""):
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], val, f"{path}{key}.")
        else:
            base[key] = val
    return base


def load_config(path=None, overrides=None):
    """Devuelve una copia de DEFAULT_CONFIG mezclada con un JSON y/o un dict."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    layers = []
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                layers.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"No se pudo leer la configuración {path}: {e}")
    if overrides:
        layers.append(overrides)
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("La configuración debe ser un objeto JSON")
        unknown = set(layer) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"Secciones desconocidas: {sorted(unknown)}")
        _deep_merge(cfg, layer)
    return cfg


def section(config, name):
    """Sección de config con los valores por defecto como respaldo."""
    merged = dict(DEFAULT_CONFIG[name])
    if config and name in config:
        merged.update(config[name])
    return merged
