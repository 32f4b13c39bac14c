# -*- coding: utf-8 -*-
"""
Línea de comandos del motor. Cada verbo carga el almacén, ejecuta la
operación y escribe un documento JSON determinista en stdout o en --out.

    python cli.py train --data iris.csv --store iris.eng
    python cli.py analyze --store iris.eng
    python cli.py react --store iris.eng --context '{"petal_length": 1.4}' --actions species
"""
import argparse
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import ENGINE_VERSION, load_config
from errors import EngineError, UsageError
from mod_anomalies import detect_anomalies, group_anomalousness
from mod_analysis import analyze
from mod_data import FeatureAttribute, load_store, read_csv, save_store, store_from_frame
from mod_insight import causal_graph, causal_report, prediction_contributions, to_dot
from mod_lifecycle import reduce, train_with_ablation
from mod_query import Goal, Query
from mod_react import react_aggregate, react_discriminative, react_generative
from mod_series import SeriesConfig, derive_series_features, react_series
from mod_synth import SynthConfig, synthesize_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s: %(message)s"


# ==========================================
# 1. SESIÓN Y SALIDA
# ==========================================
class EngineArgumentParser(argparse.ArgumentParser):
    """Los errores de uso se convierten en UsageError (código 1)."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _clean(obj):
    """Convierte tipos numpy/pandas a JSON; NaN e infinitos pasan a null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [_clean(v) for v in obj]
    if isinstance(obj, pd.DataFrame):
        return _clean(obj.to_dict("records"))
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


@dataclass
class EngineSession:
    store_path: str
    config: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    verb_log: list = field(default_factory=list)

    def load(self):
        """(store, model) del archivo; NotFoundError si no existe."""
        store, model, _ = load_store(self.store_path)
        self.verb_log = store.metadata.setdefault("verb_log", [])
        return store, model

    def require_model(self, model):
        if model is None:
            raise UsageError("El almacén no está analizado; ejecute 'analyze' primero")
        return model

    def save(self, store, model=None):
        save_store(store, self.store_path, model)

    def record(self, store, verb, **params):
        """Agrega una entrada al registro de verbos (solo se agrega)."""
        entry = {"verb": verb, "seed": self.seed, "snapshot_id": store.snapshot.snapshot_id,
                 "version": ENGINE_VERSION, "params": _clean(params)}
        store.metadata.setdefault("verb_log", []).append(entry)
        self.verb_log = store.metadata["verb_log"]
        return entry

    def document(self, store, verb, result):
        return {"version": ENGINE_VERSION, "verb": verb, "snapshot_id": store.snapshot.snapshot_id,
                "seed": self.seed, "result": result}


def _emit(doc, out=None):
    text = json.dumps(_clean(doc), sort_keys=True, indent=2, ensure_ascii=False)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _json_arg(text, name):
    if text is None:
        return None
    try:
        if os.path.exists(text):
            with open(text, "r", encoding="utf-8") as fh:
                return json.load(fh)
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"--{name}: JSON inválido ({e})")


# ==========================================
# 2. VERBOS
# ==========================================
def cmd_train(session, args):
    df = read_csv(args.data)
    features = _json_arg(args.features, "features")
    if features is not None:
        features = [FeatureAttribute.from_dict(d) for d in features]
    if os.path.exists(session.store_path):
        store, model = session.load()
        if args.ablate and model is not None:
            entries = train_with_ablation(store, model, df, session.config, session.seed)
            report = {"ablated": sum(1 for e in entries if e["status"] == "ablated"),
                      "trained": sum(1 for e in entries if e["status"] == "trained"),
                      "rejected": sum(1 for e in entries if e["status"] == "rejected")}
        else:
            res = store.train(df)
            report = {"trained": len(res["accepted"]), "rejected": res["rejected"]}
    else:
        store, res = store_from_frame(df, features, session.config)
        model = None
        report = {"trained": len(res["accepted"]), "rejected": res["rejected"]}
    series = _json_arg(args.series, "series")
    if series is not None:
        derive_series_features(store, SeriesConfig(**series), session.config, n_jobs=session.threads)
    report["cases"] = len(store)
    report["total_mass"] = store.total_mass
    session.record(store, "train", data=args.data)
    session.save(store, model)
    return store, report


def cmd_analyze(session, args):
    store, _ = session.load()
    model = analyze(store, targets=args.targets, config=session.config, seed=session.seed,
                    grid_search=args.grid_search, n_jobs=session.threads)
    session.record(store, "analyze", targets=args.targets, grid_search=args.grid_search)
    session.save(store, model)
    return store, model.to_dict()


def cmd_react(session, args):
    store, model = session.load()
    context = _json_arg(args.context, "context") or {}
    goals = [Goal(**g) for g in (_json_arg(args.goals, "goals") or [])]
    query = Query.from_config(session.config, context=context, goals=goals, seed=session.seed)
    if args.mode == "generative":
        res = react_generative(store, model, query, args.actions, conviction=args.conviction, seed=session.seed,
                               details=args.details, config=session.config)
    else:
        res = react_discriminative(store, model, query, args.actions, details=args.details,
                                   case_id=args.case_id, config=session.config)
    return store, res.to_dict()


def cmd_react_series(session, args):
    store, model = session.load()
    frame = react_series(store, session.require_model(model), _json_arg(args.series, "series") or {}, args.horizon,
                         mode=args.mode, conviction=args.conviction, seed=session.seed, config=session.config)
    if args.csv:
        frame.to_csv(args.csv, index=False)
    return store, {"steps": frame}


def cmd_react_aggregate(session, args):
    store, model = session.load()
    report = react_aggregate(store, model, args.target, n=args.n, scheme=args.holdout, seed=session.seed,
                             config=session.config)
    return store, report


def cmd_anomalies(session, args):
    store, model = session.load()
    report = detect_anomalies(store, session.require_model(model), session.config, session.seed, args.threshold)
    for name in args.group or []:
        report.groups.extend(group_anomalousness(store, model, name, session.config, session.seed))
    if args.csv:
        report.cases.to_csv(args.csv, index=False)
    return store, report.to_dict()


def cmd_causal(session, args):
    store, model = session.load()
    report = causal_report(session.require_model(model), session.config)
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as fh:
            fh.write(to_dot(causal_graph(report)))
    return store, report.to_dict()


def cmd_contributions(session, args):
    store, model = session.load()
    mode = "absolute" if args.mode == "accuracy" else args.mode
    report = prediction_contributions(store, session.require_model(model), args.target, mode=mode,
                                      condition=_json_arg(args.condition, "condition"),
                                      config=session.config, seed=session.seed)
    out = report.to_dict()
    out["values"] = report.values(args.mode)
    return store, out


def cmd_synth(session, args):
    store, model = session.load()
    synth = SynthConfig.from_config(
        session.config, mode=args.mode, conviction=args.conviction, epsilon=args.epsilon, seed=session.seed,
        override_budget=args.override_budget,
        **{k: v for k, v in (("anonymity", args.anonymity), ("ap_threshold", args.ap_threshold)) if v is not None},
    )
    frame, report = synthesize_dataset(store, session.require_model(model), args.n, synth, session.config,
                                       n_jobs=session.threads)
    if args.csv:
        frame.to_csv(args.csv, index=False)
    if synth.mode == "dp":
        session.record(store, "synth", n=args.n, epsilon=args.epsilon)
        session.save(store, model)
    report["data"] = frame
    return store, report


def cmd_reduce(session, args):
    store, model = session.load()
    report = reduce(store, session.require_model(model), config=session.config, seed=session.seed)
    session.record(store, "reduce")
    session.save(store, model)
    return store, report


def cmd_export(session, args):
    store, _ = session.load()
    return store, store.export_json()


VERBS = {
    "train": cmd_train, "analyze": cmd_analyze, "react": cmd_react, "react-series": cmd_react_series,
    "react-aggregate": cmd_react_aggregate, "anomalies": cmd_anomalies, "causal": cmd_causal,
    "contributions": cmd_contributions, "synth": cmd_synth, "reduce": cmd_reduce, "export": cmd_export,
}


# ==========================================
# 3. PARSER
# ==========================================
def build_parser():
    parser = EngineArgumentParser(prog="motor", description="Motor de inferencia basado en surprisal")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--config", default=None, help="JSON con secciones de configuración")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--out", default=None, help="Escribe el JSON en este archivo")
    sub = parser.add_subparsers(dest="verb", parser_class=EngineArgumentParser)
    sub.required = True

    def verb(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--store", required=True)
        return p

    p = verb("train", "Entrena casos desde un CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None, help="JSON con atributos de features")
    p.add_argument("--series", default=None, help="JSON de SeriesConfig")
    p.add_argument("--ablate", action="store_true")

    p = verb("analyze", "Calcula el modelo de incertidumbre")
    p.add_argument("--targets", nargs="*", default=None)
    p.add_argument("--grid-search", action="store_true")

    p = verb("react", "Inferencia discriminativa o generativa")
    p.add_argument("--context", default=None)
    p.add_argument("--actions", nargs="+", required=True)
    p.add_argument("--mode", choices=["discriminative", "generative"], default="discriminative")
    p.add_argument("--conviction", type=float, default=1.0)
    p.add_argument("--details", nargs="*", default=[])
    p.add_argument("--goals", default=None)
    p.add_argument("--case-id", type=int, default=None)

    p = verb("react-series", "Pronóstico de una serie")
    p.add_argument("--series", default=None, help="JSON con los valores de id de la serie")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--mode", choices=["discriminative", "generative"], default="discriminative")
    p.add_argument("--conviction", type=float, default=1.0)
    p.add_argument("--csv", default=None)

    p = verb("react-aggregate", "Métricas dejando uno fuera")
    p.add_argument("--target", required=True)
    p.add_argument("--holdout", choices=["loo-bootstrap", "loo"], default="loo-bootstrap")
    p.add_argument("--n", type=int, default=500)

    p = verb("anomalies", "Detección de anomalías")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--group", nargs="*", default=None)
    p.add_argument("--csv", default=None)

    p = verb("causal", "IAC, IAAC y aristas causales")
    p.add_argument("--dot", default=None)

    p = verb("contributions", "Contribuciones de features")
    p.add_argument("--target", required=True)
    p.add_argument("--mode", choices=["directional", "absolute", "accuracy"], default="absolute")
    p.add_argument("--condition", default=None)

    p = verb("synth", "Datos sintéticos")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mode", choices=["conviction", "dp"], default="conviction")
    p.add_argument("--conviction", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--anonymity", choices=["off", "min", "max"], default=None)
    p.add_argument("--ap-threshold", type=float, default=None)
    p.add_argument("--override-budget", action="store_true")
    p.add_argument("--csv", default=None)

    verb("reduce", "Reducción de casos redundantes")
    verb("export", "Exporta los casos a JSON")
    return parser


# ==========================================
# 4. PUNTO DE ENTRADA
# ==========================================
def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format=LOG_FORMAT,
                            force=True)
        session = EngineSession(args.store, load_config(args.config), args.seed, max(1, args.threads))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            store, result = VERBS[args.verb](session, args)
        doc = session.document(store, args.verb, result)
        doc["warnings"] = sorted({str(w.message) for w in caught})
        _emit(doc, args.out)
        return 0
    except EngineError as e:
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
