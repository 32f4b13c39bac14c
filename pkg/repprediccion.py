# ==========================================
# MÓDULO: PREDICCIÓN (REACT)
# ==========================================
import math

import pandas as pd
import plotly.express as px
import streamlit as st

from errors import DomainError, EngineError
from mod_data import as_snapshot
from mod_react import react_discriminative, residual_conviction


def parse_context(store, raw):
    """Convierte los textos del formulario en valores del contexto; vacío = omitido."""
    snapshot = as_snapshot(store)
    context = {}
    for name, text in raw.items():
        if text is None or str(text).strip() == "":
            continue
        j = snapshot.index_of(name)
        a = snapshot.features[j]
        text = str(text).strip()
        if a.kind == "nominal":
            # el símbolo guardado puede ser número o texto
            match = next((s for s in snapshot.tables[j] if str(s) == text), text)
            context[name] = match
        elif a.kind == "ordinal":
            context[name] = text
        else:
            try:
                context[name] = float(text)
            except ValueError:
                raise DomainError(f"{name}: '{text}' no es numérico")
    return context


def build_influence_frame(entries):
    df = pd.DataFrame(entries, columns=["id", "surprisal", "probability", "weight", "session", "train_index"])
    return df.sort_values(["weight", "id"], ascending=[False, True]).reset_index(drop=True)


def build_influence_chart(frame):
    df = frame.assign(caso=frame["id"].astype(str))
    fig = px.bar(df, x="caso", y="weight", hover_data=["surprisal", "session", "train_index"],
                 text_auto=".3f", color="surprisal", color_continuous_scale="Reds_r")
    fig.update_layout(xaxis_title="Caso", yaxis_title="Peso de influencia")
    return fig


def mostrar(sesion):
    st.markdown("<h2 style='color: #4A0000;'>🔮 Predicción</h2>", unsafe_allow_html=True)
    store, model, config = sesion["store"], sesion["model"], sesion.get("config")
    snapshot = as_snapshot(store)
    if snapshot.n == 0:
        st.warning("⚠️ El almacén está vacío.")
        return

    target = st.selectbox("Feature a predecir", snapshot.names, key="pred_target")
    with st.form("form_pred"):
        cols = st.columns(3)
        raw = {}
        for i, name in enumerate(n for n in snapshot.names if n != target):
            raw[name] = cols[i % 3].text_input(name, key=f"ctx_{name}")
        case_id = st.text_input("ID de caso para convicción de residual (opcional)")
        enviado = st.form_submit_button("Predecir", type="primary")
    if not enviado:
        return

    try:
        context = parse_context(store, raw)
        res = react_discriminative(store, model, context, [target],
                                   details={"influential_cases", "residuals", "categorical_probabilities"},
                                   config=config)
        rc = None
        if case_id.strip():
            rc = residual_conviction(store, model, int(case_id), target, config=config)
    except (EngineError, ValueError) as e:
        st.error(f"❌ {e}")
        return

    c1, c2, c3 = st.columns(3)
    c1.metric("Predicción", str(res.values.get(target)))
    residual = res.details.get("residuals", {}).get(target)
    c2.metric("Residual", "-" if residual is None or math.isnan(residual) else f"{residual:.4g}")
    c3.metric("Convicción de residual", "-" if rc is None else f"{rc:.4g}")

    probs = res.details.get("categorical_probabilities", {}).get(target)
    if probs:
        st.dataframe(pd.DataFrame({"clase": list(probs), "probabilidad": list(probs.values())}), hide_index=True)

    frame = build_influence_frame(res.details["influential_cases"][target])
    st.success(f"📋 **Casos influyentes:** {len(frame)}")
    st.plotly_chart(build_influence_chart(frame), use_container_width=True)
    st.dataframe(frame, hide_index=True)
