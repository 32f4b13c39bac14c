# ==========================================
# MÓDULO: REPORTE DE ANOMALÍAS
# ==========================================
import copy
from io import BytesIO

import pandas as pd
import plotly.express as px
import streamlit as st

from errors import EngineError
from mod_anomalies import detect_anomalies

COLUMNAS = {
    "id": "ID",
    "surprisal_contribution": "Surprisal",
    "similarity_conviction": "Convicción de similitud",
    "cluster": "Cluster",
    "group_conviction": "Convicción de grupo",
    "minimal_conviction": "Convicción mínima",
    "anomalous": "Anómalo",
}


def build_anomaly_table(cases):
    """Casos ordenados de más a menos anómalo, con las columnas renombradas."""
    df = cases.sort_values(["minimal_conviction", "id"]).reset_index(drop=True)
    extra = [c for c in df.columns if c.startswith("rc_")]
    df = df[[c for c in COLUMNAS if c in df.columns] + extra]
    return df.rename(columns=COLUMNAS)


def build_rc_heatmap(cases, top=30):
    """Mapa de calor de convicción de residual por feature de los casos más anómalos."""
    rc = [c for c in cases.columns if c.startswith("rc_")]
    if not rc:
        return None
    df = cases.sort_values("minimal_conviction").head(top)
    mat = df[rc].rename(columns=lambda c: c[3:])
    mat.index = df["id"].astype(str)
    fig = px.imshow(mat, color_continuous_scale="RdYlGn", aspect="auto", zmin=0, zmax=2,
                    labels={"x": "Feature", "y": "Caso", "color": "RC"})
    return fig


def anomalies_to_excel(table):
    output = BytesIO()
    with pd.ExcelWriter(output, engine="openpyxl") as writer:
        table.to_excel(writer, index=False, sheet_name="Anomalias")
    return output.getvalue()


def mostrar(sesion):
    st.markdown("<h2 style='color: #4A0000;'>🚨 Reporte de Anomalías</h2>", unsafe_allow_html=True)
    store, model = sesion["store"], sesion["model"]
    if model is None:
        st.warning("⚠️ Ejecute el análisis antes de buscar anomalías.")
        return

    c1, c2 = st.columns(2)
    umbral = c1.slider("Umbral de convicción", 0.05, 1.0, 0.5, 0.05)
    con_rc = c2.checkbox("Incluir convicción de residual por feature", value=False)
    if not st.button("Buscar anomalías", type="primary"):
        return

    config = copy.deepcopy(sesion.get("config") or {})
    config.setdefault("anomalies", {})["residual_convictions"] = con_rc
    try:
        report = detect_anomalies(store, model, config, sesion.get("seed", 0), umbral)
    except EngineError as e:
        st.error(f"❌ {e}")
        return

    table = build_anomaly_table(report.cases)
    n_anom = int(report.cases["anomalous"].sum())
    m1, m2, m3 = st.columns(3)
    m1.metric("Casos", len(table))
    m2.metric("Anómalos", n_anom)
    m3.metric("Clusters", report.clusters.n_clusters)

    st.markdown("---")
    st.dataframe(table, hide_index=True, use_container_width=True)
    fig = build_rc_heatmap(report.cases)
    if fig is not None:
        st.plotly_chart(fig, use_container_width=True)

    st.download_button(
        label="📥 Exportar a Excel",
        data=anomalies_to_excel(table),
        file_name="Reporte_Anomalias.xlsx",
        mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
        key="btn_exp_anom",
        type="primary",
    )
