# ==========================================
# MÓDULO: CAUSALIDAD E INFLUENCIA
# ==========================================
import networkx as nx
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from errors import EngineError
from mod_insight import causal_graph, causal_report, suggest_feature_discovery, to_dot


def build_heatmap(df, title):
    fig = px.imshow(df.astype(float), color_continuous_scale="Blues", aspect="auto", text_auto=".2f",
                    labels={"x": "Target", "y": "Feature", "color": title})
    fig.update_layout(title=title)
    return fig


def build_mcr_frame(report):
    df = pd.DataFrame({"feature": list(report.mcr), "mcr": list(report.mcr.values())})
    return df.sort_values(["mcr", "feature"], ascending=[False, True]).reset_index(drop=True)


def build_graph_figure(graph, seed=0):
    """Grafo causal con disposición de resorte; las flechas van como anotaciones."""
    pos = nx.spring_layout(graph, seed=seed) if graph.number_of_nodes() else {}
    fig = go.Figure()
    for a, b, data in graph.edges(data=True):
        fig.add_annotation(
            x=pos[b][0], y=pos[b][1], ax=pos[a][0], ay=pos[a][1], xref="x", yref="y", axref="x", ayref="y",
            showarrow=True, arrowhead=0 if data.get("style") == "dashed" else 2, arrowwidth=1.5,
            arrowcolor="#4A0000",
        )
    nodes = list(graph.nodes())
    fig.add_trace(go.Scatter(
        x=[pos[n][0] for n in nodes], y=[pos[n][1] for n in nodes], mode="markers+text", text=nodes,
        textposition="top center", marker=dict(size=18, color="#FFD700", line=dict(color="#4A0000", width=2)),
    ))
    fig.update_layout(showlegend=False, xaxis=dict(visible=False), yaxis=dict(visible=False))
    return fig


def mostrar(sesion):
    st.markdown("<h2 style='color: #4A0000;'>🧬 Causalidad</h2>", unsafe_allow_html=True)
    model = sesion["model"]
    if model is None:
        st.warning("⚠️ Ejecute el análisis antes de consultar la causalidad.")
        return
    try:
        report = causal_report(model, sesion.get("config"))
    except EngineError as e:
        st.error(f"❌ {e}")
        return

    tab1, tab2, tab3 = st.tabs(["IAC / IAAC", "MCR", "Grafo"])
    with tab1:
        st.plotly_chart(build_heatmap(report.iac, "IAC"), use_container_width=True)
        st.plotly_chart(build_heatmap(report.iaac, "IAAC"), use_container_width=True)
    with tab2:
        mcr = build_mcr_frame(report)
        st.plotly_chart(px.bar(mcr, x="feature", y="mcr", text_auto=".2f"), use_container_width=True)
        st.dataframe(pd.DataFrame(suggest_feature_discovery(model)), hide_index=True)
    with tab3:
        graph = causal_graph(report)
        st.plotly_chart(build_graph_figure(graph), use_container_width=True)
        if report.edges:
            st.dataframe(pd.DataFrame(report.edges), hide_index=True)
        else:
            st.info("No se detectaron aristas sobre el umbral.")
        st.download_button("📥 Descargar DOT", data=to_dot(graph), file_name="grafo_causal.dot",
                           mime="text/vnd.graphviz", key="btn_dot")
