# -*- coding: utf-8 -*-
import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))
import logging

import streamlit as st

from config import ENGINE_VERSION, load_config
from errors import EngineError
from mod_data import load_store
import repprediccion as mod_prediccion
import repanomalias as mod_anomalias
import repcausal as mod_causal

st.set_page_config(page_title="Motor de Surprisal", page_icon="🧭", layout="wide")
logging.basicConfig(level=logging.WARNING, format="%(asctime)s - %(name)s - %(levelname)s: %(message)s")

# ==========================================
# 1. CONFIGURACIÓN Y CONSTANTES
# ==========================================
DB = os.environ.get("MOTOR_STORE", "almacen.eng")
CONFIG = os.environ.get("MOTOR_CONFIG")

MENU = ["🔮 Predicción", "🚨 Anomalías", "🧬 Causalidad"]


# ==========================================
# 2. CARGA DEL ALMACÉN
# ==========================================
@st.cache_resource
def cargar_sesion(path, mtime):
    """mtime forma parte de la clave: un archivo reescrito se vuelve a cargar."""
    store, model, extra = load_store(path)
    return {"store": store, "model": model, "extra": extra, "config": load_config(CONFIG), "seed": 0}


# ==========================================
# 3. BARRA LATERAL
# ==========================================
with st.sidebar:
    st.markdown("<h3 style='color: #FFD700;'>🧭 MOTOR DE SURPRISAL</h3>", unsafe_allow_html=True)
    ruta = st.text_input("Archivo del almacén", value=DB)
    st.markdown("### 🛠️ MENÚ PRINCIPAL")
    m = st.radio("Menú Principal", MENU, key="menu_p", label_visibility="collapsed")
    st.markdown("---")
    st.caption(f"Versión {ENGINE_VERSION}")

if not os.path.exists(ruta):
    st.warning(f"⚠️ No existe el almacén {ruta}. Créelo con: python cli.py train --data datos.csv --store {ruta}")
    st.stop()

try:
    sesion = cargar_sesion(ruta, os.path.getmtime(ruta))
except EngineError as e:
    st.error(f"❌ {e}")
    st.stop()

with st.sidebar:
    snap = sesion["store"].snapshot
    st.markdown(f"**Casos:** {snap.n}  \n**Features:** {snap.f}  \n**Snapshot:** `{snap.snapshot_id}`")
    if sesion["model"] is None:
        st.info("Sin análisis: ejecute `python cli.py analyze`.")

# ==========================================
# MÓDULO: PREDICCIÓN
# ==========================================
if m == "🔮 Predicción":
    mod_prediccion.mostrar(sesion)

# ==========================================
# MÓDULO: ANOMALÍAS
# ==========================================
elif m == "🚨 Anomalías":
    mod_anomalias.mostrar(sesion)

# ==========================================
# MÓDULO: CAUSALIDAD
# ==========================================
elif m == "🧬 Causalidad":
    mod_causal.mostrar(sesion)
