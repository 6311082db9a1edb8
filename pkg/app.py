"""
Early-Exit Engine - Sweep Explorer

Streamlit dashboard over a sweep CSV written by `python cli.py sweep`:
the quality-versus-reduction chart, the per-configuration table, and the
best configuration that keeps 95% of full-model accuracy.

Usage:
    streamlit run app.py
"""

import os
import sys

import pandas as pd
import streamlit as st

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.settings import INVALID_DEGENERATE_FRACTION, UI_CONFIG
from models.errors import ArtifactIOError
from utils.report import build_figure, load_sweep_frame


# =============================================================================
# Page Configuration
# =============================================================================

st.set_page_config(
    page_title=UI_CONFIG["page_title"],
    page_icon=UI_CONFIG["page_icon"],
    layout=UI_CONFIG["layout"],
    initial_sidebar_state=UI_CONFIG["initial_sidebar_state"]
)


# =============================================================================
# UI Components
# =============================================================================

def render_sidebar() -> str:
    """Pick the sweep file and filters; returns the CSV path."""
    with st.sidebar:
        st.markdown("### Sweep file")
        path = st.text_input("CSV path", value=os.path.join("runs", "default", "sweep.csv"))
        st.markdown("---")
        st.markdown("### Validity")
        st.markdown(
            f"A configuration is **invalid** when more than "
            f"{INVALID_DEGENERATE_FRACTION:.0%} of its free generations repeat one "
            f"token ten or more times in a row. Invalid rows are left out of the chart."
        )
    return path


def render_summary(frame: pd.DataFrame):
    """Full-model baseline against the best early-exit configuration."""
    full = frame[frame["prune_p"] == 0]
    exits = frame[frame["theta"].notna() & frame["valid"].astype(bool)]

    col1, col2, col3 = st.columns(3)
    with col1:
        st.metric("Configurations", len(frame))
    with col2:
        st.metric("Invalid", int((~frame["valid"].astype(bool)).sum()))
    if full.empty or exits.empty:
        return

    baseline = float(full["accuracy"].iloc[0])
    eligible = exits[exits["accuracy"] >= 0.95 * baseline]
    with col3:
        if eligible.empty:
            st.metric("Best RF at 95% accuracy", "none")
        else:
            best = eligible.sort_values("reduction_factor").iloc[-1]
            st.metric("Best RF at 95% accuracy", f"{best['reduction_factor']:.3f}",
                      help=str(best["config_id"]))


def render_results(frame: pd.DataFrame):
    policies = sorted(frame["policy"].unique())
    chosen = st.multiselect("Series", policies, default=policies)
    shown = frame[frame["policy"].isin(chosen)]

    st.plotly_chart(build_figure(shown), use_container_width=True)
    st.dataframe(shown, use_container_width=True, hide_index=True)


# =============================================================================
# Main Application
# =============================================================================

def main():
    """Main application entry point."""
    st.markdown("## Early-Exit Sweep Explorer")
    path = render_sidebar()

    try:
        frame = load_sweep_frame(path)
    except ArtifactIOError as e:
        st.info(f"{e.message}. Run `python cli.py sweep` first.")
        return

    render_summary(frame)
    st.markdown("---")
    render_results(frame)


if __name__ == "__main__":
    main()
