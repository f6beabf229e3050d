import json
from pathlib import Path

import streamlit as st
from dotenv import load_dotenv

from errors import BleLabError
from lab import LabRunner, dissect_lines, list_scenario_files, load_scenario, read_capture
from settings import configure_logging, get_settings
from stride import TABLE_COLUMNS, ThreatReport, Verdict

# Load env vars from .env file (if present)
load_dotenv()

# Set up Streamlit page configuration
st.set_page_config(page_title="BLE Wearable Threat Lab", layout="wide")


# --- HELPER: SCENARIOS ---
def list_scenarios(settings=None):
    """
    Maps shipped scenario names onto their files.

    Args:
        settings (Settings, optional): Where the assets live. Defaults to get_settings().

    Returns:
        dict: Scenario name (file stem) -> Path, sorted by name.
    """
    return {path.stem: path for path in list_scenario_files(settings or get_settings())}


# --- HELPER: VERDICT TABLE ---
def verdict_rows(report: ThreatReport):
    """
    Flattens a report into rows for st.dataframe, one per device.

    Args:
        report (ThreatReport): The run's report.

    Returns:
        list: Dicts with a "Device" key plus one "Yes"/"No" cell per STRIDE column,
        in the published column order.
    """
    rows = []
    for row in report.rows:
        cells = {"Device": row.device}
        for category in TABLE_COLUMNS:
            cells[category.value] = "Yes" if row.verdict.get(category) is Verdict.YES else "No"
        rows.append(cells)
    return rows


# --- HELPER: CAPTURE FILTER ---
def filter_dissection(records, query="", pdu_types=()):
    """
    Dissects the records that match a PDU type selection and a free-text query.

    Args:
        records (list): CaptureRecord objects, in capture order.
        query (str): Case-insensitive substring matched against the dissected line.
        pdu_types (iterable): PDU type values to keep. Empty keeps every type.

    Returns:
        list: The dissector header followed by the matching lines.
    """
    wanted = set(pdu_types)
    selected = [r for r in records if not wanted or r.pdu_type.value in wanted]
    header, *lines = dissect_lines(selected)
    needle = query.strip().lower()
    return [header] + [line for line in lines if needle in line.lower()]


settings = get_settings()
configure_logging(settings)

# --- UI SIDEBAR ---
st.sidebar.title("🛰️ Scenario")
scenarios = list_scenarios(settings)
if not scenarios:
    st.sidebar.warning(f"⚠️ No scenarios found under {settings.assets_dir / 'scenarios'}")
    st.stop()

selected = st.sidebar.selectbox("Select Scenario", list(scenarios))
override_seed = st.sidebar.checkbox("Override Seed", value=False)
seed = st.sidebar.number_input("Seed", min_value=0, value=0, step=1) if override_seed else None

# --- MAIN UI ---
st.title("🔐 BLE Wearable Threat Lab")

try:
    scenario = load_scenario(scenarios[selected], settings)
except BleLabError as e:
    st.error(f"Scenario error: {e}")
    st.stop()

if seed is not None:
    scenario = scenario.model_copy(update={"seed": int(seed)})
st.markdown(f"**Scenario:** `{scenario.name}` / **Seed:** `{scenario.seed}` / **Duration:** `{scenario.duration_s:g} s`")

if st.sidebar.button("▶️ Run Scenario"):
    out_dir = Path(settings.out_dir) / scenario.name
    try:
        app = LabRunner(settings).get_workflow()
        status_container = st.status("📡 Simulating...", expanded=True)
        artifacts = None

        # Stream node updates from LangGraph
        for event in app.stream({"scenario": scenario, "out_dir": out_dir}):
            for node_name, state_update in event.items():
                if node_name == "build_world":
                    status_container.write(f"🌍 Built world with {len(state_update['devices'])} devices")
                elif node_name == "simulate":
                    failed = [o for o in state_update["outcomes"] if o.error]
                    status_container.write(f"⏱️ Simulated {len(state_update['outcomes'])} attack scripts")
                    for outcome in failed:
                        status_container.warning(f"{outcome.attack.value} on {outcome.target or '-'}: {outcome.error}")
                elif node_name == "classify":
                    status_container.write("🧮 Classified outcomes into STRIDE verdicts")
                elif node_name == "report":
                    status_container.write(f"📝 Report lists {len(state_update['report'].threats)} DFD threats")
                elif node_name == "write":
                    artifacts = state_update["artifacts"]

        status_container.update(label="✅ Run Complete", state="complete", expanded=False)
        st.session_state.artifacts = artifacts
    except Exception as e:
        st.error(f"Error: {str(e)}")

artifacts = st.session_state.get("artifacts")
if artifacts is not None:
    tab_verdicts, tab_outcomes, tab_threats, tab_capture = st.tabs(
        ["STRIDE Verdicts", "Attack Outcomes", "DFD Threats", "Capture"]
    )

    with tab_verdicts:
        st.dataframe(verdict_rows(artifacts.report), use_container_width=True)
        for row in artifacts.report.rows:
            with st.expander(row.device):
                st.json({"requirements": row.requirements, "mitigations": row.mitigations})

    with tab_outcomes:
        for outcome in artifacts.outcomes:
            label = f"{outcome.attack.value} → {outcome.target or '-'}"
            with st.expander(f"❌ {label}" if outcome.error else f"✅ {label}"):
                st.json(json.loads(outcome.model_dump_json()))

    with tab_threats:
        st.dataframe([t.to_dict() for t in artifacts.report.threats], use_container_width=True)

    with tab_capture:
        records = read_capture(artifacts.capture_path)
        types = sorted({r.pdu_type.value for r in records})
        chosen = st.multiselect("PDU Types", types)
        query = st.text_input("Filter", placeholder="e.g. write handle=0x0012")
        st.code("\n".join(filter_dissection(records, query, chosen)), language=None)
