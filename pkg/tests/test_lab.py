"""
Tests for scenario loading, capture export/dissection, routing and the CLI.
Target: lab.py

Coverage intent:
- load_scenario: ParseError with line/column, ValidationError with the field path, asset references
- serialize_scenario reloads to an equal scenario
- read_capture / dissect: record decoding, MalformedRecord numbering
- route_after_simulate: classify only when attackers exist
- main(): exit codes 0 / 2 / 3 and each verb's output
"""
import json

import pytest

from attacks import ATTACK_PROGRAMS, AttackKind, AttackOutcome
from errors import MalformedRecord, ParseError, ValidationError
from lab import (
    DISSECT_HEADER,
    LabRunner,
    describe,
    dissect,
    dissect_lines,
    export_capture,
    list_profiles,
    list_scenario_files,
    load_scenario,
    main,
    read_capture,
    resolve_scenario_path,
    run,
    serialize_scenario,
)
from protocol import Freshness, PduType, encode_write
from radio import CaptureRecord

TINY = {
    "seed": 5,
    "duration_s": 2,
    "devices": [
        {"name": "band", "profile": "firebolt-invincible", "gatt": "firebolt-invincible", "position": [0, 0]},
    ],
}


@pytest.fixture
def write_scenario(tmp_path):
    """
    Factory fixture that writes a scenario file and returns its path.

    Usage:
        path = write_scenario(TINY, name="tiny")
        path = write_scenario('{"seed": ', name="broken")
    """
    def _write(content, name="tiny"):
        path = tmp_path / f"{name}.scenario"
        text = content if isinstance(content, str) else json.dumps(content, indent=2)
        path.write_text(text, encoding="utf-8")
        return path
    return _write


def record(seq=0, pdu_type=PduType.DATA, payload=b"", **overrides):
    fields = dict(seq=seq, timestamp_us=1000 * seq, channel=5, access_address="5a5a5a5a", pdu_type=pdu_type,
                  sender="c1c1c1c1c1c1", rssi_dbm=-49.5, payload_hex=payload.hex())
    fields.update(overrides)
    return CaptureRecord(**fields)


# =============================================================================
# load_scenario() tests
# =============================================================================
class TestLoadScenario:

    def test_name_defaults_to_file_stem(self, write_scenario, settings):
        assert load_scenario(write_scenario(TINY, name="bench"), settings).name == "bench"

    def test_parse_error_position(self, write_scenario, settings):
        with pytest.raises(ParseError) as exc:
            load_scenario(write_scenario('{\n  "seed": 1,,\n}'), settings)
        assert (exc.value.line, exc.value.column) == (2, 13)

    def test_empty_file(self, write_scenario, settings):
        with pytest.raises(ParseError) as exc:
            load_scenario(write_scenario("   \n"), settings)
        assert (exc.value.line, exc.value.column) == (1, 1)

    @pytest.mark.parametrize("change,field", [
        ({"seed": None}, "seed"),
        ({"duration_s": -1}, "duration_s"),
        ({"surprise": True}, "surprise"),
        ({"devices": [{**TINY["devices"][0], "profile": "no-such-band"}]}, "devices.0.profile"),
        ({"devices": [{**TINY["devices"][0], "gatt": "no-such-gatt"}]}, "devices.0.gatt"),
        ({"dfd": "no-such-dfd"}, "dfd"),
    ])
    def test_validation_error_field(self, write_scenario, settings, change, field):
        content = {**TINY, **change}
        content = {k: v for k, v in content.items() if v is not None}
        with pytest.raises(ValidationError) as exc:
            load_scenario(write_scenario(content), settings)
        assert exc.value.field == field

    def test_unknown_attack_kind(self, write_scenario, settings):
        content = {**TINY, "attackers": [{"name": "a", "position": [0, 3], "scripts": [{"attack": "teleport"}]}]}
        with pytest.raises(ValidationError) as exc:
            load_scenario(write_scenario(content), settings)
        assert exc.value.field.startswith("attackers.0.scripts.0")

    @pytest.mark.parametrize("script,message", [
        ({"attack": "sniff", "target": "ghost"}, "unknown device 'ghost'"),
        ({"attack": "dos"}, "needs a target"),
    ])
    def test_script_targets(self, write_scenario, settings, script, message):
        content = {**TINY, "attackers": [{"name": "a", "position": [0, 3], "scripts": [script]}]}
        with pytest.raises(ValidationError, match=message):
            load_scenario(write_scenario(content), settings)

    def test_duplicate_names(self, write_scenario, settings):
        content = {**TINY, "attackers": [{"name": "band", "position": [0, 3]}]}
        with pytest.raises(ValidationError, match="duplicate entity names: band"):
            load_scenario(write_scenario(content), settings)

    def test_inline_profile(self, write_scenario, settings):
        device = {**TINY["devices"][0], "profile": {"pairing_method": "passkey_entry", "echo_rate_limit": 10}}
        scenario = load_scenario(write_scenario({**TINY, "devices": [device]}), settings)
        assert scenario.devices[0].profile.echo_rate_limit == 10

    def test_stumble_needs_no_target(self, write_scenario, settings):
        content = {**TINY, "attackers": [{"name": "a", "position": [0, 3], "scripts": [{"attack": "stumble"}]}]}
        scenario = load_scenario(write_scenario(content), settings)
        assert scenario.attackers[0].scripts[0].target is None

    @pytest.mark.parametrize("path", list_scenario_files(), ids=lambda p: p.stem)
    def test_shipped_scenarios_load(self, path, settings):
        scenario = load_scenario(path, settings)
        assert scenario.name == path.stem
        assert scenario.devices

    @pytest.mark.parametrize("path", list_scenario_files(), ids=lambda p: p.stem)
    def test_serialized_scenario_reloads_equal(self, path, tmp_path, settings):
        scenario = load_scenario(path, settings)
        copy = tmp_path / path.name
        copy.write_text(serialize_scenario(scenario), encoding="utf-8")
        assert load_scenario(copy, settings) == scenario

    def test_resolve_shipped_name(self, settings):
        assert resolve_scenario_path("table1", settings) == settings.assets_dir / "scenarios" / "table1.scenario"

    def test_list_profiles(self, settings):
        assert set(list_profiles(settings)) == {
            "boat-storm", "firebolt-invincible", "hardened-band", "mi-band-4", "oneplus-band",
        }


# =============================================================================
# Capture export / dissection tests
# =============================================================================
class TestCapture:

    def test_export_then_read(self, tmp_path):
        records = [record(0, PduType.L2CAP_ECHO_REQ, b"\x01" * 4), record(1, PduType.TERMINATE, b"\x14")]
        path = tmp_path / "capture.jsonl"
        export_capture(records, path)
        assert read_capture(path) == records
        assert path.read_text(encoding="utf-8").count("\n") == 2

    def test_malformed_record_number(self, tmp_path):
        path = tmp_path / "capture.jsonl"
        path.write_text(record().to_json_line() + "\n" + '{"seq": "x"}\n', encoding="utf-8")
        with pytest.raises(MalformedRecord) as exc:
            read_capture(path)
        assert exc.value.record_number == 2

    def test_not_json_is_malformed(self, tmp_path):
        path = tmp_path / "capture.jsonl"
        path.write_text("not json\n", encoding="utf-8")
        with pytest.raises(MalformedRecord):
            read_capture(path)

    @pytest.mark.parametrize("rec,expected", [
        (record(pdu_type=PduType.DATA, payload=encode_write(18, b"alarm:07:30")),
         "write handle=0x0012 value='alarm:07:30'"),
        (record(pdu_type=PduType.DATA, payload=encode_write(18, b"alarm:07:30", Freshness("timestamp", 1234))),
         "write handle=0x0012 value='alarm:07:30' timestamp=1234"),
        (record(pdu_type=PduType.TERMINATE, payload=b"\x14"), "terminate reason=0x14"),
        (record(pdu_type=PduType.L2CAP_ECHO_REQ, payload=b"\x01" * 600), "echo request 600 bytes"),
        (record(pdu_type=PduType.DATA), "empty"),
        (record(pdu_type=PduType.DATA, payload=b"\xab\xcd", encrypted=True), "encrypted abcd"),
    ])
    def test_describe(self, rec, expected):
        assert describe(rec) == expected

    def test_undecodable_payload(self):
        lines = dissect_lines([record(pdu_type=PduType.DATA, payload=b"\xff")])
        assert lines[0] == DISSECT_HEADER
        assert lines[1].endswith("undecodable ff")

    def test_dissect_file(self, tmp_path):
        path = tmp_path / "capture.jsonl"
        export_capture([record(7, PduType.TERMINATE, b"\x13")], path)
        lines = dissect(path).splitlines()
        assert len(lines) == 2
        assert lines[1].split()[:4] == ["7", "7000", "5", "terminate"]


# =============================================================================
# LabRunner routing / workflow tests
# =============================================================================
class TestRouting:

    def test_route_to_classify_with_attackers(self, make_state, write_scenario, settings):
        content = {**TINY, "attackers": [{"name": "a", "position": [0, 3], "scripts": [{"attack": "stumble"}]}]}
        state = make_state(scenario=load_scenario(write_scenario(content), settings))
        assert LabRunner(settings).route_after_simulate(state) == "classify"

    def test_route_to_report_without_attackers(self, make_state, write_scenario, settings):
        state = make_state(scenario=load_scenario(write_scenario(TINY), settings))
        assert LabRunner(settings).route_after_simulate(state) == "report"

    def test_run_without_attackers(self, write_scenario, settings, tmp_path):
        artifacts = run(load_scenario(write_scenario(TINY), settings), tmp_path / "out", settings)
        assert artifacts.report.rows[0].verdict.codes() == ""
        assert artifacts.outcomes == []
        assert len(artifacts.report.threats) == 56
        assert read_capture(artifacts.capture_path)
        assert json.loads(artifacts.report_path.read_text(encoding="utf-8"))["devices"][0]["device"] == "band"

    def test_run_without_dfd(self, write_scenario, settings, tmp_path):
        artifacts = run(load_scenario(write_scenario({**TINY, "dfd": None}), settings), tmp_path / "out", settings)
        assert artifacts.report.threats == []

    def test_failed_script_is_recorded(self, write_scenario, settings, tmp_path):
        content = {**TINY, "attackers": [{"name": "far", "radio_class": "smartphone", "position": [0, 40],
                                          "scripts": [{"attack": "dos", "target": "band"}]}]}
        artifacts = run(load_scenario(write_scenario(content), settings), tmp_path / "out", settings)
        assert artifacts.outcomes[0].error.startswith("OutOfRange")
        assert artifacts.report.rows[0].verdict.codes() == ""

    def test_inject_without_prior_sniff_is_recorded(self, write_scenario, settings, tmp_path):
        content = {**TINY, "attackers": [{"name": "far", "position": [0, 80],
                                          "scripts": [{"attack": "dos", "target": "band", "inject": True}]}]}
        artifacts = run(load_scenario(write_scenario(content), settings), tmp_path / "out", settings)
        assert artifacts.outcomes[0].error.startswith("InsufficientObservations")

    @pytest.mark.parametrize("script,expected", [
        ({"attack": "crack_tk", "target": "band"}, 77),
        ({"attack": "crack_tk", "target": "band", "budget": 5}, 5),
    ])
    def test_crack_budget_defaults_to_settings(self, write_scenario, settings, tmp_path, monkeypatch,
                                               script, expected):
        budgets = []

        def recording_crack(attacker, world, target, budget=None):
            budgets.append(budget)
            yield from ()
            return AttackOutcome(attack=AttackKind.CRACK_TK, target=target.name)

        monkeypatch.setitem(ATTACK_PROGRAMS, AttackKind.CRACK_TK, recording_crack)
        content = {**TINY, "attackers": [{"name": "a", "position": [0, 3], "scripts": [script]}]}
        tight = settings.model_copy(update={"crack_budget": 77})
        run(load_scenario(write_scenario(content), tight), tmp_path / "out", tight)
        assert budgets == [expected]


# =============================================================================
# main() tests
# =============================================================================
class TestCli:

    def test_run_structured(self, write_scenario, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", str(write_scenario(TINY)), "--out", str(out), "--format", "structured"]) == 0
        document = json.loads(capsys.readouterr().out)
        assert document["devices"][0]["verdicts"]["Spoofing"] == "no"
        assert (out / "capture.jsonl").exists()
        assert (out / "report.txt").exists()

    def test_run_batch_uses_subdirectories(self, write_scenario, tmp_path, capsys):
        out = tmp_path / "out"
        first, second = write_scenario(TINY, "tiny-a"), write_scenario(TINY, "tiny-b")
        assert main(["run", str(first), str(second), "--out", str(out)]) == 0
        assert (out / "tiny-a" / "report.json").exists()
        assert (out / "tiny-b" / "report.json").exists()
        assert capsys.readouterr().out.count("Denial of Service") == 2

    def test_seed_override(self, write_scenario, tmp_path):
        path = write_scenario(TINY)
        main(["run", str(path), "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["run", str(path), "--out", str(tmp_path / "b"), "--seed", "2"])
        first = (tmp_path / "a" / "capture.jsonl").read_text(encoding="utf-8")
        second = (tmp_path / "b" / "capture.jsonl").read_text(encoding="utf-8")
        assert first != second

    @pytest.mark.parametrize("content", ['{"seed": 1,,}', {"seed": 1}])
    def test_bad_scenario_exits_2(self, write_scenario, tmp_path, capsys, content):
        assert main(["run", str(write_scenario(content)), "--out", str(tmp_path / "out")]) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_scenario_exits_2(self, tmp_path):
        assert main(["run", str(tmp_path / "nowhere.scenario")]) == 2

    def test_dissect(self, tmp_path, capsys):
        path = tmp_path / "capture.jsonl"
        export_capture([record(0, PduType.TERMINATE, b"\x14")], path)
        assert main(["dissect", str(path)]) == 0
        assert "terminate reason=0x14" in capsys.readouterr().out

    def test_dissect_malformed_exits_3(self, tmp_path):
        path = tmp_path / "capture.jsonl"
        path.write_text("{}\n", encoding="utf-8")
        assert main(["dissect", str(path)]) == 3

    def test_enumerate_threats_structured(self, capsys):
        assert main(["enumerate-threats", "wearable", "--format", "structured"]) == 0
        threats = json.loads(capsys.readouterr().out)
        assert len(threats) == 56

    def test_enumerate_invalid_dfd_exits_3(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"elements": [{"id": "f", "kind": "data_flow", "source": "a", "sink": "b"}]}),
                        encoding="utf-8")
        assert main(["enumerate-threats", str(path)]) == 3

    def test_list_profiles(self, capsys):
        assert main(["list-profiles"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 5
        assert lines[0].startswith("boat-storm")
        assert "rate_limit=10/s" in lines[0]
