"""
Tests for the STRIDE engine.
Target: stride.py

Coverage intent:
- classify_outcomes: exhaustive fact-subset oracle, monotonicity, the repudiation gate
- check_dfd / enumerate_threats: every validation defect, boundary rules, the shipped golden list
- requirements_audit / recommend per shipped profile
- ThreatReport rendering (table, JSON) and build_report arity
"""
import itertools
import json
from pathlib import Path

import pytest

from attacks import AttackKind, AttackOutcome, Fact
from errors import ArityMismatch, InvalidDfd
from lab import load_profile
from settings import Settings
from stride import (
    FACT_CATEGORIES,
    STATE_CHANGE_FACTS,
    TABLE_COLUMNS,
    DfdElement,
    DfdModel,
    NamedProfile,
    StrideCategory,
    StrideVerdict,
    Verdict,
    build_report,
    check_dfd,
    classify_outcomes,
    enumerate_threats,
    load_dfd,
    recommend,
    requirements_audit,
)

GOLDEN = Path(__file__).parent / "golden" / "wearable_threats.json"
ALL_FACTS = list(Fact)


def outcome_with(*facts, start=0):
    return AttackOutcome(attack=AttackKind.SNIFF, fact_evidence={f: [start + i] for i, f in enumerate(facts)})


def node(element_id, kind="process", **kwargs):
    return DfdElement(id=element_id, kind=kind, **kwargs)


def flow(element_id, source, sink):
    return DfdElement(id=element_id, kind="data_flow", source=source, sink=sink)


# =============================================================================
# classify_outcomes() tests
# =============================================================================
class TestClassify:

    def test_every_fact_subset(self):
        """All 2^10 fact sets against the category mapping, without the repudiation flag."""
        for size in range(len(ALL_FACTS) + 1):
            for subset in itertools.combinations(ALL_FACTS, size):
                verdict = classify_outcomes([outcome_with(*subset)])
                expected = {FACT_CATEGORIES[f] for f in subset}
                for category in StrideCategory:
                    assert (verdict.get(category) is Verdict.YES) is (category in expected), (subset, category)

    def test_monotone_in_facts(self):
        facts = [Fact.PLAINTEXT_RECOVERED, Fact.RTT_DEGRADED, Fact.WRITE_APPLIED_TWICE]
        previous = set()
        for size in range(1, len(facts) + 1):
            verdict = classify_outcomes([outcome_with(*facts[:size])], repudiation_relevant=True)
            yes = {c for c in StrideCategory if verdict.get(c) is Verdict.YES}
            assert previous <= yes
            previous = yes

    def test_no_outcomes_is_all_no(self):
        assert classify_outcomes([]).codes() == ""

    def test_outcomes_are_merged(self):
        verdict = classify_outcomes([outcome_with(Fact.KEY_RECOVERED), outcome_with(Fact.MODEL_IDENTIFIED, start=7)])
        assert verdict.codes() == "SI"
        assert verdict.evidence[StrideCategory.SPOOFING] == [0]
        assert verdict.evidence[StrideCategory.INFORMATION_DISCLOSURE] == [7]

    @pytest.mark.parametrize("relevant,audit,repudiation", [
        (False, False, False),
        (True, False, True),
        (True, True, False),
        (False, True, False),
    ])
    def test_repudiation_gate(self, relevant, audit, repudiation):
        verdict = classify_outcomes([outcome_with(Fact.WRITE_APPLIED_TWICE)],
                                    audit_logging=audit, repudiation_relevant=relevant)
        assert (verdict.repudiation is Verdict.YES) is repudiation

    @pytest.mark.parametrize("fact", sorted(set(Fact) - STATE_CHANGE_FACTS, key=lambda f: f.value))
    def test_non_state_change_facts_never_repudiate(self, fact):
        verdict = classify_outcomes([outcome_with(fact)], repudiation_relevant=True)
        assert verdict.repudiation is Verdict.NO

    def test_codes_follow_stride_order(self):
        verdict = StrideVerdict(elevation_of_privilege="yes", spoofing="yes", denial_of_service="yes")
        assert verdict.codes() == "SDE"

    def test_error_outcome_contributes_nothing(self):
        failed = AttackOutcome(attack=AttackKind.DOS, target="band", error="OutOfRange: too far")
        assert classify_outcomes([failed]).codes() == ""


# =============================================================================
# check_dfd() tests
# =============================================================================
class TestCheckDfd:

    def test_valid(self):
        check_dfd(DfdModel(elements=[node("u", "external_entity"), node("p"), flow("f", "u", "p")],
                           trust_boundaries=[["u"], ["p"]]))

    @pytest.mark.parametrize("elements,boundaries,fragment", [
        ([node("p"), node("p")], [], "duplicate element id 'p'"),
        ([node("p"), flow("f", "p", "ghost")], [], "sink 'ghost'"),
        ([node("p"), DfdElement(id="f", kind="data_flow", source="p")], [], "has no sink"),
        ([node("p"), flow("f", "p", "p"), flow("g", "f", "p")], [], "source 'f'"),
        ([node("p", source="p")], [], "cannot have a source or sink"),
        ([node("p")], [["p"], ["p"]], "boundaries 0 and 1"),
        ([node("p")], [["ghost"]], "unknown element 'ghost'"),
    ])
    def test_defects(self, elements, boundaries, fragment):
        with pytest.raises(InvalidDfd) as exc:
            check_dfd(DfdModel(elements=elements, trust_boundaries=boundaries))
        assert any(fragment in problem for problem in exc.value.problems)

    def test_every_defect_reported(self):
        with pytest.raises(InvalidDfd) as exc:
            check_dfd(DfdModel(elements=[node("p"), node("p"), flow("f", "x", "y")]))
        assert len(exc.value.problems) == 3

    def test_enumerate_rejects_invalid(self):
        with pytest.raises(InvalidDfd):
            enumerate_threats(DfdModel(elements=[flow("f", "a", "b")]))


# =============================================================================
# enumerate_threats() tests
# =============================================================================
class TestEnumerateThreats:

    def test_small_diagram(self):
        dfd = DfdModel(elements=[node("u", "external_entity", label="User"), node("p", label="Band"),
                                 flow("f", "u", "p")],
                       trust_boundaries=[["u"], ["p"]])
        threats = enumerate_threats(dfd)
        assert [(t.element_id, t.rule_id) for t in threats] == [
            ("f", "DF.D"), ("f", "DF.I"), ("f", "DF.T"), ("f", "XB.E"), ("f", "XB.S"),
            ("p", "P.D"), ("p", "P.E"), ("p", "P.I"), ("p", "P.R"), ("p", "P.S"), ("p", "P.T"),
            ("u", "EE.R"), ("u", "EE.S"),
        ]
        assert threats[-1].description == "An attacker impersonates User towards the system"

    def test_label_defaults_to_id(self):
        threats = enumerate_threats(DfdModel(elements=[node("store", "data_store")]))
        assert threats[0].description.endswith("store is filled or made unavailable")
        assert {t.rule_id for t in threats} == {"DS.T", "DS.R", "DS.I", "DS.D"}

    @pytest.mark.parametrize("boundaries,crossing", [
        ([], False),
        ([["a", "b"]], False),
        ([["a"], ["b"]], True),
        ([["a"]], True),
    ])
    def test_boundary_rules(self, boundaries, crossing):
        dfd = DfdModel(elements=[node("a"), node("b"), flow("f", "a", "b")], trust_boundaries=boundaries)
        rule_ids = {t.rule_id for t in enumerate_threats(dfd) if t.element_id == "f"}
        assert ({"XB.S", "XB.E"} <= rule_ids) is crossing

    def test_shipped_diagram_matches_golden(self):
        dfd = load_dfd(Settings().assets_dir / "dfd" / "wearable.json")
        threats = [t.to_dict() for t in enumerate_threats(dfd)]
        assert threats == json.loads(GOLDEN.read_text(encoding="utf-8"))

    def test_shipped_diagram_counts(self):
        threats = enumerate_threats(load_dfd(Settings().assets_dir / "dfd" / "wearable.json"))
        assert len(threats) == 56
        assert sum(1 for t in threats if t.rule_id.startswith("XB.")) == 12


# =============================================================================
# requirements_audit() / recommend() tests
# =============================================================================
class TestRequirements:

    @pytest.mark.parametrize("name,expected", [
        ("firebolt-invincible", (False, False, False, False)),
        ("mi-band-4", (True, True, False, False)),
        ("boat-storm", (True, True, False, True)),
        ("oneplus-band", (False, True, True, False)),
        ("hardened-band", (True, True, True, True)),
    ])
    def test_audit(self, name, expected):
        audit = requirements_audit(load_profile(name))
        assert tuple(audit[k] for k in ("anti_replay", "authentication", "encryption", "traffic_mitigation")) == expected

    def test_recommend_for_open_device(self):
        everything = StrideVerdict(**{c.field_name: Verdict.YES for c in StrideCategory})
        assert recommend(everything, load_profile("firebolt-invincible")) == [
            "authentication", "undiscoverable_mode", "anti_replay", "encryption", "address_rotation",
            "traffic_mitigation",
        ]

    def test_recommend_for_hardened_device(self):
        everything = StrideVerdict(**{c.field_name: Verdict.YES for c in StrideCategory})
        assert recommend(everything, load_profile("hardened-band")) == ["undiscoverable_mode"]

    def test_nothing_to_recommend_without_findings(self):
        assert recommend(StrideVerdict(), load_profile("firebolt-invincible")) == []


# =============================================================================
# ThreatReport / build_report() tests
# =============================================================================
@pytest.fixture
def report():
    profiles = [NamedProfile(name="Fire-Boltt", profile=load_profile("firebolt-invincible")),
                NamedProfile(name="Boat", profile=load_profile("boat-storm"))]
    verdicts = [
        classify_outcomes([outcome_with(Fact.IMPERSONATION_ACCEPTED, Fact.WRITE_APPLIED_TWICE,
                                        Fact.PLAINTEXT_RECOVERED, Fact.RTT_DEGRADED,
                                        Fact.PROTECTED_WRITE_SUCCEEDED)]),
        classify_outcomes([outcome_with(Fact.PLAINTEXT_RECOVERED, start=40)]),
    ]
    return build_report(profiles, verdicts, [])


class TestReport:

    def test_table(self, report):
        lines = report.render_table().splitlines()
        assert [h.strip() for h in lines[0].split("|")] == ["Device"] + [c.value for c in TABLE_COLUMNS]
        assert [c.strip() for c in lines[2].split("|")] == ["Fire-Boltt", "Yes", "Yes", "Yes", "No", "Yes", "Yes"]
        assert [c.strip() for c in lines[3].split("|")] == ["Boat", "No", "No", "Yes", "No", "No", "No"]

    def test_json(self, report):
        document = json.loads(report.to_json())
        assert document["columns"] == [c.value for c in TABLE_COLUMNS]
        boat = document["devices"][1]
        assert boat["verdicts"]["Information Disclosure"] == "yes"
        assert boat["evidence"]["Information Disclosure"] == [40]
        assert boat["requirements"]["traffic_mitigation"] is True
        assert document["threats"] == []

    def test_text_cites_evidence(self, report):
        text = report.render_text()
        assert "Information Disclosure: capture 40" in text
        assert "unmet requirements: anti_replay, authentication, encryption, traffic_mitigation" in text

    def test_threat_counts(self):
        threats = enumerate_threats(load_dfd(Settings().assets_dir / "dfd" / "wearable.json"))
        counts = build_report([], [], threats).threat_counts()
        assert sum(counts.values()) == 56
        assert set(counts) == {c.value for c in StrideCategory}

    def test_arity_mismatch(self):
        with pytest.raises(ArityMismatch):
            build_report([NamedProfile(name="x", profile=load_profile("mi-band-4"))], [], [])
