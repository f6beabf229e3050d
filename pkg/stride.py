"""
STRIDE engine: threat enumeration over a data-flow diagram and the
six-category verdict derived from attack outcomes.
"""
import json
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

import structlog
from pydantic import BaseModel, ConfigDict, Field

from attacks import AttackOutcome, Fact
from errors import ArityMismatch, InvalidDfd
from protocol import SecurityProfile

logger = structlog.get_logger(__name__)


# --- CATEGORIES ---
class StrideCategory(str, Enum):
    SPOOFING = "Spoofing"
    TAMPERING = "Tampering"
    REPUDIATION = "Repudiation"
    INFORMATION_DISCLOSURE = "Information Disclosure"
    DENIAL_OF_SERVICE = "Denial of Service"
    ELEVATION_OF_PRIVILEGE = "Elevation of Privilege"

    @property
    def code(self) -> str:
        return self.value[0]

    @property
    def field_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_code(cls, code: str) -> "StrideCategory":
        return next(c for c in cls if c.code == code)


S, T, R, I, D, E = (StrideCategory.from_code(c) for c in "STRIDE")

# Column order of the published verdict table
TABLE_COLUMNS = (D, E, I, R, S, T)


class Verdict(str, Enum):
    YES = "yes"
    NO = "no"


# --- DATA-FLOW DIAGRAM ---
class ElementKind(str, Enum):
    EXTERNAL_ENTITY = "external_entity"
    PROCESS = "process"
    DATA_STORE = "data_store"
    DATA_FLOW = "data_flow"


class DfdElement(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str = Field(min_length=1)
    kind: ElementKind
    label: str = ""
    source: Optional[str] = None    # flows only
    sink: Optional[str] = None      # flows only


class DfdModel(BaseModel):
    """Elements plus trust boundaries, each boundary a set of element ids."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = ""
    elements: list[DfdElement] = []
    trust_boundaries: list[list[str]] = []

    def element(self, element_id: str) -> Optional[DfdElement]:
        return next((e for e in self.elements if e.id == element_id), None)

    def boundary_of(self, element_id: str) -> Optional[int]:
        return next((i for i, members in enumerate(self.trust_boundaries) if element_id in members), None)


def check_dfd(dfd: DfdModel) -> None:
    """
    Validates structure: unique ids, flow endpoints that exist and are not
    flows, and disjoint trust boundaries over known elements.

    Raises:
        InvalidDfd: Listing every problem found.
    """
    problems = []
    ids = [e.id for e in dfd.elements]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    problems += [f"duplicate element id '{i}'" for i in duplicates]
    nodes = {e.id for e in dfd.elements if e.kind is not ElementKind.DATA_FLOW}
    for element in dfd.elements:
        if element.kind is ElementKind.DATA_FLOW:
            for end in ("source", "sink"):
                ref = getattr(element, end)
                if ref is None:
                    problems.append(f"flow '{element.id}' has no {end}")
                elif ref not in nodes:
                    problems.append(f"flow '{element.id}' {end} '{ref}' is not a known non-flow element")
        elif element.source is not None or element.sink is not None:
            problems.append(f"{element.kind.value} '{element.id}' cannot have a source or sink")
    seen: dict[str, int] = {}
    for index, members in enumerate(dfd.trust_boundaries):
        for member in members:
            if member not in ids:
                problems.append(f"boundary {index} names unknown element '{member}'")
            elif member in seen:
                problems.append(f"element '{member}' is in boundaries {seen[member]} and {index}")
            else:
                seen[member] = index
    if problems:
        raise InvalidDfd(problems)


def load_dfd(path: Path) -> DfdModel:
    """Reads and validates a DFD from a JSON file."""
    dfd = DfdModel.model_validate_json(Path(path).read_text(encoding="utf-8"))
    check_dfd(dfd)
    return dfd


# --- RULE TABLE ---
class Rule(BaseModel):
    model_config = ConfigDict(frozen=True)

    rule_id: str
    category: StrideCategory
    template: str


def _rule(prefix: str, category: StrideCategory, template: str) -> Rule:
    return Rule(rule_id=f"{prefix}.{category.code}", category=category, template=template)


# Every (kind, category) pair is listed; None marks it out of rule
RULES: dict[ElementKind, dict[StrideCategory, Optional[Rule]]] = {
    ElementKind.EXTERNAL_ENTITY: {
        S: _rule("EE", S, "An attacker impersonates {label} towards the system"),
        T: None,
        R: _rule("EE", R, "{label} denies having initiated an action"),
        I: None,
        D: None,
        E: None,
    },
    ElementKind.PROCESS: {
        S: _rule("P", S, "{label} is impersonated by a clone advertising the same identity"),
        T: _rule("P", T, "{label} state or code is modified through crafted input"),
        R: _rule("P", R, "{label} applies changes without an attributable record"),
        I: _rule("P", I, "{label} discloses identity or user data to unauthenticated peers"),
        D: _rule("P", D, "{label} is exhausted by request floods"),
        E: _rule("P", E, "{label} grants privileged operations without authentication"),
    },
    ElementKind.DATA_STORE: {
        S: None,
        T: _rule("DS", T, "Records in {label} are altered"),
        R: _rule("DS", R, "Writes to {label} are not logged"),
        I: _rule("DS", I, "Records in {label} are read by an unauthorised party"),
        D: _rule("DS", D, "{label} is filled or made unavailable"),
        E: None,
    },
    ElementKind.DATA_FLOW: {
        S: None,
        T: _rule("DF", T, "Data on {label} is modified or replayed in transit"),
        R: None,
        I: _rule("DF", I, "Data on {label} is sniffed in transit"),
        D: _rule("DF", D, "{label} is interrupted or flooded"),
        E: None,
    },
}

# Extra rules for flows that cross a trust boundary
BOUNDARY_RULES = (
    _rule("XB", S, "The sender of {label} is spoofed from outside its trust boundary"),
    _rule("XB", E, "Input arriving over {label} gains privileges across the trust boundary"),
)


class Threat(BaseModel):
    model_config = ConfigDict(frozen=True)

    rule_id: str
    category: StrideCategory
    element_id: str
    description: str

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "category": self.category.value,
            "element_id": self.element_id,
            "description": self.description,
        }


def crosses_boundary(dfd: DfdModel, flow: DfdElement) -> bool:
    """True when the endpoints sit in different boundaries or only one is inside one."""
    source, sink = dfd.boundary_of(flow.source), dfd.boundary_of(flow.sink)
    if source is None and sink is None:
        return False
    return source != sink


def enumerate_threats(dfd: DfdModel) -> list[Threat]:
    """
    Applies the rule table to every element of a valid DFD.

    Args:
        dfd (DfdModel): The data-flow diagram.

    Returns:
        list[Threat]: Threats sorted by (element_id, rule_id).

    Raises:
        InvalidDfd: If the diagram fails validation.
    """
    check_dfd(dfd)
    threats = []
    for element in dfd.elements:
        label = element.label or element.id
        rules = [rule for rule in RULES[element.kind].values() if rule is not None]
        if element.kind is ElementKind.DATA_FLOW and crosses_boundary(dfd, element):
            rules += BOUNDARY_RULES
        threats += [
            Threat(rule_id=rule.rule_id, category=rule.category, element_id=element.id,
                   description=rule.template.format(label=label))
            for rule in rules
        ]
    threats.sort(key=lambda t: (t.element_id, t.rule_id))
    logger.debug("threats enumerated", dfd=dfd.name, count=len(threats))
    return threats


# --- VERDICTS ---
FACT_CATEGORIES: dict[Fact, StrideCategory] = {
    Fact.KEY_RECOVERED: S,
    Fact.IMPERSONATION_ACCEPTED: S,
    Fact.WRITE_APPLIED_TWICE: T,
    Fact.PAYLOAD_ALTERED_UNDETECTED: T,
    Fact.PLAINTEXT_RECOVERED: I,
    Fact.DEVICE_TRACKED_ACROSS_SESSIONS: I,
    Fact.MODEL_IDENTIFIED: I,
    Fact.RTT_DEGRADED: D,
    Fact.CONNECTION_TERMINATED: D,
    Fact.PROTECTED_WRITE_SUCCEEDED: E,
}

# Facts that record a state change made by the attacker
STATE_CHANGE_FACTS = frozenset({
    Fact.WRITE_APPLIED_TWICE, Fact.PAYLOAD_ALTERED_UNDETECTED, Fact.PROTECTED_WRITE_SUCCEEDED,
})


class StrideVerdict(BaseModel):
    """One device's row: all six categories plus the capture indices behind each yes."""
    spoofing: Verdict = Verdict.NO
    tampering: Verdict = Verdict.NO
    repudiation: Verdict = Verdict.NO
    information_disclosure: Verdict = Verdict.NO
    denial_of_service: Verdict = Verdict.NO
    elevation_of_privilege: Verdict = Verdict.NO
    evidence: dict[StrideCategory, list[int]] = {}

    def get(self, category: StrideCategory) -> Verdict:
        return getattr(self, category.field_name)

    def codes(self) -> str:
        """Yes categories as letters in STRIDE order, e.g. "SID"."""
        return "".join(c.code for c in StrideCategory if self.get(c) is Verdict.YES)


def classify_outcomes(outcomes: list[AttackOutcome], *, audit_logging: bool = False,
                      repudiation_relevant: bool = False) -> StrideVerdict:
    """
    Maps attack facts onto the six categories. Adding facts never turns a
    yes into a no.

    Args:
        outcomes (list[AttackOutcome]): Every outcome recorded against one device.
        audit_logging (bool): Whether the device keeps attributable write records.
        repudiation_relevant (bool): Scenario flag that makes Repudiation reachable.

    Returns:
        StrideVerdict: The device's verdict row.
    """
    evidence: dict[StrideCategory, set[int]] = {}
    for outcome in outcomes:
        for fact, indices in outcome.fact_evidence.items():
            evidence.setdefault(FACT_CATEGORIES[fact], set()).update(indices)
            if fact in STATE_CHANGE_FACTS and repudiation_relevant and not audit_logging:
                evidence.setdefault(R, set()).update(indices)
    return StrideVerdict(
        **{c.field_name: Verdict.YES for c in evidence},
        evidence={c: sorted(evidence[c]) for c in StrideCategory if c in evidence},
    )


# --- REPORT ---
Requirement = Literal["anti_replay", "authentication", "encryption", "traffic_mitigation"]

REQUIREMENT_TEXT = {
    "anti_replay": "Include a timestamp or nonce in every write and reject stale or repeated ones",
    "authentication": "Pair with an authenticated method and authenticate application messages",
    "encryption": "Encrypt the link after pairing",
    "traffic_mitigation": "Rate-limit echo and other unauthenticated traffic",
    "address_rotation": "Rotate a resolvable private address",
    "undiscoverable_mode": "Stay undiscoverable outside pairing windows",
}

CATEGORY_MITIGATIONS: dict[StrideCategory, tuple[str, ...]] = {
    S: ("authentication", "undiscoverable_mode"),
    T: ("anti_replay", "authentication"),
    R: ("authentication",),
    I: ("encryption", "address_rotation", "undiscoverable_mode"),
    D: ("traffic_mitigation",),
    E: ("authentication",),
}


def requirements_audit(profile: SecurityProfile) -> dict[str, bool]:
    """Which of the four security requirements a profile meets."""
    return {
        "anti_replay": profile.anti_replay.mode != "none",
        "authentication": profile.pairing_method.authenticated or profile.message_integrity,
        "encryption": profile.link_encryption,
        "traffic_mitigation": profile.echo_rate_limit is not None,
    }


def recommend(verdict: StrideVerdict, profile: SecurityProfile) -> list[str]:
    """Mitigations for the yes categories that the profile does not already apply."""
    applied = {key for key, met in requirements_audit(profile).items() if met}
    if profile.address_policy.kind == "rotating":
        applied.add("address_rotation")
    if not profile.discoverable:
        applied.add("undiscoverable_mode")
    wanted = []
    for category in StrideCategory:
        if verdict.get(category) is Verdict.YES:
            wanted += [m for m in CATEGORY_MITIGATIONS[category] if m not in applied and m not in wanted]
    return wanted


class NamedProfile(BaseModel):
    name: str
    profile: SecurityProfile


class ReportRow(BaseModel):
    device: str
    verdict: StrideVerdict
    requirements: dict[str, bool]
    mitigations: list[str]


class ThreatReport(BaseModel):
    rows: list[ReportRow] = []
    threats: list[Threat] = []

    def threat_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in StrideCategory}
        for threat in self.threats:
            counts[threat.category.value] += 1
        return counts

    def to_json(self) -> str:
        document = {
            "columns": [c.value for c in TABLE_COLUMNS],
            "devices": [
                {
                    "device": row.device,
                    "verdicts": {c.value: row.verdict.get(c).value for c in TABLE_COLUMNS},
                    "evidence": {c.value: row.verdict.evidence.get(c, []) for c in TABLE_COLUMNS},
                    "requirements": row.requirements,
                    "mitigations": row.mitigations,
                }
                for row in self.rows
            ],
            "threat_counts": self.threat_counts(),
            "threats": [t.to_dict() for t in self.threats],
        }
        return json.dumps(document, indent=2) + "\n"

    def render_table(self) -> str:
        """Fixed-width device x category grid in the published column order."""
        headers = ["Device"] + [c.value for c in TABLE_COLUMNS]
        cells = [[row.device] + [row.verdict.get(c).value.capitalize() for c in TABLE_COLUMNS] for row in self.rows]
        widths = [max(len(r[i]) for r in [headers] + cells) for i in range(len(headers))]
        lines = [" | ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
        lines.append("-+-".join("-" * w for w in widths))
        lines += [" | ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        parts = [self.render_table()]
        for row in self.rows:
            yes = [c for c in TABLE_COLUMNS if row.verdict.get(c) is Verdict.YES]
            if yes:
                parts.append(f"\n{row.device}\n")
                parts += [f"  {c.value}: capture {', '.join(map(str, row.verdict.evidence[c]))}\n" for c in yes]
            unmet = [k for k, met in row.requirements.items() if not met]
            if unmet:
                parts.append(f"  unmet requirements: {', '.join(unmet)}\n")
            for mitigation in row.mitigations:
                parts.append(f"  mitigate: {REQUIREMENT_TEXT[mitigation]}\n")
        if self.threats:
            counts = ", ".join(f"{c.code}={n}" for c, n in zip(StrideCategory, self.threat_counts().values()))
            parts.append(f"\n{len(self.threats)} threats enumerated ({counts})\n")
        return "".join(parts)


def build_report(profiles: list[NamedProfile], verdicts: list[StrideVerdict], threats: list[Threat]) -> ThreatReport:
    """
    Assembles the per-device report.

    Args:
        profiles (list[NamedProfile]): Devices in row order.
        verdicts (list[StrideVerdict]): One verdict per profile, same order.
        threats (list[Threat]): Enumerated DFD threats to append.

    Returns:
        ThreatReport: Rows plus threats.

    Raises:
        ArityMismatch: If the two lists differ in length.
    """
    if len(profiles) != len(verdicts):
        raise ArityMismatch(f"{len(profiles)} profiles but {len(verdicts)} verdicts")
    rows = [
        ReportRow(device=named.name, verdict=verdict, requirements=requirements_audit(named.profile),
                  mitigations=recommend(verdict, named.profile))
        for named, verdict in zip(profiles, verdicts)
    ]
    return ThreatReport(rows=rows, threats=list(threats))
