"""
Lab CLI: scenario files, the run workflow, capture export and dissection.

A run is a LangGraph state graph:

    build_world -> simulate -> classify -> report -> write

When no attacker is present the classify step is skipped and every device
gets an all-no verdict.
"""
import argparse
import json
import string
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Annotated, Literal, Optional, TypedDict, Union

import structlog
from langgraph.graph import END, StateGraph
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic import ValidationError as PydanticValidationError

from attacks import ATTACK_PROGRAMS, AttackKind, AttackOutcome, Attacker
from errors import BleLabError, MalformedRecord, ParseError, ScenarioError, ValidationError
from protocol import (
    AttOp,
    CompanionApp,
    CompanionPlan,
    Device,
    EchoQueueConfig,
    GattDatabase,
    PduType,
    RadioClass,
    SecurityProfile,
    SmpOp,
    decode_adv,
    decode_connect_req,
    decode_discover_response,
    decode_features,
    parse_att,
    provision_bond,
)
from radio import CaptureRecord, World
from settings import Settings, configure_logging, get_settings
from stride import (
    NamedProfile,
    StrideVerdict,
    ThreatReport,
    build_report,
    classify_outcomes,
    enumerate_threats,
    load_dfd,
)

logger = structlog.get_logger(__name__)

Position = tuple[float, float]


# --- SCENARIO MODEL ---
class ScriptBase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    at_s: float = Field(default=0.0, ge=0)
    target: Optional[str] = None


class SniffScript(ScriptBase):
    attack: Literal["sniff"]
    observe_s: float = Field(default=2.0, gt=0)
    follow_s: float = Field(default=6.0, gt=0)


class CrackScript(ScriptBase):
    attack: Literal["crack_tk"]
    budget: Optional[int] = Field(default=None, ge=1)


class ReplayScript(ScriptBase):
    attack: Literal["replay"]
    delay_s: float = Field(default=6.0, ge=0)


class MitmScript(ScriptBase):
    attack: Literal["mitm"]
    wait_s: float = Field(default=10.0, gt=0)
    relay_s: float = Field(default=6.0, ge=0)
    mutate: bool = True


class DosScript(ScriptBase):
    attack: Literal["dos"]
    size: int = Field(default=600, ge=0, le=65535)
    rate: float = Field(default=1000.0, gt=0)
    duration_s: float = Field(default=1.0, gt=0)
    inject: bool = False     # flood a sniffed connection instead of opening one


class FingerprintScript(ScriptBase):
    attack: Literal["fingerprint"]
    window_s: float = Field(default=3.0, gt=0)
    gap_s: float = Field(default=905.0, ge=0)
    connect: bool = False


class BlueprintScript(ScriptBase):
    attack: Literal["blueprint"]
    pair: bool = True
    probe_writes: bool = True


class StumbleScript(ScriptBase):
    attack: Literal["stumble"]
    duration_s: float = Field(default=5.0, gt=0)
    probe: bool = True


class HijackScript(ScriptBase):
    attack: Literal["hijack"]
    handle: Optional[int] = Field(default=None, ge=1, le=0xFFFF)
    value: str = "hijacked"
    success_probability: float = Field(default=1.0, ge=0, le=1)


Script = Annotated[
    Union[SniffScript, CrackScript, ReplayScript, MitmScript, DosScript,
          FingerprintScript, BlueprintScript, StumbleScript, HijackScript],
    Field(discriminator="attack"),
]


class CompanionSpec(CompanionPlan):
    position: Position


class DeviceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    display_name: Optional[str] = None
    profile: Union[str, SecurityProfile]
    gatt: Union[str, GattDatabase]
    position: Position
    adv_interval_ms: int = Field(default=1000, gt=0)
    echo_queue: EchoQueueConfig = EchoQueueConfig()
    companion: Optional[CompanionSpec] = None

    @property
    def label(self) -> str:
        return self.display_name or self.name


class AttackerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    radio_class: RadioClass = RadioClass.LAPTOP
    position: Position
    scripts: list[Script] = []


class OutputsSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    capture: str = "capture.jsonl"
    report: str = "report.json"
    text_report: str = "report.txt"
    outcomes: str = "outcomes.json"


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = ""
    seed: int = Field(ge=0, lt=2 ** 64)
    duration_s: float = Field(gt=0)
    repudiation_relevant: bool = False
    dfd: Optional[str] = "wearable"
    devices: list[DeviceSpec] = []
    attackers: list[AttackerSpec] = []
    outputs: OutputsSpec = OutputsSpec()

    @model_validator(mode="after")
    def _names_resolve(self) -> "Scenario":
        names = [d.name for d in self.devices] + [a.name for a in self.attackers]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate entity names: {', '.join(duplicates)}")
        devices = {d.name for d in self.devices}
        for attacker in self.attackers:
            for script in attacker.scripts:
                if script.target is not None and script.target not in devices:
                    raise ValueError(f"{attacker.name} targets unknown device '{script.target}'")
                if script.target is None and script.attack != "stumble":
                    raise ValueError(f"{attacker.name}: {script.attack} needs a target")
        return self


# --- ASSETS ---
def _asset_path(kind: str, name: str, suffix: str, settings: Settings) -> Path:
    return settings.assets_dir / kind / f"{name}{suffix}"


def load_profile(name: str, settings: Optional[Settings] = None) -> SecurityProfile:
    path = _asset_path("profiles", name, ".json", settings or get_settings())
    return SecurityProfile.model_validate_json(path.read_text(encoding="utf-8"))


def load_gatt(name: str, settings: Optional[Settings] = None) -> GattDatabase:
    path = _asset_path("gatt", name, ".json", settings or get_settings())
    return GattDatabase.model_validate_json(path.read_text(encoding="utf-8"))


def list_profiles(settings: Optional[Settings] = None) -> dict[str, SecurityProfile]:
    settings = settings or get_settings()
    return {path.stem: load_profile(path.stem, settings)
            for path in sorted((settings.assets_dir / "profiles").glob("*.json"))}


def list_scenario_files(settings: Optional[Settings] = None) -> list[Path]:
    settings = settings or get_settings()
    return sorted((settings.assets_dir / "scenarios").glob("*.scenario"))


def resolve_scenario_path(ref: str, settings: Optional[Settings] = None) -> Path:
    """A path as given, or the name of a shipped scenario."""
    path = Path(ref)
    if path.exists():
        return path
    shipped = (settings or get_settings()).assets_dir / "scenarios" / f"{path.stem}.scenario"
    return shipped if shipped.exists() else path


def _field_path(loc: tuple) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def load_scenario(path: Path, settings: Optional[Settings] = None) -> Scenario:
    """
    Parses and validates a scenario file.

    Args:
        path (Path): JSON scenario file.
        settings (Settings, optional): Where profile and GATT references are looked up.

    Returns:
        Scenario: The validated scenario with references checked.

    Raises:
        ParseError: If the file is empty or not valid JSON.
        ValidationError: If a field is invalid or a reference is unknown.
    """
    settings = settings or get_settings()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ParseError("empty scenario file", 1, 1)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(err.msg, err.lineno, err.colno) from err
    try:
        scenario = Scenario.model_validate(raw)
    except PydanticValidationError as err:
        first = err.errors()[0]
        raise ValidationError(first["msg"], _field_path(first["loc"])) from err

    for index, device in enumerate(scenario.devices):
        for key, kind in (("profile", "profiles"), ("gatt", "gatt")):
            ref = getattr(device, key)
            if isinstance(ref, str) and not _asset_path(kind, ref, ".json", settings).exists():
                raise ValidationError(f"unknown {key} '{ref}'", f"devices.{index}.{key}")
    if scenario.dfd is not None and not _asset_path("dfd", scenario.dfd, ".json", settings).exists():
        raise ValidationError(f"unknown dfd '{scenario.dfd}'", "dfd")
    if not scenario.name:
        scenario = scenario.model_copy(update={"name": path.stem})
    return scenario


def serialize_scenario(scenario: Scenario) -> str:
    return scenario.model_dump_json(indent=2) + "\n"


# --- RUN WORKFLOW ---
class RunArtifacts(BaseModel):
    capture_path: Path
    report_path: Path
    text_report_path: Path
    outcomes: list[AttackOutcome]
    report: ThreatReport


class RunState(TypedDict):
    scenario: Scenario
    out_dir: Path
    world: World
    devices: dict              # name -> Device
    outcomes: list             # AttackOutcome, in script order
    verdicts: list             # StrideVerdict per device, in scenario order
    report: ThreatReport
    artifacts: RunArtifacts


def _script_program(script, attacker: Attacker, world: World, target: Optional[Device], settings: Settings):
    kind = AttackKind(script.attack)
    options = script.model_dump(exclude={"attack", "at_s", "target"})
    if kind is AttackKind.MITM and not options.pop("mutate"):
        options["mutate"] = lambda value: value
    if kind is AttackKind.CRACK_TK and options["budget"] is None:
        options["budget"] = settings.crack_budget
    return ATTACK_PROGRAMS[kind](attacker, world, target, **options)


class LabRunner:
    """
    Builds a world from a scenario, runs it and writes the artifacts.

    Args:
        settings (Settings, optional): Asset lookup and defaults.
    """

    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or get_settings()

    def _profile(self, ref) -> SecurityProfile:
        return ref if isinstance(ref, SecurityProfile) else load_profile(ref, self.settings)

    def _gatt(self, ref) -> GattDatabase:
        return ref if isinstance(ref, GattDatabase) else load_gatt(ref, self.settings)

    # --- NODES ---
    def build_world(self, state: RunState):
        scenario = state["scenario"]
        world = World(scenario.seed)
        devices: dict[str, Device] = {}
        for spec in scenario.devices:
            device = Device(spec.name, self._profile(spec.profile), self._gatt(spec.gatt),
                            rng=world.rng_for(spec.name), adv_interval_ms=spec.adv_interval_ms,
                            echo_config=spec.echo_queue)
            world.add(device, spec.position)
            devices[spec.name] = device
        for spec in scenario.devices:
            if spec.companion is None:
                continue
            plan = CompanionPlan.model_validate(spec.companion.model_dump(exclude={"position"}))
            phone_name = f"{spec.name}-phone"
            phone = Device(phone_name,
                           SecurityProfile(pairing_method=plan.pairing_method, radio_class=RadioClass.SMARTPHONE,
                                           discoverable=False),
                           role="central", rng=world.rng_for(phone_name))
            world.add(phone, spec.companion.position)
            if plan.bonded:
                provision_bond(phone, devices[spec.name])
            CompanionApp(phone, devices[spec.name], plan).start()

        outcomes: list[Optional[AttackOutcome]] = []
        for spec in scenario.attackers:
            attacker = Attacker(spec.name, spec.radio_class, rng=world.rng_for(spec.name))
            world.add(attacker, spec.position)
            for script in spec.scripts:
                target = devices.get(script.target) if script.target else None
                slot = len(outcomes)
                outcomes.append(None)
                world.spawn(_script_program(script, attacker, world, target, self.settings), attacker,
                            int(script.at_s * 1e6),
                            self._collector(outcomes, slot, script))
        logger.info("world built", scenario=scenario.name, seed=scenario.seed,
                    devices=len(scenario.devices), attackers=len(scenario.attackers))
        return {"world": world, "devices": devices, "outcomes": outcomes}

    @staticmethod
    def _collector(outcomes: list, slot: int, script):
        def on_done(result, error):
            if error is not None:
                result = AttackOutcome(attack=AttackKind(script.attack), target=script.target or "",
                                       error=f"{type(error).__name__}: {error}")
            outcomes[slot] = result
        return on_done

    def simulate(self, state: RunState):
        scenario = state["scenario"]
        world = state["world"]
        world.run_until(int(scenario.duration_s * 1e6))
        unfinished = [i for i, o in enumerate(state["outcomes"]) if o is None]
        if unfinished:
            logger.warning("scripts still running at end of scenario", slots=unfinished)
        outcomes = [
            o if o is not None else AttackOutcome(attack=AttackKind(s.attack), target=s.target or "",
                                                  error="unfinished at end of scenario")
            for o, s in zip(state["outcomes"], (s for a in scenario.attackers for s in a.scripts))
        ]
        logger.info("simulation finished", records=len(world.capture), clock_us=world.clock_us)
        return {"outcomes": outcomes}

    def classify(self, state: RunState):
        scenario = state["scenario"]
        verdicts = []
        for spec in scenario.devices:
            device = state["devices"][spec.name]
            relevant = [o for o in state["outcomes"] if o.target == spec.name]
            verdicts.append(classify_outcomes(relevant, audit_logging=device.profile.audit_logging,
                                              repudiation_relevant=scenario.repudiation_relevant))
        return {"verdicts": verdicts}

    def report(self, state: RunState):
        scenario = state["scenario"]
        verdicts = state.get("verdicts") or [StrideVerdict() for _ in scenario.devices]
        threats = []
        if scenario.dfd is not None:
            threats = enumerate_threats(load_dfd(_asset_path("dfd", scenario.dfd, ".json", self.settings)))
        profiles = [NamedProfile(name=spec.label, profile=state["devices"][spec.name].profile)
                    for spec in scenario.devices]
        return {"verdicts": verdicts, "report": build_report(profiles, verdicts, threats)}

    def write(self, state: RunState):
        scenario, out_dir = state["scenario"], Path(state["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        capture_path = out_dir / scenario.outputs.capture
        report_path = out_dir / scenario.outputs.report
        text_path = out_dir / scenario.outputs.text_report
        export_capture(state["world"].capture, capture_path)
        report_path.write_text(state["report"].to_json(), encoding="utf-8")
        text_path.write_text(state["report"].render_text(), encoding="utf-8")
        outcomes = [o.model_dump(mode="json") for o in state["outcomes"]]
        (out_dir / scenario.outputs.outcomes).write_text(json.dumps(outcomes, indent=2) + "\n", encoding="utf-8")
        logger.info("run artifacts written", out_dir=str(out_dir))
        artifacts = RunArtifacts(capture_path=capture_path, report_path=report_path, text_report_path=text_path,
                                 outcomes=state["outcomes"], report=state["report"])
        return {"artifacts": artifacts}

    # --- ROUTING ---
    def route_after_simulate(self, state: RunState):
        """Skips classification when nothing attacked."""
        return "classify" if state["scenario"].attackers else "report"

    def get_workflow(self):
        """
        Constructs and compiles the run graph.

        Returns:
            CompiledGraph: The compiled workflow ready for execution.
        """
        workflow = StateGraph(RunState)

        workflow.add_node("build_world", self.build_world)
        workflow.add_node("simulate", self.simulate)
        workflow.add_node("classify", self.classify)
        workflow.add_node("report", self.report)
        workflow.add_node("write", self.write)

        workflow.set_entry_point("build_world")
        workflow.add_edge("build_world", "simulate")
        workflow.add_conditional_edges("simulate", self.route_after_simulate, {"classify": "classify", "report": "report"})
        workflow.add_edge("classify", "report")
        workflow.add_edge("report", "write")
        workflow.add_edge("write", END)

        return workflow.compile()


def run(scenario: Scenario, out_dir: Optional[Path] = None, settings: Optional[Settings] = None) -> RunArtifacts:
    """
    Executes a scenario end to end.

    Args:
        scenario (Scenario): A validated scenario.
        out_dir (Path, optional): Artifact directory. Defaults to <out_dir>/<scenario name>.
        settings (Settings, optional): Asset lookup and defaults.

    Returns:
        RunArtifacts: Paths written plus the outcomes and report.
    """
    settings = settings or get_settings()
    out_dir = Path(out_dir) if out_dir is not None else settings.out_dir / (scenario.name or "scenario")
    app = LabRunner(settings).get_workflow()
    final_state = app.invoke({"scenario": scenario, "out_dir": out_dir})
    return final_state["artifacts"]


# --- CAPTURE ---
def export_capture(records: list[CaptureRecord], path: Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(record.to_json_line() + "\n")


def read_capture(path: Path) -> list[CaptureRecord]:
    """
    Raises:
        MalformedRecord: Naming the first line that does not validate.
    """
    records = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(CaptureRecord.model_validate_json(line))
        except PydanticValidationError as err:
            raise MalformedRecord(err.errors()[0]["msg"], number) from err
    return records


def _text(value: bytes) -> str:
    if value and all(chr(b) in string.printable for b in value):
        return repr(value.decode())
    return value.hex() or "''"


def _describe_att(payload: bytes) -> str:
    msg = parse_att(payload)
    if msg.op is AttOp.WRITE_REQ:
        parts = [f"write handle=0x{msg.handle:04x} value={_text(msg.value)}"]
        if msg.freshness.kind != "none":
            parts.append(f"{msg.freshness.kind}={msg.freshness.value}")
        if msg.tag is not None:
            parts.append(f"tag={msg.tag.hex()}")
        return " ".join(parts)
    if msg.op is AttOp.READ_REQ:
        return f"read handle=0x{msg.handle:04x}"
    if msg.op is AttOp.READ_RSP:
        return f"read response value={_text(msg.value)}"
    if msg.op is AttOp.WRITE_RSP:
        return "write response"
    if msg.op is AttOp.ERROR:
        return f"error request=0x{msg.request_op:02x} handle=0x{msg.handle:04x} code=0x{msg.error_code:02x}"
    if msg.op is AttOp.DISCOVER_REQ:
        return "discover"
    entries = decode_discover_response(payload)
    return f"discover response {len(entries)} characteristics"


def _describe_smp(payload: bytes) -> str:
    op, body = payload[0], payload[1:]
    name = SmpOp(op).name.lower()
    if op in (SmpOp.PAIRING_REQUEST, SmpOp.PAIRING_RESPONSE):
        features = decode_features(payload)
        return (f"{name} method={features['method'].value} link_encryption={features['link_encryption']} "
                f"mitm={features['mitm']}")
    return f"{name} {body.hex()}".rstrip()


def describe(record: CaptureRecord) -> str:
    """Human-readable semantics of one record's payload."""
    payload = record.payload
    if record.encrypted:
        return f"encrypted {record.payload_hex}"
    if record.pdu_type is PduType.ADV_IND:
        address, uuids = decode_adv(payload)
        return f"adv address={address.hex()} services={','.join(str(u) for u in uuids) or '-'}"
    if record.pdu_type is PduType.CONNECT_REQ:
        fields = decode_connect_req(payload)
        return (f"connect advertiser={fields['advertiser'].hex()} aa={fields['access_address']:08x} "
                f"interval_us={fields['interval_us']} hop={fields['hop_increment']}")
    if record.pdu_type is PduType.TERMINATE:
        return f"terminate reason=0x{payload[0]:02x}" if payload else "terminate"
    if record.pdu_type in (PduType.L2CAP_ECHO_REQ, PduType.L2CAP_ECHO_RSP):
        kind = "request" if record.pdu_type is PduType.L2CAP_ECHO_REQ else "response"
        return f"echo {kind} {len(payload)} bytes"
    if not payload:
        return "empty"
    if record.pdu_type is PduType.SMP:
        return _describe_smp(payload)
    return _describe_att(payload)


DISSECT_HEADER = f"{'seq':>6} {'time_us':>12} {'ch':>2} {'type':<14} {'sender':<12} {'rssi':>6}  info"


def dissect_lines(records: list[CaptureRecord]) -> list[str]:
    lines = [DISSECT_HEADER]
    for record in records:
        try:
            info = describe(record)
        except ValueError:
            info = f"undecodable {record.payload_hex}"
        lines.append(f"{record.seq:>6} {record.timestamp_us:>12} {record.channel:>2} {record.pdu_type.value:<14} "
                      f"{record.sender:<12} {record.rssi_dbm:>6.1f}  {info}")
    return lines


def dissect(path: Path) -> str:
    """
    Renders a capture file one line per record.

    Raises:
        MalformedRecord: If a line does not decode as a capture record.
    """
    return "\n".join(dissect_lines(read_capture(path))) + "\n"


# --- CLI ---
def _run_one(ref: str, seed: Optional[int], out: Optional[str], fmt: str, batch: bool) -> str:
    settings = get_settings()
    configure_logging(settings)
    scenario = load_scenario(resolve_scenario_path(ref, settings), settings)
    if seed is not None:
        scenario = scenario.model_copy(update={"seed": seed})
    root = Path(out) if out else settings.out_dir
    out_dir = root / scenario.name if batch or not out else root
    artifacts = run(scenario, out_dir, settings)
    return artifacts.report.to_json() if fmt == "structured" else artifacts.report.render_text()


def _cmd_run(args) -> int:
    batch = len(args.scenarios) > 1
    if args.jobs > 1 and batch:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_run_one, ref, args.seed, args.out, args.format, batch) for ref in args.scenarios]
            outputs = [future.result() for future in futures]
    else:
        outputs = [_run_one(ref, args.seed, args.out, args.format, batch) for ref in args.scenarios]
    sys.stdout.write("".join(outputs))
    return 0


def _cmd_dissect(args) -> int:
    sys.stdout.write(dissect(Path(args.capture)))
    return 0


def _cmd_enumerate_threats(args) -> int:
    settings = get_settings()
    path = Path(args.dfd) if args.dfd else _asset_path("dfd", "wearable", ".json", settings)
    if not path.exists():
        path = _asset_path("dfd", args.dfd, ".json", settings)
    threats = enumerate_threats(load_dfd(path))
    if args.format == "structured":
        sys.stdout.write(json.dumps([t.to_dict() for t in threats], indent=2) + "\n")
    else:
        for threat in threats:
            sys.stdout.write(f"{threat.element_id:<14} {threat.rule_id:<5} {threat.category.value:<22} "
                             f"{threat.description}\n")
    return 0


def _cmd_list_profiles(args) -> int:
    for name, profile in list_profiles().items():
        replay = profile.anti_replay.mode + (f"/{profile.anti_replay.window_ms}ms" if profile.anti_replay.window_ms else "")
        limit = f"{profile.echo_rate_limit:g}/s" if profile.echo_rate_limit else "none"
        sys.stdout.write(
            f"{name:<22} pairing={profile.pairing_method.value} encryption={profile.link_encryption} "
            f"address={profile.address_policy.kind} write_auth={profile.write_auth_required} "
            f"anti_replay={replay} rate_limit={limit}\n"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blelab", description="Deterministic BLE wearable security lab")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run_parser = verbs.add_parser("run", help="run one or more scenarios")
    run_parser.add_argument("scenarios", nargs="+", help="scenario files or shipped scenario names")
    run_parser.add_argument("--seed", type=int, help="override the scenario seed")
    run_parser.add_argument("--out", help="output directory")
    run_parser.add_argument("--format", choices=("text", "structured"), default="text")
    run_parser.add_argument("--jobs", type=int, default=1, help="scenarios run in parallel processes")
    run_parser.set_defaults(handler=_cmd_run)

    dissect_parser = verbs.add_parser("dissect", help="print a capture file human-readably")
    dissect_parser.add_argument("capture")
    dissect_parser.set_defaults(handler=_cmd_dissect)

    threats_parser = verbs.add_parser("enumerate-threats", help="list STRIDE threats for a DFD")
    threats_parser.add_argument("dfd", nargs="?", help="DFD file or shipped DFD name")
    threats_parser.add_argument("--format", choices=("text", "structured"), default="text")
    threats_parser.set_defaults(handler=_cmd_enumerate_threats)

    profiles_parser = verbs.add_parser("list-profiles", help="list shipped security profiles")
    profiles_parser.set_defaults(handler=_cmd_list_profiles)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    CLI entry point.

    Returns:
        int: 0 on success, 2 for scenario errors or missing files, 3 for any other failure.
    """
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        return args.handler(args)
    except (ScenarioError, FileNotFoundError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 2
    except BleLabError as err:
        sys.stderr.write(f"error: {err}\n")
        return 3
    except Exception as err:  # noqa: BLE001
        logger.exception("run failed")
        sys.stderr.write(f"error: {err}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
