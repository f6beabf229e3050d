"""
Attack suite: passive and active attacks against simulated wearables.

Active attacks are written as programs (generators yielding wake-up times)
so several attackers can run concurrently inside one World; each has a
blocking wrapper for direct use. Every attack returns an AttackOutcome whose
facts cite the capture indices that prove them. Facts are judged against
the victim's ground truth (what it applied, whether it terminated), never
against what the attacker merely believes.
"""
import math
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Optional

import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import (
    CloneRejected,
    InsufficientObservations,
    IntegrityFailure,
    LostConnection,
    NotConnected,
    NotCrackable,
    OutOfRange,
)
from protocol import (
    ADV_ACCESS_ADDRESS,
    ADV_CHANNELS,
    DATA_CHANNEL_COUNT,
    DEVICE_INFO_FIELDS,
    TRANSMIT_WINDOW_US,
    AttMessage,
    AttOp,
    ConnectionState,
    Device,
    DeviceAddress,
    Freshness,
    GattDatabase,
    GattServer,
    LinkLayerPdu,
    PairingMethod,
    PduMeta,
    PduType,
    Property,
    RadioClass,
    SecurityProfile,
    SmpOp,
    confirm_value,
    decode_adv,
    decode_connect_req,
    decode_discover_response,
    decode_features,
    decrypt_pdu,
    echo_payload,
    encode_att,
    encode_discover,
    encode_features,
    encode_read,
    encode_write,
    is_resolvable_private,
    matching_tks,
    negotiate,
    parse_att,
    prf,
    takeover,
    terminate,
    tk_bytes,
)
from radio import Program, Sniffer, World

logger = structlog.get_logger(__name__)

POLL_US = 5_000
EVENT_CLUSTER_US = 500       # PDUs closer than this belong to one connection event
INJECTION_GUARD_US = 300     # keep injections clear of event instants
PASSKEY_SPACE = 1_000_000


# --- TAXONOMY ---
class AttackKind(str, Enum):
    SNIFF = "sniff"
    CRACK_TK = "crack_tk"
    REPLAY = "replay"
    MITM = "mitm"
    DOS = "dos"
    FINGERPRINT = "fingerprint"
    BLUEPRINT = "blueprint"
    STUMBLE = "stumble"
    HIJACK = "hijack"


class Layer(str, Enum):
    PHYSICAL = "physical"
    DATA_LINK = "data_link"
    APPLICATION = "application"


ATTACK_LAYERS = {
    AttackKind.SNIFF: Layer.PHYSICAL,
    AttackKind.STUMBLE: Layer.PHYSICAL,
    AttackKind.CRACK_TK: Layer.DATA_LINK,
    AttackKind.REPLAY: Layer.DATA_LINK,
    AttackKind.MITM: Layer.DATA_LINK,
    AttackKind.DOS: Layer.DATA_LINK,
    AttackKind.HIJACK: Layer.DATA_LINK,
    AttackKind.FINGERPRINT: Layer.APPLICATION,
    AttackKind.BLUEPRINT: Layer.APPLICATION,
}


class Fact(str, Enum):
    KEY_RECOVERED = "key_recovered"
    PLAINTEXT_RECOVERED = "plaintext_recovered"
    IMPERSONATION_ACCEPTED = "impersonation_accepted"
    PAYLOAD_ALTERED_UNDETECTED = "payload_altered_undetected"
    WRITE_APPLIED_TWICE = "write_applied_twice"
    RTT_DEGRADED = "rtt_degraded"
    CONNECTION_TERMINATED = "connection_terminated"
    DEVICE_TRACKED_ACROSS_SESSIONS = "device_tracked_across_sessions"
    MODEL_IDENTIFIED = "model_identified"
    PROTECTED_WRITE_SUCCEEDED = "protected_write_succeeded"


class AttackOutcome(BaseModel):
    """
    Result of one attack run. Facts are the keys of fact_evidence, and every
    fact cites at least one capture index.
    """
    attack: AttackKind
    target: str = ""
    fact_evidence: dict[Fact, list[int]] = {}
    error: Optional[str] = None
    details: dict[str, Any] = {}

    @model_validator(mode="after")
    def _facts_have_evidence(self) -> "AttackOutcome":
        for fact, indices in self.fact_evidence.items():
            if not indices:
                raise ValueError(f"fact {fact.value} cites no capture evidence")
        return self

    @property
    def facts(self) -> set[Fact]:
        return set(self.fact_evidence)

    @property
    def evidence(self) -> list[int]:
        return sorted({i for indices in self.fact_evidence.values() for i in indices})

    @property
    def layer(self) -> Layer:
        return ATTACK_LAYERS[self.attack]


def _outcome(attack: AttackKind, target: str, evidence: dict[Fact, list[int]], **details) -> AttackOutcome:
    outcome = AttackOutcome(
        attack=attack, target=target,
        fact_evidence={fact: sorted(set(seqs)) for fact, seqs in evidence.items() if seqs},
        details=details,
    )
    logger.info("attack finished", attack=attack.value, target=target, facts=sorted(f.value for f in outcome.facts))
    return outcome


# --- CONNECTION PARAMETERS ---
class ConnectionParameters(BaseModel):
    """What a sniffer needs to follow a connection: hop law plus one known event."""
    model_config = ConfigDict(frozen=True)

    access_address: int
    interval_ms: float = Field(gt=0)
    hop_increment: int = Field(ge=1, le=DATA_CHANNEL_COUNT - 1)
    anchor_us: int        # time of a known connection event
    anchor_channel: int   # channel used at that event

    @property
    def interval_us(self) -> int:
        return round(self.interval_ms * 1000)

    @classmethod
    def from_state(cls, conn: ConnectionState) -> "ConnectionParameters":
        """Ground-truth parameters of a live connection, as a perfect sniffer would recover them."""
        return cls(
            access_address=conn.access_address, interval_ms=conn.interval_us / 1000,
            hop_increment=conn.hop_increment, anchor_us=conn.anchor_us,
            anchor_channel=conn.hop_increment % DATA_CHANNEL_COUNT,
        )

    def channel_at(self, t_us: int) -> int:
        """Channel of the latest connection event at or before t_us."""
        k = (t_us - self.anchor_us) // self.interval_us
        return (self.anchor_channel + k * self.hop_increment) % DATA_CHANNEL_COUNT

    def safe_injection_time(self, t_us: int) -> int:
        offset = (t_us - self.anchor_us) % self.interval_us
        return t_us + (INJECTION_GUARD_US - offset if offset < INJECTION_GUARD_US else 0)


class FollowSniffer(Sniffer):
    """A tap that retunes every connection event by predicting the hop sequence."""

    def __init__(self, owner, params: ConnectionParameters):
        super().__init__(owner, channels=range(DATA_CHANNEL_COUNT),
                         pdu_filter=lambda pdu: pdu.access_address == params.access_address)
        self.params = params

    def tuned(self, pdu: LinkLayerPdu, now_us: int) -> bool:
        return pdu.access_address == self.params.access_address and pdu.channel == self.params.channel_at(now_us)


# --- ATTACKER ENTITY ---
ATTACKER_CLONE_ADV_INTERVAL_MS = 100


class Attacker(Device):
    """
    An attacker radio. It is a BLE central offering just_works, with an
    always-on advertising-channel monitor; during a man-in-the-middle it can
    also act as a peripheral advertising a clone of its target.
    """

    def __init__(self, name: str, radio_class: RadioClass = RadioClass.LAPTOP, rng=None):
        profile = SecurityProfile(pairing_method=PairingMethod.JUST_WORKS, radio_class=radio_class, discoverable=False)
        super().__init__(name, profile, None, role="central", rng=rng)
        self.own_address = self.address
        self.monitor: Optional[Sniffer] = None
        self.known: dict[str, ConnectionParameters] = {}     # target name -> recovered parameters
        self.sniffed: dict[str, list[LinkLayerPdu]] = {}     # target name -> followed traffic
        self.relay: Optional["MitmRelay"] = None
        self.probe_results: dict[int, dict] = {}             # access address -> pairing features

    def on_attach(self) -> None:
        self.monitor = Sniffer(self, ADV_CHANNELS)
        self.world.attach_tap(self.monitor)

    @property
    def advertising(self) -> bool:
        return self.discoverable and not any(c.peripheral is self for c in self.active_connections())

    # --- CLONE ---
    def become_clone(self, target: Device) -> None:
        self.address = DeviceAddress(self.own_address.identity, "static", target.address.current)
        self.server = GattServer(self, clone_database(target.gatt))
        self.discoverable = True
        self.adv_interval_us = ATTACKER_CLONE_ADV_INTERVAL_MS * 1000
        self.world.schedule(self.world.clock_us, self, self._advertising_event)

    def drop_clone(self) -> None:
        self.discoverable = False
        self.address = self.own_address
        self.server = None
        self.relay = None

    def _advertising_event(self) -> None:
        if self.discoverable:
            super()._advertising_event()

    def _accept_connect_req(self, pdu: LinkLayerPdu, sender) -> None:
        before = set(id(c) for c in self.connections)
        super()._accept_connect_req(pdu, sender)
        accepted = [c for c in self.connections if id(c) not in before]
        if accepted and self.relay is not None and self.relay.clone_conn is None:
            self.relay.clone_conn = accepted[0]
            self.relay.connect_seq = pdu.meta.seq

    def serve_att(self, conn: ConnectionState, role: str, msg: AttMessage, pdu: LinkLayerPdu) -> None:
        if self.relay is not None and conn is self.relay.clone_conn:
            self.relay.forward(msg, pdu)
        else:
            super().serve_att(conn, role, msg, pdu)

    def handle_smp(self, conn: ConnectionState, role: str, payload: bytes) -> None:
        if conn.access_address in self.probe_results and payload[:1] == bytes([SmpOp.PAIRING_RESPONSE]):
            self.probe_results[conn.access_address] = decode_features(payload)
            return
        super().handle_smp(conn, role, payload)


def clone_database(db: Optional[GattDatabase]) -> GattDatabase:
    """Same services and handles as the original, with no live values."""
    if db is None:
        return GattDatabase()
    return GattDatabase(services=[
        service.model_copy(update={"characteristics": [c.model_copy(update={"value": b""}) for c in service.characteristics]})
        for service in db.services
    ])


# --- PROGRAM HELPERS ---
def _wait_for(world: World, predicate: Callable[[], bool], timeout_us: int, poll_us: int = POLL_US):
    deadline = world.clock_us + timeout_us
    while not predicate():
        if world.clock_us >= deadline:
            return False
        yield min(world.clock_us + poll_us, deadline)
    return True


def _sleep(world: World, duration_us: int):
    yield world.clock_us + max(0, int(duration_us))


def _require_range(world: World, attacker: Attacker, target: Device) -> float:
    distance = world.distance(attacker, target)
    if distance > world.range_model.max_range_m(attacker.radio_class):
        raise OutOfRange(f"{target.name} is {distance:.1f} m away, beyond {attacker.radio_class.value} range")
    return distance


def _connect(attacker: Attacker, world: World, target: Device, interval_us: int = 50_000,
             timeout_us: int = 3_000_000):
    if world.distance(attacker, target) > world.range_model.max_range_m(target.radio_class):
        raise OutOfRange(f"{target.name} cannot reach {attacker.name}")
    pending = world.connect(attacker, target, interval_us)
    found = yield from _wait_for(world, lambda: pending.established, timeout_us)
    if not found:
        attacker.cancel_connect()
        raise OutOfRange(f"no connectable advert from {target.name}")
    return pending.conn


def _pair(attacker: Attacker, world: World, conn: ConnectionState, timeout_us: int = 2_000_000):
    attacker.start_pairing(conn)
    yield from _wait_for(world, lambda: conn.pairing_result is not None or conn.closed, timeout_us)
    return conn.pairing_result == "complete"


def _request(attacker: Attacker, world: World, conn: ConnectionState, payload: bytes, timeout_us: int = 1_000_000):
    box: dict[str, tuple] = {}
    attacker.att_request(conn, payload, lambda msg, pdu: box.setdefault("rsp", (msg, pdu)))
    yield from _wait_for(world, lambda: "rsp" in box or conn.closed, timeout_us)
    return box.get("rsp")


def _printable(value: bytes, minimum: int = 4) -> bool:
    return len(value) >= minimum and all(chr(b) in string.printable for b in value)


def _plaintext_att(pdu: LinkLayerPdu) -> Optional[AttMessage]:
    if pdu.pdu_type is not PduType.DATA or not pdu.payload:
        return None
    try:
        msg = parse_att(pdu.payload)
    except ValueError:
        return None
    if msg.op in (AttOp.WRITE_REQ, AttOp.READ_RSP) and _printable(msg.value):
        return msg
    return None


def _applied_on(target: Device, world: World, access_address: int, since_seq: int) -> list:
    """Writes the target applied from requests sent on the given connection after since_seq."""
    if target.server is None:
        return []
    aa = f"{access_address:08x}"
    return [w for w in target.server.applied
            if w.seq >= since_seq and 0 <= w.seq < len(world.capture) and world.capture[w.seq].access_address == aa]


# --- SNIFF ---
def sniff_connection(tap_log: list[LinkLayerPdu], access_address: Optional[int] = None) -> ConnectionParameters:
    """
    Recovers connection parameters from a tap log.

    A captured connect_req gives them directly. Otherwise at least three
    observed connection events are needed: the interval is the gcd of event
    spacings and the hop increment follows from channel deltas.

    Raises:
        InsufficientObservations: If neither a connect_req nor three events are present.
    """
    requests = [p for p in tap_log if p.pdu_type is PduType.CONNECT_REQ]
    requests = [p for p in requests
                if access_address is None or decode_connect_req(p.payload)["access_address"] == access_address]
    if requests:
        req = requests[-1]
        fields = decode_connect_req(req.payload)
        return ConnectionParameters(
            access_address=fields["access_address"], interval_ms=fields["interval_us"] / 1000,
            hop_increment=fields["hop_increment"], anchor_us=req.meta.timestamp_us + TRANSMIT_WINDOW_US,
            anchor_channel=fields["hop_increment"] % DATA_CHANNEL_COUNT,
        )

    data = [p for p in tap_log if p.channel not in ADV_CHANNELS and p.access_address != ADV_ACCESS_ADDRESS]
    if access_address is None and data:
        counts: dict[int, int] = {}
        for pdu in data:
            counts[pdu.access_address] = counts.get(pdu.access_address, 0) + 1
        access_address = max(counts, key=lambda aa: (counts[aa], -aa))
    data = sorted((p for p in data if p.access_address == access_address and not p.meta.injected),
                  key=lambda p: p.meta.timestamp_us)
    events: list[tuple[int, int]] = []
    for pdu in data:
        if not events or pdu.meta.timestamp_us - events[-1][0] > EVENT_CLUSTER_US:
            events.append((pdu.meta.timestamp_us, pdu.channel))
    if len(events) < 3:
        raise InsufficientObservations(f"{len(events)} connection events observed, need 3")

    deltas = [b[0] - a[0] for a, b in zip(events, events[1:])]
    interval = 0
    for delta in deltas:
        interval = math.gcd(interval, delta)
    hop = None
    for (t1, c1), (t2, c2) in zip(events, events[1:]):
        steps = (t2 - t1) // interval
        if steps % DATA_CHANNEL_COUNT:
            candidate = (c2 - c1) * pow(steps, -1, DATA_CHANNEL_COUNT) % DATA_CHANNEL_COUNT
            if hop is None:
                hop = candidate
            elif candidate != hop:
                raise InsufficientObservations("channel deltas are inconsistent with one hop increment")
    if not hop:
        raise InsufficientObservations("hop increment is undetermined")
    last_time, last_channel = events[-1]
    return ConnectionParameters(access_address=access_address, interval_ms=interval / 1000,
                                hop_increment=hop, anchor_us=last_time, anchor_channel=last_channel)


def _follow(world: World, attacker: Attacker, params: ConnectionParameters, duration_us: int):
    tap = FollowSniffer(attacker, params)
    handle = world.attach_tap(tap)
    yield from _sleep(world, duration_us)
    handle.detach()
    return tap.log


def follow_connection(params: ConnectionParameters, world: World, duration_us: int,
                      attacker: Attacker) -> list[LinkLayerPdu]:
    """Follows a connection for duration_us with a predictive tap; returns what it heard."""
    return world.run_program(_follow(world, attacker, params, duration_us))


def sniff_program(attacker: Attacker, world: World, target: Device, observe_s: float = 2.0,
                  follow_s: float = 6.0) -> Program:
    _require_range(world, attacker, target)
    start_index = len(attacker.monitor.log)
    wideband = Sniffer(attacker, range(DATA_CHANNEL_COUNT),
                       pdu_filter=lambda pdu: pdu.meta.sender == target.address.current)
    handle = world.attach_tap(wideband)

    def connect_req_seen() -> Optional[LinkLayerPdu]:
        for pdu in attacker.monitor.log[start_index:]:
            if pdu.pdu_type is PduType.CONNECT_REQ and decode_connect_req(pdu.payload)["advertiser"] == target.address.current:
                return pdu
        return None

    # poll inside the transmit window so the follower is on air for the first event
    yield from _wait_for(world, lambda: connect_req_seen() is not None, int(observe_s * 1e6), poll_us=1_000)
    handle.detach()
    request = connect_req_seen()
    params = sniff_connection([request] if request else wideband.log)
    attacker.known[target.name] = params

    followed = yield from _follow(world, attacker, params, int(follow_s * 1e6))
    live = world.connections.get(params.access_address)
    if not followed and live is not None and not live.closed:
        raise LostConnection("follower heard nothing on a live connection")
    log = ([request] if request else []) + followed
    attacker.sniffed[target.name] = log
    plaintext = [p.meta.seq for p in followed if _plaintext_att(p) is not None]
    return _outcome(
        AttackKind.SNIFF, target.name, {Fact.PLAINTEXT_RECOVERED: plaintext},
        access_address=f"{params.access_address:08x}", interval_ms=params.interval_ms,
        hop_increment=params.hop_increment, pdus_followed=len(followed),
    )


def sniff(attacker: Attacker, world: World, target: Device, observe_s: float = 2.0,
          follow_s: float = 6.0) -> AttackOutcome:
    return world.run_program(sniff_program(attacker, world, target, observe_s, follow_s))


# --- CRACK ---
@dataclass
class PairingTranscript:
    access_address: int
    method: PairingMethod
    mconfirm: bytes
    sconfirm: bytes
    mrand: bytes
    srand: bytes
    seqs: list[int] = field(default_factory=list)
    encrypted_ltk: Optional[bytes] = None


def pairing_transcript(pairing_capture: list[LinkLayerPdu]) -> PairingTranscript:
    """
    Extracts the last complete plaintext pairing exchange.

    Raises:
        InsufficientObservations: If no complete exchange was captured.
    """
    by_connection: dict[int, dict] = {}
    for pdu in pairing_capture:
        if pdu.pdu_type is not PduType.SMP or not pdu.payload:
            continue
        entry = by_connection.setdefault(pdu.access_address, {"confirm": [], "random": [], "seqs": []})
        op, body = pdu.payload[0], pdu.payload[1:]
        if pdu.meta.encrypted or op not in set(SmpOp):
            entry["encrypted_ltk"] = pdu.payload
            continue
        if op == SmpOp.PAIRING_REQUEST:
            entry.update(request=decode_features(pdu.payload), confirm=[], random=[], seqs=[pdu.meta.seq])
        elif op == SmpOp.PAIRING_RESPONSE:
            entry["response"] = decode_features(pdu.payload)
            entry["seqs"].append(pdu.meta.seq)
        elif op in (SmpOp.CONFIRM, SmpOp.RANDOM) and len(body) == 16:
            entry["confirm" if op == SmpOp.CONFIRM else "random"].append(body)
            entry["seqs"].append(pdu.meta.seq)
    complete = [
        (aa, e) for aa, e in by_connection.items()
        if "request" in e and "response" in e and len(e["confirm"]) >= 2 and len(e["random"]) >= 2
    ]
    if not complete:
        raise InsufficientObservations("no complete pairing exchange in the capture")
    aa, entry = max(complete, key=lambda item: item[1]["seqs"][-1])
    return PairingTranscript(
        access_address=aa,
        method=negotiate(entry["request"]["method"], entry["response"]["method"]),
        mconfirm=entry["confirm"][0], sconfirm=entry["confirm"][1],
        mrand=entry["random"][0], srand=entry["random"][1],
        seqs=entry["seqs"], encrypted_ltk=entry.get("encrypted_ltk"),
    )


def crack_tk(pairing_capture: list[LinkLayerPdu], budget: int = PASSKEY_SPACE) -> int:
    """
    Brute-forces the temporary key of a captured legacy pairing.

    Args:
        pairing_capture (list[LinkLayerPdu]): Sniffed PDUs containing the exchange.
        budget (int): Maximum number of candidates to try.

    Returns:
        int: The TK, verified against both confirm values.

    Raises:
        InsufficientObservations: If the exchange is incomplete.
        NotCrackable: If the method is not legacy or the budget runs out.
    """
    transcript = pairing_transcript(pairing_capture)
    if not transcript.method.legacy:
        raise NotCrackable(f"{transcript.method.value} keys are outside any brute-force budget")
    space = 1 if transcript.method is PairingMethod.JUST_WORKS else PASSKEY_SPACE
    for tk in matching_tks(0x01, transcript.mrand, transcript.mconfirm, min(space, budget)):
        if confirm_value(tk, 0x02, transcript.srand) == transcript.sconfirm:
            return tk
    raise NotCrackable(f"no TK within {min(space, budget)} candidates")


def recover_keys(pairing_capture: list[LinkLayerPdu], tk: int) -> dict[str, Optional[bytes]]:
    """Derives the STK from a cracked TK and, when captured, decrypts the distributed LTK."""
    transcript = pairing_transcript(pairing_capture)
    stk = prf(tk_bytes(tk), transcript.srand + transcript.mrand)
    ltk = None
    if transcript.encrypted_ltk is not None:
        try:
            plain = decrypt_pdu(stk, 0, transcript.encrypted_ltk)
            ltk = plain[1:] if plain[:1] == bytes([SmpOp.ENCRYPTION_INFO]) else None
        except IntegrityFailure:
            ltk = None
    return {"stk": stk, "ltk": ltk}


def crack_program(attacker: Attacker, world: World, target: Device, budget: Optional[int] = None) -> Program:
    yield from ()
    capture = attacker.sniffed.get(target.name, [])
    transcript = pairing_transcript(capture)
    tk = crack_tk(capture, budget or PASSKEY_SPACE)
    keys = recover_keys(capture, tk)
    return _outcome(AttackKind.CRACK_TK, target.name, {Fact.KEY_RECOVERED: transcript.seqs},
                    method=transcript.method.value, tk=tk, ltk_recovered=keys["ltk"] is not None)


# --- REPLAY ---
def _write_to_replay(capture: list[LinkLayerPdu]) -> Optional[LinkLayerPdu]:
    initiators = {decode_connect_req(p.payload)["initiator"] for p in capture if p.pdu_type is PduType.CONNECT_REQ}
    data = [p for p in capture if p.pdu_type is PduType.DATA and p.payload]
    for pdu in data:
        msg = _plaintext_att(pdu)
        if msg is not None and msg.op is AttOp.WRITE_REQ:
            return pdu
    # Encrypted link: guess the first central payload after pairing finished
    last_smp = max((p.meta.seq for p in capture if p.pdu_type is PduType.SMP), default=-1)
    return next((p for p in data if p.meta.seq > last_smp and p.meta.sender in initiators), None)


def replay_program(attacker: Attacker, world: World, target: Optional[Device] = None,
                   delay_s: float = 6.0, capture: Optional[list[LinkLayerPdu]] = None) -> Program:
    if capture is None:
        capture = attacker.sniffed.get(target.name, []) if target is not None else []
    original = _write_to_replay(capture)
    if original is None:
        raise InsufficientObservations("no write request in the capture")
    params = attacker.known.get(target.name) if target is not None else None
    if params is None or params.access_address != original.access_address:
        params = sniff_connection(capture, original.access_address)
    if target is None:
        target = world.connections[original.access_address].peripheral
    _require_range(world, attacker, target)

    at = params.safe_injection_time(world.clock_us + int(delay_s * 1e6))
    forged = replace(original, channel=params.channel_at(at), meta=replace(original.meta, seq=-1))
    injection = world.inject(forged, attacker, at)
    yield from _sleep(world, at - world.clock_us + 4 * params.interval_us)
    injected_seq = injection.pdu.meta.seq
    applied = [w.seq for w in target.server.applied if w.seq == injected_seq] if target.server else []
    evidence = {Fact.WRITE_APPLIED_TWICE: [original.meta.seq, *applied] if applied else []}
    return _outcome(AttackKind.REPLAY, target.name, evidence,
                    original_seq=original.meta.seq, injected_seq=injected_seq, delay_s=delay_s)


def replay_write(attacker: Attacker, capture: list[LinkLayerPdu], world: World, delay_s: float,
                 target: Optional[Device] = None) -> AttackOutcome:
    """Re-injects a captured write onto its live connection after delay_s seconds."""
    return world.run_program(replay_program(attacker, world, target, delay_s, capture))


# --- MAN IN THE MIDDLE ---
def flip_last_bit(value: bytes) -> bytes:
    return value[:-1] + bytes([value[-1] ^ 0x01]) if value else b"\x01"


@dataclass(eq=False)
class MitmRelay:
    """Terminating proxy state: the clone link to the victim central and the real link to the target."""
    attacker: Attacker
    target_conn: ConnectionState
    mutate: Callable[[bytes], bytes] = flip_last_bit
    clone_conn: Optional[ConnectionState] = None
    connect_seq: int = -1
    request_seqs: list[int] = field(default_factory=list)
    mutated: list[tuple[int, bytes, bytes]] = field(default_factory=list)   # (handle, original, forwarded)

    def forward(self, msg: AttMessage, pdu: LinkLayerPdu) -> None:
        self.request_seqs.append(pdu.meta.seq)
        if self.target_conn.closed:
            return
        if msg.op is AttOp.WRITE_REQ:
            value = self.mutate(msg.value)
            self.mutated.append((msg.handle, msg.value, value))
            msg = replace(msg, value=value)
        self.attacker.att_request(self.target_conn, encode_att(msg), self._relay_back)

    def _relay_back(self, msg: AttMessage, pdu: LinkLayerPdu) -> None:
        if self.clone_conn is not None and not self.clone_conn.closed:
            self.clone_conn.outbox["peripheral"].append((PduType.DATA, encode_att(msg)))


def mitm_program(attacker: Attacker, world: World, target: Device, central: Optional[Device] = None,
                 wait_s: float = 10.0, relay_s: float = 6.0,
                 mutate: Callable[[bytes], bytes] = flip_last_bit) -> Program:
    _require_range(world, attacker, target)
    if not target.discoverable:
        raise CloneRejected(f"{target.name} is not discoverable; nothing to clone")
    target_conn = yield from _connect(attacker, world, target)
    yield from _pair(attacker, world, target_conn)

    relay = MitmRelay(attacker, target_conn, mutate)
    attacker.relay = relay
    attacker.become_clone(target)
    relay_start_seq = len(world.capture)
    try:
        yield from _wait_for(world, lambda: relay.clone_conn is not None, int(wait_s * 1e6))
        clone_conn = relay.clone_conn
        if clone_conn is None:
            raise InsufficientObservations("no central connected to the clone")
        victim = central or clone_conn.central
        yield from _wait_for(world, lambda: bool(relay.request_seqs) or clone_conn.closed, int(wait_s * 1e6))
        if clone_conn in victim.rejected_impostors:
            raise CloneRejected(f"{victim.name} holds a bond the clone cannot prove")
        yield from _sleep(world, int(relay_s * 1e6))
    finally:
        for conn in (target_conn, relay.clone_conn):
            if conn is not None and not conn.closed:
                terminate(conn, attacker)
        attacker.drop_clone()

    forwarded = {value for _, original, value in relay.mutated if value != original}
    altered = [w.seq for w in _applied_on(target, world, target_conn.access_address, relay_start_seq)
               if w.value in forwarded]
    evidence = {
        Fact.IMPERSONATION_ACCEPTED: [relay.connect_seq, *relay.request_seqs[:1]] if relay.request_seqs else [],
        Fact.PAYLOAD_ALTERED_UNDETECTED: altered,
    }
    return _outcome(AttackKind.MITM, target.name, evidence,
                    requests_relayed=len(relay.request_seqs), writes_mutated=len(relay.mutated))


def mitm_proxy(attacker: Attacker, target: Device, world: World, central: Optional[Device] = None,
               wait_s: float = 10.0, relay_s: float = 6.0,
               mutate: Callable[[bytes], bytes] = flip_last_bit) -> AttackOutcome:
    return world.run_program(mitm_program(attacker, world, target, central, wait_s, relay_s, mutate))


# --- DENIAL OF SERVICE ---
def echo_flood_program(attacker: Attacker, world: World, target: Device, size: int = 600, rate: float = 1000.0,
                       duration_s: float = 1.0, params: Optional[ConnectionParameters] = None,
                       inject: bool = False) -> Program:
    _require_range(world, attacker, target)
    if inject and params is None:
        # parameters recovered by an earlier sniff of this target
        params = attacker.known.get(target.name)
        if params is None:
            raise InsufficientObservations(f"no sniffed connection to {target.name} to inject into")
    start_seq = len(world.capture)
    payload = echo_payload(size)
    end_us = world.clock_us + int(duration_s * 1e6)
    if params is None:
        conn = yield from _connect(attacker, world, target, interval_us=max(1, round(1e6 / rate)))
        end_us = world.clock_us + int(duration_s * 1e6)
        conn.filler = lambda: (PduType.L2CAP_ECHO_REQ, payload)
        yield from _wait_for(world, lambda: conn.closed, max(0, end_us - world.clock_us))
        conn.filler = None
        if not conn.closed:
            terminate(conn, attacker)
        access_address = conn.access_address
    else:
        access_address = params.access_address
        spacing = 1e6 / rate
        for k in range(int(rate * duration_s)):
            at = params.safe_injection_time(world.clock_us + int(k * spacing))
            pdu = LinkLayerPdu(params.channel_at(at), access_address, PduType.L2CAP_ECHO_REQ, payload,
                               PduMeta(sender=attacker.address.current, timestamp_us=at))
            world.inject(pdu, attacker, at)
        yield from _sleep(world, end_us - world.clock_us + params.interval_us)

    results = [(seq, r) for aa, seq, r in target.echo.results if aa == access_address and seq >= start_seq]
    baseline = target.echo.config.base_rtt_us
    degraded = [seq for seq, r in results if r.rtt_us is not None and r.rtt_us > 2 * baseline]
    terminated = [
        rec.seq for rec in world.capture[start_seq:]
        if rec.pdu_type is PduType.TERMINATE and rec.sender == target.address.hex and rec.payload_hex == "14"
    ]
    return _outcome(
        AttackKind.DOS, target.name,
        {Fact.RTT_DEGRADED: degraded, Fact.CONNECTION_TERMINATED: terminated},
        baseline_rtt_us=baseline,
        rtt_series=[r.rtt_us for _, r in results if r.rtt_us is not None],
        accepted=sum(1 for _, r in results if r.rtt_us is not None),
        dropped=sum(1 for _, r in results if r.dropped),
        limited=sum(1 for _, r in results if r.limited),
    )


def echo_flood(attacker: Attacker, world: World, target: Device, size: int = 600, rate: float = 1000.0,
               duration_s: float = 1.0, params: Optional[ConnectionParameters] = None,
               inject: bool = False) -> AttackOutcome:
    """
    Floods the target's echo service at rate requests per second.

    With params, or with inject and parameters the attacker already sniffed,
    the requests are injected onto that connection; otherwise the attacker
    opens its own connection to the target.

    Raises:
        OutOfRange: Before anything is sent, if the target is beyond reach.
        InsufficientObservations: If inject is set and nothing was sniffed.
    """
    return world.run_program(echo_flood_program(attacker, world, target, size, rate, duration_s, params, inject))


# --- FINGERPRINT ---
class Fingerprint(BaseModel):
    model_config = ConfigDict(frozen=True)

    address: Optional[str] = None              # only for static-looking addresses
    uuid_set: tuple[str, ...] = ()
    info: Optional[dict[str, str]] = None


def _info_from(observations: list[LinkLayerPdu]) -> dict[str, str]:
    handle_uuid = {}
    pending: list[int] = []
    info: dict[str, str] = {}
    for pdu in observations:
        if pdu.pdu_type is not PduType.DATA or not pdu.payload or pdu.meta.encrypted:
            continue
        try:
            msg = parse_att(pdu.payload)
        except ValueError:
            continue
        if msg.op is AttOp.DISCOVER_RSP:
            try:
                handle_uuid.update({e.handle: e.uuid for e in decode_discover_response(pdu.payload)})
            except ValueError:
                continue
        elif msg.op is AttOp.READ_REQ:
            pending.append(msg.handle)
        elif msg.op in (AttOp.READ_RSP, AttOp.ERROR) and pending:
            handle = pending.pop(0)
            field_name = DEVICE_INFO_FIELDS.get(handle_uuid.get(handle))
            if msg.op is AttOp.READ_RSP and field_name:
                info[field_name] = msg.value.decode(errors="replace")
    return info


def fingerprint(observations: list[LinkLayerPdu]) -> Fingerprint:
    """
    Builds a fingerprint from one sighting window of one device.

    A window without adverts yields an empty fingerprint, which links to nothing.
    """
    adverts = [p for p in observations if p.pdu_type is PduType.ADV_IND]
    if not adverts:
        return Fingerprint()
    address, _ = decode_adv(adverts[0].payload)
    uuids = sorted({str(u) for p in adverts for u in decode_adv(p.payload)[1]})
    info = _info_from(observations)
    return Fingerprint(
        address=None if is_resolvable_private(address) else address.hex(),
        uuid_set=tuple(uuids),
        info=info or None,
    )


def link(f1: Fingerprint, f2: Fingerprint) -> bool:
    """Same device iff the static addresses match, or services and device info both match."""
    if f1.address is not None and f1.address == f2.address:
        return True
    return bool(f1.uuid_set) and f1.uuid_set == f2.uuid_set and f1.info is not None and f1.info == f2.info


def _sighting(attacker: Attacker, world: World, target: Device, window_s: float, connect: bool):
    start = len(attacker.monitor.log)
    addresses = {target.address.current}
    yield from _sleep(world, int(window_s * 1e6))
    addresses.add(target.address.current)
    observed = [p for p in attacker.monitor.log[start:] if p.pdu_type is PduType.ADV_IND and p.meta.sender in addresses]
    if connect and observed:
        conn = yield from _connect(attacker, world, target)
        tap = Sniffer(attacker, range(DATA_CHANNEL_COUNT), lambda pdu: pdu.access_address == conn.access_address)
        handle = world.attach_tap(tap)
        yield from _read_device_info(attacker, world, conn)
        handle.detach()
        terminate(conn, attacker)
        observed += tap.log
    return observed


def fingerprint_program(attacker: Attacker, world: World, target: Device, window_s: float = 3.0,
                        gap_s: float = 905.0, connect: bool = False) -> Program:
    first = yield from _sighting(attacker, world, target, window_s, connect)
    yield from _sleep(world, int(gap_s * 1e6))
    second = yield from _sighting(attacker, world, target, window_s, connect)
    f1, f2 = fingerprint(first), fingerprint(second)
    tracked = link(f1, f2)
    evidence = {Fact.DEVICE_TRACKED_ACROSS_SESSIONS: [first[0].meta.seq, second[0].meta.seq] if tracked else []}
    return _outcome(AttackKind.FINGERPRINT, target.name, evidence,
                    first=f1.model_dump(mode="json"), second=f2.model_dump(mode="json"))


# --- BLUEPRINT ---
class DeviceBlueprint(BaseModel):
    model: Optional[str] = None
    manufacturer: Optional[str] = None
    firmware: Optional[str] = None
    unique_id: Optional[str] = None
    service_uuids: list[str] = []

    @property
    def identified(self) -> bool:
        return any((self.model, self.manufacturer, self.firmware, self.unique_id))


def _read_device_info(attacker: Attacker, world: World, conn: ConnectionState):
    """Discovers the attribute table and reads every device-information characteristic."""
    if conn.closed:
        raise NotConnected("connection closed")
    response = yield from _request(attacker, world, conn, encode_discover())
    if response is None or response[0].op is not AttOp.DISCOVER_RSP:
        return DeviceBlueprint(), [], []
    entries = decode_discover_response(encode_att(response[0]))
    fields: dict[str, str] = {}
    evidence: list[int] = []
    for entry in entries:
        name = DEVICE_INFO_FIELDS.get(entry.uuid)
        if name is None:
            continue
        reply = yield from _request(attacker, world, conn, encode_read(entry.handle))
        if reply is not None and reply[0].op is AttOp.READ_RSP:
            fields[name] = reply[0].value.decode(errors="replace")
            evidence.append(reply[1].meta.seq)
    services = sorted({str(e.service_uuid) for e in entries})
    return DeviceBlueprint(service_uuids=services, **fields), evidence, entries


def blueprint(conn: ConnectionState) -> DeviceBlueprint:
    """
    Reads the device's identity over an open connection. Fields the device
    gates behind security it does not grant come back as None.

    Raises:
        NotConnected: If the connection is closed.
    """
    if conn.closed:
        raise NotConnected("connection closed")
    result, _, _ = conn.world.run_program(_read_device_info(conn.central, conn.world, conn))
    return result


def blueprint_program(attacker: Attacker, world: World, target: Device, pair: bool = True,
                      probe_writes: bool = True) -> Program:
    _require_range(world, attacker, target)
    conn = yield from _connect(attacker, world, target)
    if pair:
        yield from _pair(attacker, world, conn)
    start_seq = len(world.capture)
    result, evidence, entries = yield from _read_device_info(attacker, world, conn)
    probed = []
    if probe_writes and not conn.closed:
        for entry in entries:
            if Property.WRITE in entry.properties:
                freshness = Freshness("timestamp", world.clock_us // 1000)
                yield from _request(attacker, world, conn, encode_write(entry.handle, b"mode:debug", freshness))
                probed.append(entry.handle)
    sensitive = {c.handle for _, c in target.gatt.iter_characteristics() if c.sensitive} if target.gatt else set()
    protected = [w.seq for w in _applied_on(target, world, conn.access_address, start_seq) if w.handle in sensitive]
    if not conn.closed:
        terminate(conn, attacker)
    return _outcome(
        AttackKind.BLUEPRINT, target.name,
        {Fact.MODEL_IDENTIFIED: evidence if result.identified else [], Fact.PROTECTED_WRITE_SUCCEEDED: protected},
        blueprint=result.model_dump(), probed_handles=probed,
    )


# --- STUMBLE ---
class StumbleEntry(BaseModel):
    address: str
    services: list[str] = []
    static_address: bool
    no_encryption: bool = False
    just_works_only: bool = False
    probed: bool = False


def stumble_program(attacker: Attacker, world: World, target: Optional[Device] = None,
                    duration_s: float = 5.0, probe: bool = True) -> Program:
    start = len(attacker.monitor.log)
    yield from _sleep(world, int(duration_s * 1e6))
    seen: dict[bytes, list[str]] = {}
    for pdu in attacker.monitor.log[start:]:
        if pdu.pdu_type is PduType.ADV_IND and pdu.meta.sender not in seen:
            seen[pdu.meta.sender] = sorted(str(u) for u in decode_adv(pdu.payload)[1])
    entries = []
    for address, services in seen.items():
        entry = StumbleEntry(address=address.hex(), services=services, static_address=not is_resolvable_private(address))
        if probe:
            features = yield from _probe_features(attacker, world, address)
            if features is not None:
                entry = entry.model_copy(update={
                    "probed": True, "no_encryption": not features["link_encryption"],
                    "just_works_only": features["method"] is PairingMethod.JUST_WORKS,
                })
        entries.append(entry)
    logger.info("stumble finished", attacker=attacker.name, devices=len(entries))
    return entries


def _probe_features(attacker: Attacker, world: World, address: bytes):
    holder: dict[str, ConnectionState] = {}
    attacker.start_connect(lambda pdu: pdu.meta.sender == address, lambda conn: holder.setdefault("conn", conn))
    yield from _wait_for(world, lambda: "conn" in holder, 1_500_000)
    conn = holder.get("conn")
    if conn is None:
        attacker.cancel_connect()
        return None
    attacker.probe_results[conn.access_address] = {}
    conn.outbox["central"].append((PduType.SMP, encode_features(SmpOp.PAIRING_REQUEST, attacker.profile)))
    yield from _wait_for(world, lambda: bool(attacker.probe_results[conn.access_address]) or conn.closed, 1_000_000)
    if not conn.closed:
        conn.outbox["central"].append((PduType.SMP, bytes([SmpOp.PAIRING_FAILED, 0x08])))
        yield from _sleep(world, 2 * conn.interval_us)
        terminate(conn, attacker)
    return attacker.probe_results.pop(conn.access_address) or None


def stumble(attacker: Attacker, world: World, duration_s: float = 5.0, probe: bool = True) -> list[StumbleEntry]:
    """Lists every advertiser the attacker hears, flagged by the weaknesses it exposes."""
    return world.run_program(stumble_program(attacker, world, None, duration_s, probe))


def stumble_outcome_program(attacker: Attacker, world: World, target: Optional[Device] = None,
                            duration_s: float = 5.0, probe: bool = True) -> Program:
    entries = yield from stumble_program(attacker, world, target, duration_s, probe)
    return _outcome(AttackKind.STUMBLE, "", {}, entries=[e.model_dump() for e in entries])


# --- HIJACK ---
def hijack_program(attacker: Attacker, world: World, target: Device, handle: Optional[int] = None,
                   value: str = "hijacked", success_probability: float = 1.0) -> Program:
    yield from ()
    _require_range(world, attacker, target)
    params = attacker.known.get(target.name)
    if params is None:
        raise InsufficientObservations(f"no sniffed connection to {target.name}")
    conn = world.connections.get(params.access_address)
    if conn is None or conn.closed:
        raise LostConnection("the sniffed connection is gone")
    if attacker.rng.random() >= success_probability:
        return _outcome(AttackKind.HIJACK, target.name, {}, taken_over=False)

    observed = [m for m in (_plaintext_att(p) for p in attacker.sniffed.get(target.name, [])) if m is not None]
    writes = [m for m in observed if m.op is AttOp.WRITE_REQ]
    if handle is None:
        if not writes:
            raise InsufficientObservations("no write seen to imitate")
        handle = writes[0].handle
    template = writes[0] if writes else AttMessage(AttOp.WRITE_REQ)
    now_ms = world.clock_us // 1000
    freshness = {
        "timestamp": Freshness("timestamp", now_ms),
        "nonce": Freshness("nonce", attacker.rng.getrandbits(64)),
    }.get(template.freshness.kind, Freshness())

    start_seq = len(world.capture)
    hijacked = takeover(conn, attacker)
    attacker.att_request(hijacked, encode_write(handle, value.encode(), freshness, template.tag))
    yield from _sleep(world, 6 * hijacked.interval_us)
    accepted = [w.seq for w in _applied_on(target, world, hijacked.access_address, start_seq)
                if w.value == value.encode()]
    if not hijacked.closed:
        terminate(hijacked, attacker)
    return _outcome(AttackKind.HIJACK, target.name, {Fact.IMPERSONATION_ACCEPTED: accepted},
                    taken_over=True, handle=handle)


def hijack_connection(attacker: Attacker, world: World, target: Device, handle: Optional[int] = None,
                      value: str = "hijacked", success_probability: float = 1.0) -> AttackOutcome:
    return world.run_program(hijack_program(attacker, world, target, handle, value, success_probability))


# Program factory per attack kind, used by scenario runs
ATTACK_PROGRAMS: dict[AttackKind, Callable[..., Program]] = {
    AttackKind.SNIFF: sniff_program,
    AttackKind.CRACK_TK: crack_program,
    AttackKind.REPLAY: replay_program,
    AttackKind.MITM: mitm_program,
    AttackKind.DOS: echo_flood_program,
    AttackKind.FINGERPRINT: fingerprint_program,
    AttackKind.BLUEPRINT: blueprint_program,
    AttackKind.STUMBLE: stumble_outcome_program,
    AttackKind.HIJACK: hijack_program,
}
