"""
Protocol core: the BLE security surface of a simulated device.

Covers advertising and address rotation, connection state and channel
hopping, the three-phase legacy pairing procedure, link-layer encryption,
a GATT server with per-characteristic security and anti-replay checks,
and the L2CAP echo service whose queue is the denial-of-service target.

Devices only need a duck-typed `world` (see radio.World) offering
`clock_us`, `schedule`, `transmit`, `connections` and `sessions`.
"""
import hashlib
import hmac
import random
from uuid import UUID
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Callable, Iterator, Literal, Optional

import structlog
from Crypto.Cipher import AES
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import (
    ChannelViolation,
    GattError,
    InsufficientSecurity,
    IntegrityFailure,
    MessageIntegrityFailure,
    NotConnected,
    NotEncrypted,
    PairingRejected,
    PropertyViolation,
    ReplayRejected,
    StaleTimestamp,
    UnknownHandle,
)

logger = structlog.get_logger(__name__)

# --- CONSTANTS ---
ADV_CHANNELS = (37, 38, 39)
DATA_CHANNEL_COUNT = 37
ADV_ACCESS_ADDRESS = 0x8E89BED6
IFS_US = 150                 # inter-frame space between a request and its reply
TRANSMIT_WINDOW_US = 1250    # connect_req to first connection event
DEFAULT_ADV_INTERVAL_MS = 1000
DEFAULT_CONN_INTERVAL_MS = 50
DEFAULT_ROTATION_PERIOD_S = 900
MAX_ECHO_PAYLOAD = 65535

TERMINATE_USER = 0x13
TERMINATE_AUTH_FAILURE = 0x05
TERMINATE_LOW_RESOURCES = 0x14


def sig_uuid(short: int) -> UUID:
    """Expands a 16-bit Bluetooth SIG UUID onto the base UUID."""
    return UUID(f"0000{short:04x}-0000-1000-8000-00805f9b34fb")


DEVICE_INFO_SERVICE = sig_uuid(0x180A)
MODEL_NUMBER = sig_uuid(0x2A24)
SERIAL_NUMBER = sig_uuid(0x2A25)
FIRMWARE_REVISION = sig_uuid(0x2A26)
MANUFACTURER_NAME = sig_uuid(0x2A29)

# Field name on a blueprint / fingerprint for each device-information characteristic
DEVICE_INFO_FIELDS = {
    MODEL_NUMBER: "model",
    MANUFACTURER_NAME: "manufacturer",
    FIRMWARE_REVISION: "firmware",
    SERIAL_NUMBER: "unique_id",
}


# --- ENUMS ---
class PairingMethod(str, Enum):
    JUST_WORKS = "just_works"
    PASSKEY_ENTRY = "passkey_entry"
    NUMERIC_COMPARISON = "numeric_comparison"
    SECURE_CONNECTIONS = "secure_connections"

    @property
    def strength(self) -> int:
        return list(PairingMethod).index(self)

    @property
    def authenticated(self) -> bool:
        return self is not PairingMethod.JUST_WORKS

    @property
    def legacy(self) -> bool:
        """Legacy methods derive the temporary key from a small, brute-forceable space."""
        return self in (PairingMethod.JUST_WORKS, PairingMethod.PASSKEY_ENTRY)


_JW, _PK, _NC, _SC = PairingMethod
# Rows are the central's capability, columns the peripheral's.
NEGOTIATION_TABLE: dict[tuple[PairingMethod, PairingMethod], PairingMethod] = {
    (_JW, _JW): _JW, (_JW, _PK): _JW, (_JW, _NC): _JW, (_JW, _SC): _JW,
    (_PK, _JW): _JW, (_PK, _PK): _PK, (_PK, _NC): _JW, (_PK, _SC): _PK,
    (_NC, _JW): _JW, (_NC, _PK): _JW, (_NC, _NC): _NC, (_NC, _SC): _NC,
    (_SC, _JW): _JW, (_SC, _PK): _PK, (_SC, _NC): _NC, (_SC, _SC): _SC,
}


def negotiate(central: PairingMethod, peripheral: PairingMethod) -> PairingMethod:
    return NEGOTIATION_TABLE[(PairingMethod(central), PairingMethod(peripheral))]


class PairingPhase(str, Enum):
    FEATURE_EXCHANGE = "feature_exchange"
    KEY_GENERATION = "key_generation"
    KEY_DISTRIBUTION = "key_distribution"
    COMPLETE = "complete"


class SecurityLevel(str, Enum):
    OPEN = "open"
    ENCRYPTED = "encrypted"
    AUTHENTICATED = "authenticated"


class RadioClass(str, Enum):
    WEARABLE = "wearable"
    SMARTPHONE = "smartphone"
    LAPTOP = "laptop"

    @property
    def range_m(self) -> float:
        return {"wearable": 10.0, "smartphone": 10.0, "laptop": 100.0}[self.value]

    @property
    def tx_power_dbm(self) -> float:
        return {"wearable": 0.0, "smartphone": 4.0, "laptop": 20.0}[self.value]


class PduType(str, Enum):
    ADV_IND = "adv_ind"
    CONNECT_REQ = "connect_req"
    DATA = "data"
    SMP = "smp"
    L2CAP_ECHO_REQ = "l2cap_echo_req"
    L2CAP_ECHO_RSP = "l2cap_echo_rsp"
    TERMINATE = "terminate"

    @property
    def advertising(self) -> bool:
        return self in (PduType.ADV_IND, PduType.CONNECT_REQ)

    @property
    def encryptable(self) -> bool:
        return self in (PduType.DATA, PduType.SMP, PduType.L2CAP_ECHO_REQ, PduType.L2CAP_ECHO_RSP)


class Property(str, Enum):
    READ = "read"
    WRITE = "write"
    NOTIFY = "notify"


# --- PROFILE AND GATT MODELS ---
class AddressPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["static", "rotating"] = "static"
    period_s: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _default_period(cls, data):
        if isinstance(data, dict) and data.get("kind") == "rotating" and data.get("period_s") is None:
            data = {**data, "period_s": DEFAULT_ROTATION_PERIOD_S}
        return data

    @model_validator(mode="after")
    def _period_only_when_rotating(self) -> "AddressPolicy":
        if self.kind == "static" and self.period_s is not None:
            raise ValueError("period_s only applies to rotating addresses")
        return self


class AntiReplay(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["none", "timestamp", "nonce"] = "none"
    window_ms: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _default_window(cls, data):
        if isinstance(data, dict) and data.get("mode") == "timestamp" and data.get("window_ms") is None:
            data = {**data, "window_ms": 5000}
        return data

    @model_validator(mode="after")
    def _window_only_for_timestamp(self) -> "AntiReplay":
        if self.mode != "timestamp" and self.window_ms is not None:
            raise ValueError("window_ms only applies to timestamp anti-replay")
        return self


class SecurityProfile(BaseModel):
    """
    The security posture of one device. Each field maps onto one defence
    (or its absence) that the attack suite probes.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    pairing_method: PairingMethod = PairingMethod.JUST_WORKS
    link_encryption: bool = False
    address_policy: AddressPolicy = AddressPolicy()
    write_auth_required: bool = False
    anti_replay: AntiReplay = AntiReplay()
    echo_rate_limit: Optional[float] = Field(default=None, gt=0)   # requests per second
    discoverable: bool = True
    radio_class: RadioClass = RadioClass.WEARABLE
    message_integrity: bool = False
    strict_pairing: bool = False
    audit_logging: bool = False


def _coerce_uuid(value):
    # "0x2A24" / "2A24" shorthand for SIG UUIDs, anything else must be a full UUID
    if isinstance(value, int):
        return sig_uuid(value)
    if isinstance(value, str) and len(value.removeprefix("0x")) == 4:
        return sig_uuid(int(value.removeprefix("0x"), 16))
    return value


class Characteristic(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    uuid: UUID
    handle: int = Field(ge=1, le=0xFFFF)
    properties: frozenset[Property]
    security: SecurityLevel = SecurityLevel.OPEN
    value: bytes = b""
    sensitive: bool = False

    coerce_uuid = field_validator("uuid", mode="before")(_coerce_uuid)


class Service(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    uuid: UUID
    characteristics: list[Characteristic] = []

    coerce_uuid = field_validator("uuid", mode="before")(_coerce_uuid)


class GattDatabase(BaseModel):
    """Immutable attribute layout; live values are held by each device's GattServer."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    services: list[Service] = []

    @model_validator(mode="after")
    def _handles_increasing(self) -> "GattDatabase":
        handles = [c.handle for _, c in self.iter_characteristics()]
        if any(b <= a for a, b in zip(handles, handles[1:])):
            raise ValueError("characteristic handles must be unique and strictly increasing")
        return self

    def iter_characteristics(self):
        for service in self.services:
            for char in service.characteristics:
                yield service, char

    def characteristic(self, handle: int) -> Optional[Characteristic]:
        return next((c for _, c in self.iter_characteristics() if c.handle == handle), None)

    def advertised_uuids(self) -> list[UUID]:
        return [service.uuid for service in self.services]


@dataclass(frozen=True)
class DeviceAddress:
    identity: bytes          # 48-bit static identity, top two bits 0b11
    kind: Literal["static", "resolvable_private"]
    current: bytes           # what goes on the air
    epoch: int = 0           # rotation period index the current address belongs to

    @property
    def hex(self) -> str:
        return self.current.hex()


@dataclass(frozen=True)
class BondRecord:
    peer_identity: bytes
    ltk: bytes
    authenticated: bool


# --- CRYPTO PRIMITIVES ---
def prf(key: bytes, message: bytes) -> bytes:
    """Keyed 128-bit pseudo-random function used for confirms, STK and MACs."""
    return hashlib.blake2b(message, key=key, digest_size=16).digest()


def tk_bytes(tk: int) -> bytes:
    return tk.to_bytes(16, "little")


def make_static_address(rng: random.Random) -> bytes:
    raw = bytearray(rng.randbytes(6))
    raw[0] = (raw[0] & 0x3F) | 0xC0
    return bytes(raw)


def make_rpa(irk: bytes, rng: random.Random) -> bytes:
    prand = bytearray(rng.randbytes(3))
    prand[0] = (prand[0] & 0x3F) | 0x40
    return bytes(prand) + prf(irk, bytes(prand))[:3]


def is_resolvable_private(address: bytes) -> bool:
    return len(address) == 6 and address[0] >> 6 == 0b01


def resolve_address(address: bytes, irk: bytes) -> bool:
    """True iff address is a resolvable private address generated under irk."""
    if not is_resolvable_private(address):
        return False
    return hmac.compare_digest(prf(irk, address[:3])[:3], address[3:])


def encrypt_pdu(key: bytes, counter: int, plaintext: bytes) -> bytes:
    """
    Encrypts a link-layer payload and appends a 4-byte integrity tag.

    Args:
        key (bytes): 16-byte session key (STK or LTK).
        counter (int): Packet counter; doubles as the CTR nonce.
        plaintext (bytes): Payload to protect.

    Returns:
        bytes: ciphertext followed by the tag.
    """
    nonce = counter.to_bytes(8, "little")
    ciphertext = AES.new(key, AES.MODE_CTR, nonce=nonce).encrypt(plaintext)
    return ciphertext + prf(key, nonce + ciphertext)[:4]


def decrypt_pdu(key: bytes, counter: int, ciphertext: bytes) -> bytes:
    """
    Inverse of encrypt_pdu.

    Raises:
        IntegrityFailure: If the tag does not verify for this key and counter.
    """
    if len(ciphertext) < 4:
        raise IntegrityFailure("ciphertext shorter than the tag")
    nonce = counter.to_bytes(8, "little")
    body, tag = ciphertext[:-4], ciphertext[-4:]
    if not hmac.compare_digest(prf(key, nonce + body)[:4], tag):
        raise IntegrityFailure("link tag mismatch")
    return AES.new(key, AES.MODE_CTR, nonce=nonce).decrypt(body)


# --- LINK LAYER ---
@dataclass(frozen=True)
class PduMeta:
    sender: bytes            # claimed 6-byte address
    timestamp_us: int
    rssi_dbm: float = 0.0
    encrypted: bool = False
    seq: int = -1            # capture index, stamped by the world on transmission
    injected: bool = False


@dataclass(frozen=True)
class LinkLayerPdu:
    channel: int
    access_address: int
    pdu_type: PduType
    payload: bytes
    meta: PduMeta

    def __post_init__(self):
        if self.pdu_type.advertising:
            if self.channel not in ADV_CHANNELS:
                raise ChannelViolation(f"{self.pdu_type.value} on data channel {self.channel}")
        elif not 0 <= self.channel < DATA_CHANNEL_COUNT:
            raise ChannelViolation(f"{self.pdu_type.value} on channel {self.channel}")


@dataclass(eq=False)
class ConnectionState:
    """Shared link state of one connection; both endpoints hold the same object."""
    access_address: int
    interval_us: int
    hop_increment: int
    central: "Device" = field(repr=False)
    peripheral: "Device" = field(repr=False)
    channel_index: int = 0           # channel of the latest connection event
    event_counter: int = 0
    anchor_us: int = 0               # time of the first connection event
    next_event_us: int = 0
    encryption_key: Optional[bytes] = field(default=None, repr=False)
    packet_counter: int = 0
    rx_counter: int = 0
    authenticated: bool = False
    bond: Optional[BondRecord] = field(default=None, repr=False)
    pairing: Optional["PairingSession"] = field(default=None, repr=False)
    pairing_result: Optional[Literal["complete", "failed"]] = None
    closed: bool = False
    close_reason: Optional[int] = None
    outbox: dict = field(default_factory=lambda: {"central": deque(), "peripheral": deque()}, repr=False)
    pending: dict = field(default_factory=lambda: {"central": deque(), "peripheral": deque()}, repr=False)
    on_paired: list = field(default_factory=list, repr=False)
    filler: Optional[Callable[[], tuple]] = field(default=None, repr=False)
    central_has_key: bool = True     # false after a takeover: the new central never learnt the key

    @property
    def interval_ms(self) -> float:
        return self.interval_us / 1000

    @property
    def world(self):
        return self.peripheral.world

    def role_of(self, device: "Device") -> str:
        return "central" if device is self.central else "peripheral"

    def peer_of(self, device: "Device") -> "Device":
        return self.peripheral if device is self.central else self.central


def next_channel(state: ConnectionState) -> int:
    """Advances the connection one event and returns its data channel."""
    state.channel_index = (state.channel_index + state.hop_increment) % DATA_CHANNEL_COUNT
    state.event_counter += 1
    return state.channel_index


def start_encryption(conn: ConnectionState, key: bytes) -> None:
    conn.encryption_key = key
    conn.packet_counter = 0
    conn.rx_counter = 0


def stop_encryption(conn: ConnectionState) -> None:
    conn.encryption_key = None
    conn.packet_counter = 0
    conn.rx_counter = 0


def connection_event(conn: ConnectionState) -> None:
    """
    One connection event: hop, let the central transmit, then give the
    peripheral its reply slot one inter-frame space later.
    """
    if conn.closed:
        return
    world = conn.world
    now = world.clock_us
    channel = next_channel(conn)
    kind, payload = conn.central.next_outgoing(conn, "central")
    send_on_connection(conn, "central", kind, payload, channel)
    if conn.closed:
        return
    world.schedule(now + IFS_US, conn.peripheral, lambda: _peripheral_slot(conn, channel))
    conn.next_event_us = now + conn.interval_us
    world.schedule(conn.next_event_us, conn.central, lambda: connection_event(conn))


def _peripheral_slot(conn: ConnectionState, channel: int) -> None:
    if conn.closed or conn.channel_index != channel:
        return
    outgoing = conn.peripheral.next_outgoing(conn, "peripheral")
    if outgoing is not None:
        send_on_connection(conn, "peripheral", *outgoing, channel)


def send_on_connection(conn: ConnectionState, role: str, kind: PduType, payload: bytes, channel: int) -> LinkLayerPdu:
    sender = conn.central if role == "central" else conn.peripheral
    encrypted = False
    if conn.encryption_key is not None and payload and kind.encryptable and (role == "peripheral" or conn.central_has_key):
        payload = encrypt_pdu(conn.encryption_key, conn.packet_counter, payload)
        conn.packet_counter += 1
        encrypted = True
    pdu = LinkLayerPdu(
        channel, conn.access_address, kind, payload,
        PduMeta(sender=sender.address.current, timestamp_us=conn.world.clock_us, encrypted=encrypted),
    )
    stamped = conn.world.transmit(pdu, sender)
    if kind is PduType.TERMINATE:
        close_connection(conn, payload[0] if payload else TERMINATE_USER)
    return stamped


def close_connection(conn: ConnectionState, reason: int = TERMINATE_USER) -> None:
    if conn.closed:
        return
    conn.closed = True
    conn.close_reason = reason
    logger.info("connection terminated", access_address=f"{conn.access_address:08x}", reason=f"0x{reason:02x}")


def terminate(conn: ConnectionState, device: "Device", reason: int = TERMINATE_USER) -> None:
    """Sends an LL terminate from device on the current channel and closes the link."""
    if conn.closed:
        return
    if conn.world is None:
        close_connection(conn, reason)
        return
    send_on_connection(conn, conn.role_of(device), PduType.TERMINATE, bytes([reason]), conn.channel_index)


# --- ADVERTISING AND ADDRESSES ---
def encode_adv(address: bytes, uuids: list[UUID]) -> bytes:
    return address + bytes([len(uuids)]) + b"".join(u.bytes_le for u in uuids)


def decode_adv(payload: bytes) -> tuple[bytes, list[UUID]]:
    if len(payload) < 7 or len(payload) != 7 + 16 * payload[6]:
        raise ValueError("malformed adv_ind payload")
    uuids = [UUID(bytes_le=payload[7 + 16 * i: 23 + 16 * i]) for i in range(payload[6])]
    return payload[:6], uuids


def encode_connect_req(initiator: bytes, advertiser: bytes, access_address: int, interval_us: int, hop: int) -> bytes:
    return initiator + advertiser + access_address.to_bytes(4, "little") + interval_us.to_bytes(4, "little") + bytes([hop])


def decode_connect_req(payload: bytes) -> dict:
    if len(payload) != 21:
        raise ValueError("malformed connect_req payload")
    return {
        "initiator": payload[:6],
        "advertiser": payload[6:12],
        "access_address": int.from_bytes(payload[12:16], "little"),
        "interval_us": int.from_bytes(payload[16:20], "little"),
        "hop_increment": payload[20],
    }


def advertise(device: "Device", now: int) -> Optional[LinkLayerPdu]:
    """
    Builds the device's advertising PDU.

    Args:
        device (Device): The advertiser.
        now (int): Current time in microseconds.

    Returns:
        LinkLayerPdu | None: adv_ind on channel 37 carrying the current address and
        service UUIDs, or None when the device is not discoverable or is connected.
    """
    if not device.advertising:
        return None
    payload = encode_adv(device.address.current, device.advertised_uuids())
    return LinkLayerPdu(37, ADV_ACCESS_ADDRESS, PduType.ADV_IND, payload,
                        PduMeta(sender=device.address.current, timestamp_us=now))


def rotate_address(device: "Device", now: int) -> DeviceAddress:
    """
    Moves a rotating device onto a fresh resolvable private address when a
    period boundary has passed. Static devices are returned unchanged.
    """
    policy = device.profile.address_policy
    if policy.kind == "static":
        return device.address
    epoch = now // (policy.period_s * 1_000_000)
    if epoch != device.address.epoch:
        device.address = replace(device.address, current=make_rpa(device.irk, device.rng), epoch=epoch)
        logger.debug("address rotated", device=device.name, address=device.address.hex)
    return device.address


# --- PAIRING ---
@dataclass(eq=False)
class PairingSession:
    central: "Device" = field(repr=False)
    peripheral: "Device" = field(repr=False)
    method: PairingMethod
    phase: PairingPhase = PairingPhase.FEATURE_EXCHANGE
    tk: Optional[int] = field(default=None, repr=False)
    mrand: Optional[bytes] = None
    srand: Optional[bytes] = None
    mconfirm: Optional[bytes] = None
    sconfirm: Optional[bytes] = None
    stk: Optional[bytes] = field(default=None, repr=False)
    ltk: Optional[bytes] = field(default=None, repr=False)
    conn: Optional[ConnectionState] = field(default=None, repr=False)


def initiate_pairing(central: "Device", peripheral: "Device") -> PairingSession:
    """
    Feature exchange: negotiates the method and draws the temporary key.

    Legacy just_works uses TK = 0 and passkey entry a six-digit passkey; the
    LE secure methods stand in for an ECDH-derived 128-bit secret.

    Raises:
        PairingRejected: If the peripheral insists on its own method and the
            negotiated one is weaker.
    """
    method = negotiate(central.profile.pairing_method, peripheral.profile.pairing_method)
    if peripheral.profile.strict_pairing and method.strength < peripheral.profile.pairing_method.strength:
        logger.info("pairing rejected", peripheral=peripheral.name, method=method.value)
        raise PairingRejected(f"{peripheral.name} refuses {method.value}")
    if method is PairingMethod.JUST_WORKS:
        tk = 0
    elif method is PairingMethod.PASSKEY_ENTRY:
        tk = peripheral.rng.randrange(1_000_000)
    else:
        tk = peripheral.rng.getrandbits(128)
    session = PairingSession(central=central, peripheral=peripheral, method=method, tk=tk)
    world = peripheral.world or central.world
    if world is not None:
        world.sessions.append(session)
    return session


def confirm_value(tk: int, role_tag: int, rand: bytes) -> bytes:
    return prf(tk_bytes(tk), bytes([role_tag]) + rand)


def matching_tks(role_tag: int, rand: bytes, confirm: bytes, space: int) -> Iterator[int]:
    """
    Yields every TK below space whose confirm_value(tk, role_tag, rand) equals confirm.

    Equivalent to confirm_value per candidate; the message is built once and
    each candidate costs a single hash call.
    """
    message = bytes([role_tag]) + rand
    blake2b = hashlib.blake2b
    for tk in range(space):
        if blake2b(message, key=tk.to_bytes(16, "little"), digest_size=16).digest() == confirm:
            yield tk


def derive_stk(session: PairingSession) -> PairingSession:
    """Key generation: exchanges randoms and confirms and derives the STK."""
    session.mrand = session.central.rng.randbytes(16)
    session.srand = session.peripheral.rng.randbytes(16)
    session.mconfirm = confirm_value(session.tk, 0x01, session.mrand)
    session.sconfirm = confirm_value(session.tk, 0x02, session.srand)
    session.stk = prf(tk_bytes(session.tk), session.srand + session.mrand)
    session.phase = PairingPhase.KEY_GENERATION
    return session


def distribute_ltk(session: PairingSession) -> BondRecord:
    """
    Key distribution: the peripheral generates the LTK, which travels under
    STK encryption, and both sides store a bond.

    Raises:
        NotEncrypted: If the link is not encrypted with this session's STK.
    """
    conn = session.conn
    if session.stk is None or conn is None or conn.encryption_key != session.stk:
        raise NotEncrypted("start encryption with the STK before distributing the LTK")
    session.phase = PairingPhase.KEY_DISTRIBUTION
    session.ltk = session.peripheral.rng.randbytes(16)
    authenticated = session.method.authenticated
    central_bond = BondRecord(session.peripheral.address.identity, session.ltk, authenticated)
    session.central.bonds[session.peripheral.address.identity] = central_bond
    session.peripheral.bonds[session.central.address.identity] = BondRecord(
        session.central.address.identity, session.ltk, authenticated
    )
    session.phase = PairingPhase.COMPLETE
    return central_bond


def provision_bond(central: "Device", peripheral: "Device", authenticated: bool = True) -> BondRecord:
    """Stores a bond on both devices as if they had paired before the scenario began."""
    ltk = peripheral.rng.randbytes(16)
    peripheral.bonds[central.address.identity] = BondRecord(central.address.identity, ltk, authenticated)
    bond = BondRecord(peripheral.address.identity, ltk, authenticated)
    central.bonds[peripheral.address.identity] = bond
    return bond


class SmpOp(IntEnum):
    PAIRING_REQUEST = 0x01
    PAIRING_RESPONSE = 0x02
    CONFIRM = 0x03
    RANDOM = 0x04
    PAIRING_FAILED = 0x05
    ENCRYPTION_INFO = 0x06


METHOD_CODES = {method: code for code, method in enumerate(PairingMethod)}


def encode_features(op: SmpOp, profile: SecurityProfile) -> bytes:
    flags = (profile.link_encryption << 0) | (1 << 1) | (profile.pairing_method.authenticated << 2)
    return bytes([op, METHOD_CODES[profile.pairing_method], flags])


def decode_features(payload: bytes) -> dict:
    if len(payload) != 3:
        raise ValueError("malformed pairing feature PDU")
    return {
        "method": list(PairingMethod)[payload[1]],
        "link_encryption": bool(payload[2] & 0x01),
        "bonding": bool(payload[2] & 0x02),
        "mitm": bool(payload[2] & 0x04),
    }


# --- ATT ENCODING ---
class AttOp(IntEnum):
    ERROR = 0x01
    DISCOVER_REQ = 0x10
    DISCOVER_RSP = 0x11
    READ_REQ = 0x0A
    READ_RSP = 0x0B
    WRITE_REQ = 0x12
    WRITE_RSP = 0x13


REQUEST_OPS = (AttOp.DISCOVER_REQ, AttOp.READ_REQ, AttOp.WRITE_REQ)
_FRESHNESS_KINDS = {"none": 0, "timestamp": 1, "nonce": 2}
_PROPERTY_BITS = {Property.READ: 0x02, Property.WRITE: 0x08, Property.NOTIFY: 0x10}
_SECURITY_CODES = {level: code for code, level in enumerate(SecurityLevel)}


@dataclass(frozen=True)
class Freshness:
    kind: Literal["none", "timestamp", "nonce"] = "none"
    value: int = 0

    def encode(self) -> bytes:
        return b"" if self.kind == "none" else self.value.to_bytes(8, "little")


@dataclass(frozen=True)
class AttMessage:
    op: AttOp
    handle: int = 0
    value: bytes = b""
    freshness: Freshness = Freshness()
    tag: Optional[bytes] = None
    request_op: Optional[int] = None
    error_code: Optional[int] = None


def app_mac(app_key: bytes, handle: int, freshness: Freshness, value: bytes) -> bytes:
    return prf(app_key, handle.to_bytes(2, "little") + freshness.encode() + value)[:4]


def encode_write(handle: int, value: bytes, freshness: Freshness = Freshness(), tag: Optional[bytes] = None) -> bytes:
    flags = _FRESHNESS_KINDS[freshness.kind] | (0x80 if tag is not None else 0)
    return bytes([AttOp.WRITE_REQ]) + handle.to_bytes(2, "little") + bytes([flags]) + freshness.encode() + value + (tag or b"")


def encode_read(handle: int) -> bytes:
    return bytes([AttOp.READ_REQ]) + handle.to_bytes(2, "little")


def encode_discover() -> bytes:
    return bytes([AttOp.DISCOVER_REQ])


def encode_error(request_op: int, handle: int, code: int) -> bytes:
    return bytes([AttOp.ERROR, request_op]) + handle.to_bytes(2, "little") + bytes([code])


def encode_att(msg: AttMessage) -> bytes:
    """Re-encodes a parsed ATT message; used by relays that forward what they receive."""
    if msg.op is AttOp.WRITE_REQ:
        return encode_write(msg.handle, msg.value, msg.freshness, msg.tag)
    if msg.op is AttOp.READ_REQ:
        return encode_read(msg.handle)
    if msg.op is AttOp.ERROR:
        return encode_error(msg.request_op, msg.handle, msg.error_code)
    if msg.op in (AttOp.READ_RSP, AttOp.DISCOVER_RSP):
        return bytes([msg.op]) + msg.value
    return bytes([msg.op])


def encode_discover_response(db: GattDatabase) -> bytes:
    out = bytearray([AttOp.DISCOVER_RSP])
    for service, char in db.iter_characteristics():
        props = sum(_PROPERTY_BITS[p] for p in char.properties)
        out += service.uuid.bytes_le + char.handle.to_bytes(2, "little")
        out += bytes([props, _SECURITY_CODES[char.security]]) + char.uuid.bytes_le
    return bytes(out)


@dataclass(frozen=True)
class DiscoveredCharacteristic:
    service_uuid: UUID
    handle: int
    properties: frozenset
    security: SecurityLevel
    uuid: UUID


def decode_discover_response(payload: bytes) -> list[DiscoveredCharacteristic]:
    body = payload[1:]
    if payload[:1] != bytes([AttOp.DISCOVER_RSP]) or len(body) % 36:
        raise ValueError("malformed discovery response")
    entries = []
    for offset in range(0, len(body), 36):
        chunk = body[offset: offset + 36]
        entries.append(DiscoveredCharacteristic(
            service_uuid=UUID(bytes_le=chunk[:16]),
            handle=int.from_bytes(chunk[16:18], "little"),
            properties=frozenset(p for p, bit in _PROPERTY_BITS.items() if chunk[18] & bit),
            security=list(SecurityLevel)[chunk[19]],
            uuid=UUID(bytes_le=chunk[20:36]),
        ))
    return entries


def parse_att(payload: bytes) -> AttMessage:
    """
    Decodes an ATT PDU.

    Raises:
        ValueError: If the opcode is unknown or the PDU is truncated.
    """
    if not payload:
        raise ValueError("empty ATT PDU")
    op = AttOp(payload[0])
    if op is AttOp.WRITE_REQ:
        if len(payload) < 4:
            raise ValueError("truncated write request")
        flags = payload[3]
        kind = {v: k for k, v in _FRESHNESS_KINDS.items()}.get(flags & 0x03)
        if kind is None:
            raise ValueError("unknown freshness kind")
        body = payload[4:]
        freshness = Freshness()
        if kind != "none":
            if len(body) < 8:
                raise ValueError("truncated freshness field")
            freshness = Freshness(kind, int.from_bytes(body[:8], "little"))
            body = body[8:]
        tag = None
        if flags & 0x80:
            if len(body) < 4:
                raise ValueError("truncated message tag")
            body, tag = body[:-4], body[-4:]
        return AttMessage(op, int.from_bytes(payload[1:3], "little"), body, freshness, tag)
    if op is AttOp.READ_REQ:
        if len(payload) != 3:
            raise ValueError("malformed read request")
        return AttMessage(op, int.from_bytes(payload[1:3], "little"))
    if op is AttOp.ERROR:
        if len(payload) != 5:
            raise ValueError("malformed error response")
        return AttMessage(op, int.from_bytes(payload[2:4], "little"), request_op=payload[1], error_code=payload[4])
    if op in (AttOp.READ_RSP, AttOp.DISCOVER_RSP):
        return AttMessage(op, value=payload[1:])
    return AttMessage(op)


# --- GATT SERVER ---
@dataclass(frozen=True)
class GattResult:
    value: bytes
    applied: bool = False


@dataclass(frozen=True)
class AppliedWrite:
    handle: int
    value: bytes
    time_us: int
    seq: int                 # capture index of the request that caused it
    peer: str                # claimed address of the writer
    attributed: bool         # recorded in the audit log


class GattServer:
    """Live attribute values and freshness state of one peripheral."""

    def __init__(self, device: "Device", db: GattDatabase):
        self.device = device
        self.db = db
        self.values = {char.handle: char.value for _, char in db.iter_characteristics()}
        self.last_timestamp_ms: Optional[int] = None
        self.seen_nonces: set[int] = set()
        self.applied: list[AppliedWrite] = []
        self.audit_log: list[AppliedWrite] = []

    def handle(self, conn: ConnectionState, op: Literal["read", "write"], handle: int, value: Optional[bytes] = None,
               freshness: Freshness = Freshness(), tag: Optional[bytes] = None, now_ms: int = 0,
               seq: int = -1, peer: str = "") -> GattResult:
        profile = self.device.profile
        char = self.db.characteristic(handle)
        if char is None:
            raise UnknownHandle(f"no attribute at 0x{handle:04x}", handle)
        if op == "read" and Property.READ not in char.properties:
            raise PropertyViolation("characteristic is not readable", handle, att_code=0x02)
        if op == "write" and Property.WRITE not in char.properties:
            raise PropertyViolation("characteristic is not writable", handle, att_code=0x03)

        encrypted = conn.encryption_key is not None
        if char.security is SecurityLevel.ENCRYPTED and not encrypted:
            raise InsufficientSecurity("encryption required", handle, att_code=0x0F)
        if char.security is SecurityLevel.AUTHENTICATED and not (encrypted and conn.authenticated):
            raise InsufficientSecurity("authenticated encryption required", handle, att_code=0x05)
        if op == "read":
            return GattResult(self.values[handle])

        if profile.write_auth_required and not conn.authenticated:
            raise InsufficientSecurity("writes need an authenticated pairing", handle, att_code=0x05)
        value = value or b""
        if profile.message_integrity:
            expected = app_mac(self.device.app_key, handle, freshness, value)
            if tag is None or not hmac.compare_digest(expected, tag):
                raise MessageIntegrityFailure("application MAC mismatch", handle)
        self._check_freshness(freshness, now_ms, handle)

        self.values[handle] = value
        record = AppliedWrite(handle, value, now_ms * 1000, seq, peer, profile.audit_logging)
        self.applied.append(record)
        if profile.audit_logging:
            self.audit_log.append(record)
        return GattResult(value, applied=True)

    def _check_freshness(self, freshness: Freshness, now_ms: int, handle: int) -> None:
        policy = self.device.profile.anti_replay
        if policy.mode == "timestamp":
            if freshness.kind != "timestamp" or abs(now_ms - freshness.value) > policy.window_ms:
                logger.info("stale write rejected", device=self.device.name, handle=handle)
                raise StaleTimestamp("timestamp missing or outside the acceptance window", handle)
            if self.last_timestamp_ms is not None and freshness.value <= self.last_timestamp_ms:
                logger.info("replayed write rejected", device=self.device.name, handle=handle)
                raise ReplayRejected("timestamp not newer than the last accepted write", handle)
            self.last_timestamp_ms = freshness.value
        elif policy.mode == "nonce":
            if freshness.kind != "nonce" or freshness.value in self.seen_nonces:
                logger.info("replayed write rejected", device=self.device.name, handle=handle)
                raise ReplayRejected("nonce missing or already used", handle)
            self.seen_nonces.add(freshness.value)


def gatt_request(conn: ConnectionState, op: Literal["read", "write"], handle: int, value: Optional[bytes] = None,
                 *, freshness: Freshness = Freshness(), tag: Optional[bytes] = None,
                 now_ms: Optional[int] = None, seq: int = -1) -> GattResult:
    """
    Serves one GATT read or write against the connection's peripheral.

    Checks run in a fixed order: handle, property, security level, write
    authentication, message MAC, freshness. A rejected write leaves the
    attribute and the freshness state untouched.

    Raises:
        NotConnected: If the connection is closed.
        GattError: The first failing check.
    """
    if conn.closed:
        raise NotConnected("connection closed")
    server = conn.peripheral.server
    if server is None:
        raise UnknownHandle("peer has no GATT database", handle)
    if now_ms is None:
        now_ms = conn.world.clock_us // 1000 if conn.world is not None else 0
    return server.handle(conn, op, handle, value, freshness, tag, now_ms, seq, conn.central.address.hex)


# --- L2CAP ECHO ---
class EchoQueueConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    capacity: int = Field(default=32, ge=1)
    per_item_us: int = Field(default=100, ge=0)
    per_byte_us: int = Field(default=1, ge=0)
    base_rtt_us: int = Field(default=2000, ge=1)
    drop_threshold: int = Field(default=64, ge=1)
    service_interval_us: int = Field(default=50_000, ge=1)


@dataclass(frozen=True)
class EchoResult:
    rtt_us: Optional[int]
    dropped: bool = False
    limited: bool = False
    queue_depth: int = 0


def echo_payload(size: int) -> bytes:
    return bytes((i % 255) + 1 for i in range(size))


class EchoService:
    """Bounded echo queue serviced at a fixed rate; sustained drops exhaust the device."""

    def __init__(self, device: "Device", config: EchoQueueConfig):
        self.device = device
        self.config = config
        self.queue: deque = deque()
        # accepted requests in between do not reset it; only an empty queue does
        self.drops_since_empty = 0
        self.last_accepted_us: Optional[int] = None
        self.draining = False
        self.results: list[tuple[int, int, EchoResult]] = []   # (access_address, seq, result)

    def request(self, conn: ConnectionState, size: int, now: int, seq: int = -1) -> EchoResult:
        if conn.closed:
            raise NotConnected("connection closed")
        if not 0 <= size <= MAX_ECHO_PAYLOAD:
            raise ValueError(f"echo payload of {size} bytes")
        cfg = self.config
        limit = self.device.profile.echo_rate_limit
        if limit is not None and self.last_accepted_us is not None and now - self.last_accepted_us < 1_000_000 / limit:
            result = EchoResult(None, limited=True, queue_depth=len(self.queue))
        elif len(self.queue) >= cfg.capacity:
            self.drops_since_empty += 1
            result = EchoResult(None, dropped=True, queue_depth=len(self.queue))
            if self.drops_since_empty == cfg.drop_threshold:
                logger.warning("echo queue exhausted", device=self.device.name, drops=self.drops_since_empty)
                self.device.terminate_all(TERMINATE_LOW_RESOURCES)
        else:
            depth = len(self.queue)
            result = EchoResult(cfg.base_rtt_us + depth * (cfg.per_item_us + cfg.per_byte_us * size), queue_depth=depth)
            self.queue.append((conn, size))
            self.last_accepted_us = now
            if not self.draining and self.device.world is not None:
                self.draining = True
                self.device.world.schedule(now + cfg.service_interval_us, self.device, self._drain)
        self.results.append((conn.access_address, seq, result))
        return result

    def _drain(self) -> None:
        conn, size = self.queue.popleft()
        if not conn.closed:
            conn.outbox[conn.role_of(self.device)].append((PduType.L2CAP_ECHO_RSP, echo_payload(size)))
        if self.queue:
            self.device.world.schedule(self.device.world.clock_us + self.config.service_interval_us, self.device, self._drain)
        else:
            self.draining = False
            self.drops_since_empty = 0


def l2cap_echo(conn: ConnectionState, payload_size: int, now: int, victim: Optional["Device"] = None) -> EchoResult:
    """Queues an echo request at the victim (the peripheral by default) and reports the modelled RTT."""
    victim = victim or conn.peripheral
    return victim.echo.request(conn, payload_size, now)


# --- DEVICE ---
@dataclass
class PendingConnect:
    matcher: Callable[[LinkLayerPdu], bool]
    interval_us: int
    on_connected: Callable[[ConnectionState], None]


class Device:
    """
    A BLE endpoint in the world: a wearable peripheral, a smartphone central,
    or (via attacks.Attacker) an attacker radio.

    The link-layer and SMP state machines live here; application behaviour
    (CompanionApp, attack programs) drives them through connect, pair and
    att_request.
    """

    def __init__(self, name: str, profile: SecurityProfile, gatt: Optional[GattDatabase] = None, *,
                 role: Literal["peripheral", "central"] = "peripheral", rng: Optional[random.Random] = None,
                 adv_interval_ms: int = DEFAULT_ADV_INTERVAL_MS, echo_config: Optional[EchoQueueConfig] = None):
        self.name = name
        self.profile = profile
        self.role = role
        self.rng = rng or random.Random(name)
        self.irk = self.rng.randbytes(16)
        self.app_key = self.rng.randbytes(16)
        identity = make_static_address(self.rng)
        self.address = DeviceAddress(identity, "static", identity)
        if profile.address_policy.kind == "rotating":
            self.address = DeviceAddress(identity, "resolvable_private", make_rpa(self.irk, self.rng), 0)
        self.server = GattServer(self, gatt) if gatt is not None else None
        self.echo = EchoService(self, echo_config or EchoQueueConfig())
        self.adv_interval_us = adv_interval_ms * 1000
        self.discoverable = profile.discoverable and role == "peripheral"
        self.bonds: dict[bytes, BondRecord] = {}
        self.connections: list[ConnectionState] = []
        self.rejected_impostors: list[ConnectionState] = []
        self._pending_connect: Optional[PendingConnect] = None
        # Set when placed in a world
        self.world = None
        self.entity_id = -1
        self.position = (0.0, 0.0)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, {self.address.hex})"

    @property
    def radio_class(self) -> RadioClass:
        return self.profile.radio_class

    @property
    def gatt(self) -> Optional[GattDatabase]:
        return self.server.db if self.server else None

    def advertised_uuids(self) -> list[UUID]:
        return self.gatt.advertised_uuids() if self.gatt else []

    def active_connections(self) -> list[ConnectionState]:
        return [c for c in self.connections if not c.closed]

    @property
    def advertising(self) -> bool:
        return self.discoverable and not self.active_connections()

    def device_info(self) -> dict[str, str]:
        """Ground-truth device-information strings from the GATT values."""
        info = {}
        if self.server:
            for _, char in self.server.db.iter_characteristics():
                if char.uuid in DEVICE_INFO_FIELDS:
                    info[DEVICE_INFO_FIELDS[char.uuid]] = self.server.values[char.handle].decode(errors="replace")
        return info

    # --- WORLD HOOKS ---
    def on_attach(self) -> None:
        if self.role == "peripheral":
            first = self.world.clock_us + self.rng.randrange(self.adv_interval_us)
            self.world.schedule(first, self, self._advertising_event)

    def _advertising_event(self) -> None:
        now = self.world.clock_us
        rotate_address(self, now)
        pdu = advertise(self, now)
        if pdu is not None:
            for channel in ADV_CHANNELS:
                self.world.transmit(replace(pdu, channel=channel), self)
        self.world.schedule(now + self.adv_interval_us, self, self._advertising_event)

    def listens(self, pdu: LinkLayerPdu) -> bool:
        if pdu.channel in ADV_CHANNELS:
            return self._pending_connect is not None or self.advertising
        return any(
            c.access_address == pdu.access_address and c.channel_index == pdu.channel
            for c in self.active_connections()
        )

    def receive(self, pdu: LinkLayerPdu, sender) -> None:
        if pdu.pdu_type is PduType.ADV_IND:
            pending = self._pending_connect
            if pending is not None and pending.matcher(pdu):
                self.world.schedule(self.world.clock_us + IFS_US, self, lambda: self._send_connect_req(pdu))
        elif pdu.pdu_type is PduType.CONNECT_REQ:
            self._accept_connect_req(pdu, sender)
        else:
            conn = next((c for c in self.active_connections() if c.access_address == pdu.access_address), None)
            if conn is not None:
                self._receive_on_connection(conn, pdu)

    # --- CONNECTION ESTABLISHMENT ---
    def start_connect(self, matcher: Callable[[LinkLayerPdu], bool], on_connected: Callable[[ConnectionState], None],
                      interval_us: int = DEFAULT_CONN_INTERVAL_MS * 1000) -> None:
        """Connects to the next advertiser accepted by matcher."""
        self._pending_connect = PendingConnect(matcher, interval_us, on_connected)

    def cancel_connect(self) -> None:
        self._pending_connect = None

    def _send_connect_req(self, adv: LinkLayerPdu) -> None:
        pending = self._pending_connect
        if pending is None:
            return
        access_address = self.rng.getrandbits(32)
        while access_address == ADV_ACCESS_ADDRESS or access_address in self.world.connections:
            access_address = self.rng.getrandbits(32)
        hop = self.rng.randint(5, 16)
        payload = encode_connect_req(self.address.current, adv.meta.sender, access_address, pending.interval_us, hop)
        pdu = LinkLayerPdu(adv.channel, ADV_ACCESS_ADDRESS, PduType.CONNECT_REQ, payload,
                           PduMeta(sender=self.address.current, timestamp_us=self.world.clock_us))
        self.world.transmit(pdu, self)
        conn = self.world.connections.get(access_address)
        if conn is None or conn.central is not self:
            return   # not heard; keep waiting for the next advert
        self._pending_connect = None
        pending.on_connected(conn)

    def _accept_connect_req(self, pdu: LinkLayerPdu, sender) -> None:
        if not self.advertising:
            return
        try:
            fields = decode_connect_req(pdu.payload)
        except ValueError:
            return
        if fields["advertiser"] != self.address.current or fields["access_address"] in self.world.connections:
            return
        anchor = self.world.clock_us + TRANSMIT_WINDOW_US
        conn = ConnectionState(
            access_address=fields["access_address"], interval_us=fields["interval_us"],
            hop_increment=fields["hop_increment"], central=sender, peripheral=self,
            anchor_us=anchor, next_event_us=anchor,
        )
        self.world.connections[conn.access_address] = conn
        self.connections.append(conn)
        sender.connections.append(conn)
        self.world.schedule(anchor, sender, lambda: connection_event(conn))

    def next_outgoing(self, conn: ConnectionState, role: str) -> Optional[tuple]:
        if conn.outbox[role]:
            return conn.outbox[role].popleft()
        if role == "central":
            return conn.filler() if conn.filler else (PduType.DATA, b"")
        return None

    def terminate_all(self, reason: int = TERMINATE_USER) -> None:
        for conn in self.active_connections():
            terminate(conn, self, reason)

    # --- RECEPTION ---
    def _receive_on_connection(self, conn: ConnectionState, pdu: LinkLayerPdu) -> None:
        payload = pdu.payload
        role = conn.role_of(self)
        if pdu.pdu_type is PduType.TERMINATE:
            close_connection(conn, payload[0] if payload else TERMINATE_USER)
            return
        if conn.encryption_key is not None and payload and pdu.pdu_type.encryptable:
            if role == "central" and not conn.central_has_key:
                return
            try:
                payload = decrypt_pdu(conn.encryption_key, conn.rx_counter, payload)
            except IntegrityFailure:
                logger.debug("pdu failed link integrity", device=self.name, seq=pdu.meta.seq)
                return
            conn.rx_counter += 1
        if pdu.pdu_type is PduType.SMP:
            self.handle_smp(conn, role, payload)
        elif pdu.pdu_type is PduType.L2CAP_ECHO_REQ:
            self.echo.request(conn, len(payload), self.world.clock_us, pdu.meta.seq)
        elif pdu.pdu_type is PduType.DATA and payload:
            try:
                msg = parse_att(payload)
            except ValueError:
                return
            if msg.op in REQUEST_OPS:
                self.serve_att(conn, role, msg, pdu)
            elif conn.pending[role]:
                conn.pending[role].popleft()(msg, pdu)

    # --- ATT ---
    def att_request(self, conn: ConnectionState, payload: bytes,
                    on_response: Optional[Callable[[AttMessage, LinkLayerPdu], None]] = None) -> None:
        role = conn.role_of(self)
        conn.outbox[role].append((PduType.DATA, payload))
        conn.pending[role].append(on_response or (lambda msg, pdu: None))

    def serve_att(self, conn: ConnectionState, role: str, msg: AttMessage, pdu: LinkLayerPdu) -> None:
        outbox = conn.outbox[role]
        if msg.op is AttOp.DISCOVER_REQ:
            if self.server is None:
                outbox.append((PduType.DATA, encode_error(msg.op, 0, UnknownHandle.att_code)))
            else:
                outbox.append((PduType.DATA, encode_discover_response(self.server.db)))
            return
        op = "write" if msg.op is AttOp.WRITE_REQ else "read"
        if self.server is None:
            outbox.append((PduType.DATA, encode_error(msg.op, msg.handle, UnknownHandle.att_code)))
            return
        try:
            result = self.server.handle(conn, op, msg.handle, msg.value, msg.freshness, msg.tag,
                                        self.world.clock_us // 1000, pdu.meta.seq, pdu.meta.sender.hex())
        except GattError as err:
            outbox.append((PduType.DATA, encode_error(msg.op, msg.handle, err.att_code)))
            return
        if op == "write":
            outbox.append((PduType.DATA, bytes([AttOp.WRITE_RSP])))
        else:
            outbox.append((PduType.DATA, bytes([AttOp.READ_RSP]) + result.value))

    # --- PAIRING STATE MACHINE ---
    def start_pairing(self, conn: ConnectionState, on_done: Optional[Callable[[ConnectionState], None]] = None) -> None:
        """Central side: opens feature exchange. on_done fires on completion or failure."""
        if on_done is not None:
            conn.on_paired.append(on_done)
        conn.outbox["central"].append((PduType.SMP, encode_features(SmpOp.PAIRING_REQUEST, self.profile)))

    def handle_smp(self, conn: ConnectionState, role: str, payload: bytes) -> None:
        if not payload:
            return
        op, body = payload[0], payload[1:]
        session = conn.pairing
        if op == SmpOp.PAIRING_FAILED:
            self._finish_pairing(conn, "failed")
        elif role == "peripheral":
            self._smp_as_peripheral(conn, op, body, session)
        else:
            self._smp_as_central(conn, op, body, session)

    def _smp_as_peripheral(self, conn: ConnectionState, op: int, body: bytes, session: Optional[PairingSession]) -> None:
        outbox = conn.outbox["peripheral"]
        if op == SmpOp.PAIRING_REQUEST:
            try:
                session = initiate_pairing(conn.central, self)
            except PairingRejected:
                outbox.append((PduType.SMP, bytes([SmpOp.PAIRING_FAILED, 0x03])))
                conn.pairing_result = "failed"
                return
            session.conn = conn
            conn.pairing = session
            outbox.append((PduType.SMP, encode_features(SmpOp.PAIRING_RESPONSE, self.profile)))
        elif session is None:
            return
        elif op == SmpOp.CONFIRM:
            outbox.append((PduType.SMP, bytes([SmpOp.CONFIRM]) + session.sconfirm))
        elif op == SmpOp.RANDOM:
            if confirm_value(session.tk, 0x01, body) != session.mconfirm:
                outbox.append((PduType.SMP, bytes([SmpOp.PAIRING_FAILED, 0x04])))
                return
            outbox.append((PduType.SMP, bytes([SmpOp.RANDOM]) + session.srand))

    def _smp_as_central(self, conn: ConnectionState, op: int, body: bytes, session: Optional[PairingSession]) -> None:
        if session is None:
            return
        outbox = conn.outbox["central"]
        if op == SmpOp.PAIRING_RESPONSE:
            derive_stk(session)
            outbox.append((PduType.SMP, bytes([SmpOp.CONFIRM]) + session.mconfirm))
        elif op == SmpOp.CONFIRM:
            outbox.append((PduType.SMP, bytes([SmpOp.RANDOM]) + session.mrand))
        elif op == SmpOp.RANDOM:
            if confirm_value(session.tk, 0x02, body) != session.sconfirm:
                outbox.append((PduType.SMP, bytes([SmpOp.PAIRING_FAILED, 0x04])))
                self._finish_pairing(conn, "failed")
                return
            start_encryption(conn, session.stk)
            distribute_ltk(session)
            conn.outbox["peripheral"].append((PduType.SMP, bytes([SmpOp.ENCRYPTION_INFO]) + session.ltk))
        elif op == SmpOp.ENCRYPTION_INFO:
            if body != session.ltk:
                self._finish_pairing(conn, "failed")
                return
            conn.bond = self.bonds.get(conn.peripheral.address.identity)
            conn.authenticated = session.method.authenticated
            if conn.peripheral.profile.link_encryption:
                start_encryption(conn, session.ltk)
            else:
                stop_encryption(conn)
            logger.info("pairing complete", central=self.name, peripheral=conn.peripheral.name,
                        method=session.method.value)
            self._finish_pairing(conn, "complete")

    def _finish_pairing(self, conn: ConnectionState, result: str) -> None:
        conn.pairing_result = result
        callbacks, conn.on_paired = conn.on_paired, []
        for callback in callbacks:
            callback(conn)

    def resume_bond(self, conn: ConnectionState, bond: BondRecord) -> bool:
        """
        Central side of a bonded reconnection. The peer must hold the same
        LTK for this central; an impostor without it is disconnected.
        """
        peer_bond = conn.peripheral.bonds.get(self.address.identity)
        if peer_bond is None or not hmac.compare_digest(peer_bond.ltk, bond.ltk):
            logger.warning("bonded peer failed to prove the LTK", central=self.name)
            self.rejected_impostors.append(conn)
            terminate(conn, self, TERMINATE_AUTH_FAILURE)
            return False
        conn.bond = bond
        conn.authenticated = bond.authenticated
        if conn.peripheral.profile.link_encryption:
            start_encryption(conn, bond.ltk)
        conn.pairing_result = "complete"
        return True


def takeover(conn: ConnectionState, attacker: Device) -> ConnectionState:
    """
    Replaces the central side of a live connection with attacker. The old
    central sees its link closed; the peripheral keeps the same parameters,
    keys and counters and does not notice.
    """
    if conn.closed:
        raise NotConnected("connection closed")
    world = conn.world
    hijacked = replace(
        conn, central=attacker, outbox={"central": deque(), "peripheral": deque(conn.outbox["peripheral"])},
        pending={"central": deque(), "peripheral": deque()}, on_paired=[], filler=None, central_has_key=False,
    )
    close_connection(conn, TERMINATE_USER)
    conn.peripheral.connections.append(hijacked)
    attacker.connections.append(hijacked)
    world.connections[hijacked.access_address] = hijacked
    world.schedule(max(hijacked.next_event_us, world.clock_us), attacker, lambda: connection_event(hijacked))
    return hijacked


# --- COMPANION APPLICATION ---
class SessionWindow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    start_s: float = Field(ge=0)
    duration_s: float = Field(gt=0)


class PlannedWrite(BaseModel):
    model_config = ConfigDict(extra="forbid")

    handle: int = Field(ge=1, le=0xFFFF)
    value: str


class CompanionPlan(BaseModel):
    """What the legitimate smartphone app does with its wearable."""
    model_config = ConfigDict(extra="forbid")

    pairing_method: PairingMethod = PairingMethod.SECURE_CONNECTIONS
    bonded: bool = False
    pair: bool = True
    sessions: list[SessionWindow] = []
    sync_period_ms: int = Field(default=1000, gt=0)
    interval_ms: int = Field(default=DEFAULT_CONN_INTERVAL_MS, gt=0)
    writes: list[PlannedWrite] = []
    reads: list[int] = []


class CompanionApp:
    """
    Drives a smartphone central through its planned sessions with one
    wearable: find it by its service set, connect, reuse the bond or pair,
    then sync writes and reads periodically until the session ends.
    """

    def __init__(self, phone: Device, target: Device, plan: CompanionPlan):
        self.phone = phone
        self.target = target
        self.plan = plan
        self.expected_uuids = set(target.advertised_uuids())
        self.connections: list[ConnectionState] = []
        self._session_end_us = 0

    def start(self) -> None:
        world = self.phone.world
        for window in self.plan.sessions:
            start = int(window.start_s * 1_000_000)
            end = start + int(window.duration_s * 1_000_000)
            world.schedule(start, self.phone, lambda end=end: self._begin_session(end))
            world.schedule(end, self.phone, self._end_session)

    def _matches(self, pdu: LinkLayerPdu) -> bool:
        try:
            _, uuids = decode_adv(pdu.payload)
        except ValueError:
            return False
        return set(uuids) == self.expected_uuids

    def _begin_session(self, end_us: int) -> None:
        self._session_end_us = end_us
        self.phone.start_connect(self._matches, self._on_connected, self.plan.interval_ms * 1000)

    def _end_session(self) -> None:
        self.phone.cancel_connect()
        for conn in self.connections:
            if not conn.closed:
                terminate(conn, self.phone)

    def _on_connected(self, conn: ConnectionState) -> None:
        self.connections.append(conn)
        bond = self.phone.bonds.get(self.target.address.identity)
        if bond is not None:
            if self.phone.resume_bond(conn, bond):
                self._sync(conn)
        elif self.plan.pair:
            self.phone.start_pairing(conn, self._after_pairing)
        else:
            self._sync(conn)

    def _after_pairing(self, conn: ConnectionState) -> None:
        if conn.pairing_result == "complete":
            self._sync(conn)

    def _freshness(self, now_ms: int) -> Freshness:
        mode = self.target.profile.anti_replay.mode
        if mode == "timestamp":
            return Freshness("timestamp", now_ms)
        if mode == "nonce":
            return Freshness("nonce", self.phone.rng.getrandbits(64))
        return Freshness()

    def _sync(self, conn: ConnectionState) -> None:
        world = self.phone.world
        if conn.closed or world.clock_us >= self._session_end_us:
            return
        now_ms = world.clock_us // 1000
        for index, write in enumerate(self.plan.writes):
            value = write.value.encode()
            freshness = self._freshness(now_ms + index)
            tag = None
            if self.target.profile.message_integrity:
                tag = app_mac(self.target.app_key, write.handle, freshness, value)
            self.phone.att_request(conn, encode_write(write.handle, value, freshness, tag))
        for handle in self.plan.reads:
            self.phone.att_request(conn, encode_read(handle))
        world.schedule(world.clock_us + self.plan.sync_period_ms * 1000, self.phone, lambda: self._sync(conn))
