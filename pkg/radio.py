"""
Radio world: entity positions, range-gated delivery, promiscuous taps and
the append-only capture, all driven by one deterministic event queue.

Events are ordered by (time_us, entity_id, insertion order), so a world built
from the same seed and scenario replays byte-for-byte.
"""
import heapq
import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Generator, Iterable, Optional

import structlog
from pydantic import BaseModel, ConfigDict, Field

from errors import BleLabError, TimeInPast
from protocol import ADV_CHANNELS, LinkLayerPdu, PduType, RadioClass

logger = structlog.get_logger(__name__)

# A program is a generator that yields absolute wake-up times (µs) and returns its result
Program = Generator[int, None, object]


class RangeModel:
    """
    Free-space path loss with a hard cut-off per radio class.

    Args:
        overrides (dict, optional): Replacement maximum ranges in metres per RadioClass.
    """

    def __init__(self, overrides: Optional[dict[RadioClass, float]] = None):
        self.overrides = {RadioClass(k): float(v) for k, v in (overrides or {}).items()}

    def max_range_m(self, radio_class: RadioClass) -> float:
        return self.overrides.get(radio_class, radio_class.range_m)

    def rssi_dbm(self, radio_class: RadioClass, distance_m: float) -> float:
        return round(radio_class.tx_power_dbm - 40.0 - 20.0 * math.log10(max(distance_m, 1.0)), 1)


class CaptureRecord(BaseModel):
    """One transmitted PDU as it appears in the exported capture."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    seq: int = Field(ge=0)
    timestamp_us: int = Field(ge=0)
    channel: int = Field(ge=0, le=39)
    access_address: str = Field(pattern=r"^[0-9a-f]{8}$")
    pdu_type: PduType
    sender: str = Field(pattern=r"^[0-9a-f]{12}$")
    rssi_dbm: float
    payload_hex: str = Field(pattern=r"^(?:[0-9a-f]{2})*$")
    encrypted: bool = False
    receivers: list[str] = []

    @property
    def payload(self) -> bytes:
        return bytes.fromhex(self.payload_hex)

    def to_json_line(self) -> str:
        return self.model_dump_json()


class Sniffer:
    """
    Promiscuous receiver carried by an entity. It hears any PDU on a tuned
    channel whose sender lies within the owner's own radio range; it never
    transmits or acknowledges.
    """

    def __init__(self, owner, channels: Iterable[int] = ADV_CHANNELS,
                 pdu_filter: Optional[Callable[[LinkLayerPdu], bool]] = None):
        self.owner = owner
        self.channels = set(channels)
        self.pdu_filter = pdu_filter
        self.log: list[LinkLayerPdu] = []

    def tuned(self, pdu: LinkLayerPdu, now_us: int) -> bool:
        return pdu.channel in self.channels

    def hear(self, pdu: LinkLayerPdu) -> None:
        if self.pdu_filter is None or self.pdu_filter(pdu):
            self.log.append(pdu)


@dataclass
class TapHandle:
    world: "World"
    tap: Sniffer

    def detach(self) -> None:
        if self.tap in self.world.taps:
            self.world.taps.remove(self.tap)


@dataclass
class Injection:
    """Filled in with the stamped PDU once the scheduled injection goes on air."""
    pdu: Optional[LinkLayerPdu] = None


@dataclass(eq=False)
class PendingConnection:
    """Filled in with the connection once the initiator's connect_req is accepted."""
    initiator: object
    target: object
    conn: Optional[object] = None

    @property
    def established(self) -> bool:
        return self.conn is not None


@dataclass(order=True)
class _Event:
    time_us: int
    entity_id: int
    order: int
    callback: Callable[[], None] = field(compare=False)


class World:
    """
    The simulated radio environment.

    Args:
        seed (int): Master seed; every entity draws from rng_for(name).
        range_model (RangeModel, optional): Range and RSSI model.
    """

    def __init__(self, seed: int, range_model: Optional[RangeModel] = None):
        self.seed = seed
        self.range_model = range_model or RangeModel()
        self.clock_us = 0
        self.entities: list = []
        self.capture: list[CaptureRecord] = []
        self.connections: dict = {}      # access address -> ConnectionState
        self.sessions: list = []         # every PairingSession, for key-confidentiality audits
        self.taps: list[Sniffer] = []
        self._queue: list[_Event] = []
        self._order = 0

    # --- ENTITIES ---
    def rng_for(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}:{name}")

    def add(self, entity, position: tuple[float, float]):
        """Places an entity and lets it schedule its own activity (e.g. advertising)."""
        entity.entity_id = len(self.entities)
        entity.world = self
        entity.position = (float(position[0]), float(position[1]))
        self.entities.append(entity)
        entity.on_attach()
        return entity

    def entity(self, name: str):
        return next(e for e in self.entities if e.name == name)

    def distance(self, a, b) -> float:
        return math.dist(a.position, b.position)

    def in_range(self, sender, receiver) -> bool:
        return self.distance(sender, receiver) <= self.range_model.max_range_m(sender.radio_class)

    # --- SCHEDULING ---
    def schedule(self, at_us: int, owner, callback: Callable[[], None]) -> None:
        at_us = int(at_us)
        if at_us < self.clock_us:
            raise TimeInPast(f"event at {at_us} µs is before the clock ({self.clock_us} µs)")
        heapq.heappush(self._queue, _Event(at_us, owner.entity_id, self._order, callback))
        self._order += 1

    def step(self) -> list[CaptureRecord]:
        """
        Processes the earliest pending event.

        Returns:
            list[CaptureRecord]: Records emitted while processing it.
        """
        if not self._queue:
            return []
        event = heapq.heappop(self._queue)
        self.clock_us = event.time_us
        first = len(self.capture)
        event.callback()
        return self.capture[first:]

    def run_until(self, t_us: int) -> None:
        while self._queue and self._queue[0].time_us <= t_us:
            self.step()
        self.clock_us = max(self.clock_us, int(t_us))

    # --- AIR INTERFACE ---
    def transmit(self, pdu: LinkLayerPdu, sender) -> LinkLayerPdu:
        """
        Puts a PDU on air now: appends the capture record, feeds taps in range
        and delivers to every listening entity within the sender's range.

        Returns:
            LinkLayerPdu: The PDU stamped with its capture index and RSSI.
        """
        stamped = replace(pdu, meta=replace(
            pdu.meta, seq=len(self.capture), timestamp_us=self.clock_us, rssi_dbm=self._rssi(sender)
        ))
        receivers = [e for e in self.entities if e is not sender and self.in_range(sender, e) and e.listens(stamped)]
        self.capture.append(CaptureRecord(
            seq=stamped.meta.seq,
            timestamp_us=self.clock_us,
            channel=stamped.channel,
            access_address=f"{stamped.access_address:08x}",
            pdu_type=stamped.pdu_type,
            sender=stamped.meta.sender.hex(),
            rssi_dbm=stamped.meta.rssi_dbm,
            payload_hex=stamped.payload.hex(),
            encrypted=stamped.meta.encrypted,
            receivers=[e.address.hex for e in receivers],
        ))
        for tap in list(self.taps):
            reach = self.range_model.max_range_m(tap.owner.radio_class)
            if self.distance(sender, tap.owner) <= reach and tap.tuned(stamped, self.clock_us):
                tap.hear(stamped)
        for receiver in receivers:
            receiver.receive(stamped, sender)
        return stamped

    def _rssi(self, sender) -> float:
        others = [self.distance(sender, e) for e in self.entities if e is not sender]
        return self.range_model.rssi_dbm(sender.radio_class, min(others, default=1.0))

    def attach_tap(self, tap: Sniffer, channels: Optional[Iterable[int]] = None) -> TapHandle:
        if channels is not None:
            tap.channels = set(channels)
        self.taps.append(tap)
        return TapHandle(self, tap)

    def inject(self, pdu: LinkLayerPdu, attacker, at_us: int) -> Injection:
        """
        Schedules an attacker transmission. Injected PDUs are exempt from the
        hop law and carry whatever sender address the attacker chose.

        Raises:
            TimeInPast: If at_us is before the world clock.
        """
        handle = Injection()

        def fire():
            handle.pdu = self.transmit(replace(pdu, meta=replace(pdu.meta, injected=True)), attacker)

        self.schedule(at_us, attacker, fire)
        return handle

    def connect(self, initiator, target, interval_us: int = 50_000) -> PendingConnection:
        """
        Asks initiator to connect to target: it answers the next advert it
        hears from target with a connect_req 150 µs later.
        """
        pending = PendingConnection(initiator, target)
        initiator.start_connect(
            lambda pdu: pdu.meta.sender == target.address.current,
            lambda conn: setattr(pending, "conn", conn),
            interval_us,
        )
        return pending

    # --- PROGRAMS ---
    def run_program(self, program: Program):
        """Runs a program to completion, advancing the world to each wake-up time."""
        while True:
            try:
                wake = next(program)
            except StopIteration as stop:
                return stop.value
            self.run_until(wake)

    def spawn(self, program: Program, owner, at_us: int,
              on_done: Callable[[object, Optional[BleLabError]], None]) -> None:
        """
        Runs a program inside the event loop, concurrently with everything
        else. on_done receives (result, None) or (None, error) when the
        program raises a lab error.
        """

        def resume():
            try:
                wake = next(program)
            except StopIteration as stop:
                on_done(stop.value, None)
                return
            except BleLabError as err:
                logger.info("program failed", owner=owner.name, error=str(err), kind=type(err).__name__)
                on_done(None, err)
                return
            self.schedule(max(int(wake), self.clock_us), owner, resume)

        self.schedule(at_us, owner, resume)
