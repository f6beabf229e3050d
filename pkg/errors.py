"""
Exception hierarchy for the BLE threat lab.

Every error raised by the lab derives from BleLabError so the CLI can map
failures onto exit codes without catching unrelated exceptions.
"""


class BleLabError(Exception):
    """Base class for all lab errors."""


# --- PROTOCOL ERRORS ---
class PairingRejected(BleLabError):
    """The peripheral refused the negotiated pairing method."""


class NotEncrypted(BleLabError):
    """Key distribution was attempted on a link that is not encrypted."""


class IntegrityFailure(BleLabError):
    """A link-layer tag or application MAC did not verify."""


class NotConnected(BleLabError):
    """The operation needs a live connection."""


class ChannelViolation(ValueError, BleLabError):
    """A PDU was built for a channel that is illegal for its type."""


class GattError(BleLabError):
    """
    Base class for errors a GATT server reports back to its client.

    Attributes:
        att_code (int): The ATT error code carried in the error response PDU.
    """
    att_code = 0x0E

    def __init__(self, message: str = "", handle: int | None = None, att_code: int | None = None):
        super().__init__(message or self.__class__.__name__)
        self.handle = handle
        if att_code is not None:
            self.att_code = att_code


class UnknownHandle(GattError):
    att_code = 0x01


class PropertyViolation(GattError):
    att_code = 0x03


class InsufficientSecurity(GattError):
    att_code = 0x05


class ReplayRejected(GattError):
    att_code = 0x80


class StaleTimestamp(GattError):
    att_code = 0x81


class MessageIntegrityFailure(GattError, IntegrityFailure):
    """The application MAC on a write did not verify."""
    att_code = 0x82


# --- WORLD ERRORS ---
class TimeInPast(BleLabError):
    """An event or injection was scheduled before the world clock."""


# --- ATTACK ERRORS ---
class AttackError(BleLabError):
    """Base class for expected attack failures; recorded on the outcome during a run."""


class InsufficientObservations(AttackError):
    pass


class LostConnection(AttackError):
    pass


class NotCrackable(AttackError):
    pass


class CloneRejected(AttackError):
    pass


class OutOfRange(AttackError):
    pass


# --- STRIDE ERRORS ---
class InvalidDfd(BleLabError):
    """
    The data-flow diagram failed validation.

    Attributes:
        problems (list[str]): One human readable entry per defect found.
    """

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class ArityMismatch(BleLabError):
    """Profiles and verdicts passed to the report builder differ in length."""


# --- LAB ERRORS ---
class ScenarioError(BleLabError):
    """Base class for scenario file problems (exit code 2)."""


class ParseError(ScenarioError):
    """
    The scenario file is not well-formed.

    Attributes:
        line (int): 1-based line of the defect.
        column (int): 1-based column of the defect.
    """

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ValidationError(ScenarioError):
    """
    The scenario parsed but a field is invalid.

    Attributes:
        field (str): Dotted path of the offending field, e.g. "devices.0.profile".
    """

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MalformedRecord(BleLabError):
    """
    A capture line could not be decoded.

    Attributes:
        record_number (int): 1-based line number in the capture file.
    """

    def __init__(self, message: str, record_number: int):
        super().__init__(f"record {record_number}: {message}")
        self.record_number = record_number
