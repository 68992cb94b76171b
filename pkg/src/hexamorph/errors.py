"""Exception hierarchy.

Every error carries a stable ``exit_code`` (used by the CLI) and a one-byte
``wire_code`` (used in ``HMHERR01`` error responses). Classes are grouped by
what the caller is expected to do about them, not by the module raising them.
"""


class HexaMorphError(Exception):
    exit_code = 1
    wire_code = 0xFF


# --- configuration / usage -------------------------------------------------


class ConfigError(HexaMorphError):
    exit_code = 3
    wire_code = 0x10


class IncompatibleParamsError(HexaMorphError):
    """Two values bound to different :class:`Params` were combined."""

    exit_code = 3
    wire_code = 0x11


class UnsupportedSchemeError(ConfigError):
    wire_code = 0x12


class LockHeldError(HexaMorphError):
    exit_code = 10
    wire_code = 0x13


# --- malformed input --------------------------------------------------------


class MalformedInputError(HexaMorphError):
    """Bytes that do not parse as the structure they claim to be."""

    exit_code = 7
    wire_code = 0x20


class MalformedDigestError(MalformedInputError):
    wire_code = 0x21


class MalformedDeltaError(MalformedInputError):
    wire_code = 0x22


class MalformedMessageError(MalformedInputError):
    wire_code = 0x23


class InvalidIndexError(HexaMorphError):
    exit_code = 8
    wire_code = 0x24


# --- row-store preconditions (publish side) ---------------------------------


class DeltaNotApplicableError(HexaMorphError):
    exit_code = 8
    wire_code = 0x30


class StaleDeltaError(DeltaNotApplicableError):
    """Modify/Delete whose ``old_payload`` does not match the stored row."""

    wire_code = 0x31


class MissingRowError(DeltaNotApplicableError):
    wire_code = 0x32


class DuplicateIndexError(DeltaNotApplicableError):
    wire_code = 0x33


# --- version negotiation ----------------------------------------------------


class InvalidRangeError(HexaMorphError):
    exit_code = 4
    wire_code = 0x40


class UnknownVersionError(HexaMorphError):
    exit_code = 5
    wire_code = 0x41


class LogTruncatedError(HexaMorphError):
    """Requested versions fall below the compaction floor; full resync needed."""

    exit_code = 5
    wire_code = 0x42


class OutOfOrderError(HexaMorphError):
    exit_code = 6
    wire_code = 0x43


# --- integrity failures (subscriber side) ----------------------------------


class TamperDetectedError(HexaMorphError):
    """Folded digest does not verify against the distributor's signature."""

    exit_code = 7
    wire_code = 0x50


class CorruptDeltaError(TamperDetectedError):
    """A received delta cannot be applied to the replica."""

    wire_code = 0x51


class ValidationFailedError(HexaMorphError):
    exit_code = 9
    wire_code = 0x52


class WorkloadError(HexaMorphError):
    exit_code = 3
    wire_code = 0x60


_BY_WIRE_CODE = {}


def _register(cls):
    for sub in cls.__subclasses__():
        _BY_WIRE_CODE.setdefault(sub.wire_code, sub)
        _register(sub)


_register(HexaMorphError)


def error_for_wire_code(code: int) -> type:
    return _BY_WIRE_CODE.get(code, HexaMorphError)
