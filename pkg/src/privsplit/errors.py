"""Exception types shared across the package."""


class PrivSplitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PrivSplitError):
    """Tensor/operand shapes are incompatible with the requested operation."""


class DomainError(PrivSplitError):
    """A value lies outside the mathematical domain of a function."""


class NotAPlateauError(DomainError):
    """A value is not in the image of the configured step-wise function."""


class BoundsError(PrivSplitError):
    """An index or location is out of range."""


class CapabilityError(PrivSplitError):
    """The requested operation is outside what this implementation supports."""


class CapacityError(PrivSplitError):
    """A size cap was exceeded (e.g. full-system assembly too large)."""


class DatasetFormatError(PrivSplitError):
    """A dataset file does not match its binary format.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(PrivSplitError):
    """A wire frame or message sequence violated the protocol."""


class HandshakeError(ProtocolError):
    """The two parties' session configurations do not match."""


class SessionAborted(PrivSplitError):
    """An edge session aborted; carries the resumable sequence checkpoint.

    ``next_seq`` is the sequence number of the first batch that was NOT
    delivered, i.e. the value to pass as ``start_seq`` on resume.
    """

    def __init__(self, message: str, next_seq: int):
        super().__init__(f"{message} (resume from seq {next_seq})")
        self.next_seq = next_seq
