"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A value or argument violates a documented contract."""


class ParseError(ValueError):
    """A file or message could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DecodeError(RuntimeError):
    """Decoding could not proceed (e.g. no admissible next token)."""


class RemoteError(ConnectionError):
    """Base class for remote-scorer failures."""


class HandshakeError(RemoteError):
    """The server greeting was missing or malformed."""


class ProtocolVersionError(HandshakeError):
    """The server speaks an unsupported protocol version."""


class VocabMismatchError(RemoteError):
    """Server vocabulary metadata disagrees with the expected vocabulary."""


class ProtocolError(RemoteError):
    """A response violated the wire protocol."""


class RemoteTimeoutError(RemoteError):
    """The server did not answer within the configured timeout."""


class ServerSideError(RemoteError):
    """The server reported an error for a request."""
