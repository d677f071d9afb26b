"""Exception types shared across the scanner."""


class DbkdError(Exception):
    """Base class for all scanner errors."""


class ShapeMismatch(DbkdError):
    """Input dimensions do not match what the receiver expects."""


class ConfigInvalid(DbkdError):
    """A configuration value violates its documented constraints."""


class ProtocolError(DbkdError):
    """A remote oracle reply did not match the wire protocol."""


class RemoteTimeout(DbkdError):
    """A remote oracle did not reply within the configured timeout."""


class ConnectionClosed(DbkdError):
    """The remote oracle connection ended mid-conversation."""


class SingleClassInput(DbkdError):
    """A metric needing both clean and backdoored scores got only one kind."""


class ZeroVector(DbkdError):
    """A texture feature degenerated to the zero vector (constant pattern)."""


class DivergenceDetected(DbkdError):
    """Training loss became non-finite."""
