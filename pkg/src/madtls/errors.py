class MadtlsError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(MadtlsError, ValueError):
    """Session configuration is inconsistent (missing keys, bad rights, caps exceeded)."""


class AccessViolation(MadtlsError):
    """An entity asked for key material its rights do not cover."""


class ProtocolError(MadtlsError, ValueError):
    """Malformed or inconsistent wire data."""


class UnknownContentType(ProtocolError):
    """Record is not a MADTLS record; the caller should ignore it."""


class ReplayError(MadtlsError):
    """Sequence number already seen or outside the anti-replay window."""


class HandshakeFailure(MadtlsError):
    """Handshake aborted; ``alert`` names the DTLS alert that would be sent."""

    def __init__(self, message: str, alert: str = "handshake_failure"):
        super().__init__(message)
        self.alert = alert


class ScenarioError(MadtlsError, ValueError):
    """Scenario file failed validation; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations
