"""Middlebox-aware DTLS: per-context segment access with aggregated XOR tags."""

from .access import (Access, AccessRights, KeyMatrix, SegmentationInfo, SessionConfig, TemplateTable,
                     derive_key_matrix)
from .bits import Bits
from .errors import (AccessViolation, ConfigurationError, HandshakeFailure, MadtlsError, ProtocolError,
                     ReplayError, ScenarioError)
from .handshake import run_handshake
from .injection import EpochAllocator, Injector, TemplateIssuer
from .record import ProtectedRecord, decode_record, encode_record
from .session import Middlebox, Receiver, SelfVerifyPolicy, Sender, Verdict

__version__ = "0.1.0"

__all__ = [
    "Access", "AccessRights", "KeyMatrix", "SegmentationInfo", "SessionConfig", "TemplateTable",
    "derive_key_matrix", "Bits", "AccessViolation", "ConfigurationError", "HandshakeFailure", "MadtlsError",
    "ProtocolError", "ReplayError", "ScenarioError", "run_handshake", "EpochAllocator", "Injector",
    "TemplateIssuer", "ProtectedRecord", "decode_record", "encode_record", "Middlebox", "Receiver",
    "SelfVerifyPolicy", "Sender", "Verdict",
]
