"""Extended DTLS 1.2 PSK handshake with middlebox key distribution.

Flights (identical in number and message types to a DTLS 1.2 PSK handshake
with a pre-exchanged cookie)::

    1  client -> server   ClientHello(+MADTLS extension)
    2  server -> client   ServerHello(+replayed extension), ServerHelloDone
    3  client -> server   ClientKeyExchange(+key blobs), ChangeCipherSpec, Finished
    4  server -> client   ChangeCipherSpec, Finished

Every flight passes all middleboxes in path order (reverse order for server
flights). Middleboxes learn the session layout from the hellos, may strip
cipher suites from the ClientHello, and pull their keys out of the
ClientKeyExchange.

Middleboxes may only shorten the cipher suite list, so the Finished transcript
covers the ClientHello with its suite vector blanked; the server echoes the
list it received in its extension and the client checks that echo against
what it offered.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import ipaddress
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from cryptography.exceptions import InvalidTag

from . import crypto
from .access import (Access, AccessRights, EntityKeys, KeyMatrix, MAX_CONTEXTS, MAX_TEMPLATES,
                     SessionConfig, SegmentationInfo, TemplateTable, derive_key_matrix)
from .crypto import KEY_SIZE
from .errors import ConfigurationError, HandshakeFailure, ProtocolError
from .record import CT_HANDSHAKE, DTLS12_VERSION, decode_layout, encode_layout

CT_CHANGE_CIPHER_SPEC = 0x14

HT_CLIENT_HELLO = 1
HT_SERVER_HELLO = 2
HT_SERVER_HELLO_DONE = 14
HT_CLIENT_KEY_EXCHANGE = 16
HT_FINISHED = 20

EXT_MADTLS = 0xFE1E
EXT_MCTLS_CERTIFICATES = 0xFE1F

SUITE_PSK_AES256_CTR_HMAC_SHA256 = 0xFF1E
# announced for negotiation tests only; never selected by this implementation
SUITE_PSK_BPMAC_ANTEDATED = 0xFF1F
SUPPORTED_SUITES = (SUITE_PSK_AES256_CTR_HMAC_SHA256,)

MESSAGE_NAMES = {
    HT_CLIENT_HELLO: "ClientHello", HT_SERVER_HELLO: "ServerHello",
    HT_SERVER_HELLO_DONE: "ServerHelloDone", HT_CLIENT_KEY_EXCHANGE: "ClientKeyExchange",
    HT_FINISHED: "Finished",
}

BASELINE_DTLS12_PSK_FLIGHTS = (
    ("ClientHello",),
    ("ServerHello", "ServerHelloDone"),
    ("ClientKeyExchange", "ChangeCipherSpec", "Finished"),
    ("ChangeCipherSpec", "Finished"),
)


class Phase(enum.Enum):
    IDLE = "idle"
    HELLO_SENT = "hello_sent"
    HELLO_RECEIVED = "hello_received"
    KEYS_DISTRIBUTED = "keys_distributed"
    ESTABLISHED = "established"


# -- TLS 1.2 PRF and PSK master secret -----------------------------------------

def p_sha256(secret: bytes, seed: bytes, size: int) -> bytes:
    out, a = b"", seed
    while len(out) < size:
        a = hmac.digest(secret, a, "sha256")
        out += hmac.digest(secret, a + seed, "sha256")
    return out[:size]


def prf(secret: bytes, label: bytes, seed: bytes, size: int) -> bytes:
    return p_sha256(secret, label + seed, size)


def psk_master_secret(psk: bytes, client_random: bytes, server_random: bytes) -> bytes:
    n = len(psk).to_bytes(2, "big")
    premaster = n + bytes(len(psk)) + n + psk
    return prf(premaster, b"master secret", client_random + server_random, 48)


def finished_verify_data(master: bytes, label: bytes, transcript: bytes) -> bytes:
    return prf(master, label, hashlib.sha256(transcript).digest(), 12)


# -- byte helpers ----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("truncated handshake message")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def uint(self, n: int) -> int:
        return int.from_bytes(self.take(n), "big")

    def vec(self, len_bytes: int) -> bytes:
        return self.take(self.uint(len_bytes))

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _vec(data: bytes, len_bytes: int) -> bytes:
    if len(data) >= 1 << (8 * len_bytes):
        raise ConfigurationError("vector too long")
    return len(data).to_bytes(len_bytes, "big") + data


# -- MADTLS hello extension ------------------------------------------------------

def _rights_row_size(n_middleboxes: int) -> int:
    return (2 * n_middleboxes + 7) // 8


def encode_rights_row(row: Mapping[int, Access], n_middleboxes: int) -> bytes:
    """Two bits per middlebox (none/read/write), middlebox 1 in the top bits."""
    value = 0
    for mb in range(1, n_middleboxes + 1):
        value = (value << 2) | int(row.get(mb, Access.NONE))
    size = _rights_row_size(n_middleboxes)
    return (value << (size * 8 - 2 * n_middleboxes)).to_bytes(size, "big") if size else b""


def decode_rights_row(data: bytes, n_middleboxes: int) -> dict[int, Access]:
    size = _rights_row_size(n_middleboxes)
    raw = int.from_bytes(data, "big")
    spare = size * 8 - 2 * n_middleboxes
    if raw & ((1 << spare) - 1):
        raise ProtocolError("nonzero padding in rights row")
    value = raw >> spare
    row = {}
    for mb in range(n_middleboxes, 0, -1):
        bits = value & 0b11
        value >>= 2
        if bits == 3:
            raise ProtocolError("invalid rights code 3")
        if bits:
            row[mb] = Access(bits)
    return row


def _encode_address(addr: tuple[str, int]) -> bytes:
    packed = ipaddress.ip_address(addr[0]).packed
    return bytes([len(packed)]) + packed + addr[1].to_bytes(2, "big")


def _decode_address(r: _Reader) -> tuple[str, int]:
    size = r.uint(1)
    if size not in (4, 16):
        raise ProtocolError("bad address length")
    host = str(ipaddress.ip_address(r.take(size)))
    return host, r.uint(2)


@dataclass
class HelloExtension:
    """Session layout announced in the hellos.

    ``contexts`` holds one rights row per context: middlebox index -> access.
    """

    middleboxes: list[tuple[str, int]]
    contexts: list[dict[int, Access]]
    templates: list[SegmentationInfo]
    self_verifying: frozenset[int] = frozenset()
    echoed_suites: list[int] | None = None

    def validate(self) -> None:
        if len(self.templates) > MAX_TEMPLATES:
            raise ConfigurationError(f"at most {MAX_TEMPLATES} templates")
        if not 1 <= len(self.contexts) <= MAX_CONTEXTS:
            raise ConfigurationError(f"context count must be in 1..{MAX_CONTEXTS}")
        if len(self.middleboxes) > 253:
            raise ConfigurationError("too many middleboxes")

    @property
    def n_middleboxes(self) -> int:
        return len(self.middleboxes)

    def encode(self, include_middleboxes: bool = True) -> bytes:
        self.validate()
        m = self.n_middleboxes
        out = bytearray()
        if include_middleboxes:
            out.append(m)
            for addr in self.middleboxes:
                out += _encode_address(addr)
        out.append(len(self.contexts))
        for row in self.contexts:
            out += encode_rights_row(row, m)
        sv = sum(1 << (mb - 1) for mb in self.self_verifying)
        out += sv.to_bytes((m + 7) // 8, "big")
        out.append(len(self.templates))
        for layout in self.templates:
            out += encode_layout(layout) + b"\x00"
        if self.echoed_suites is not None:
            out += _vec(b"".join(s.to_bytes(2, "big") for s in self.echoed_suites), 2)
        return bytes(out)

    @classmethod
    def decode(cls, data: bytes, middleboxes: list[tuple[str, int]] | None = None,
               with_echo: bool = False) -> HelloExtension:
        r = _Reader(data)
        try:
            if middleboxes is None:
                middleboxes = [_decode_address(r) for _ in range(r.uint(1))]
            m = len(middleboxes)
            contexts = [decode_rights_row(r.take(_rights_row_size(m)), m) for _ in range(r.uint(1))]
            sv_bits = r.uint((m + 7) // 8) if m else 0
            templates = []
            for _ in range(r.uint(1)):
                layout, r.pos = decode_layout(r.buf, r.pos)
                if r.take(1) != b"\x00":
                    raise ProtocolError("template not null-terminated")
                templates.append(layout)
            echo = None
            if with_echo:
                raw = r.vec(2)
                echo = [int.from_bytes(raw[i:i + 2], "big") for i in range(0, len(raw), 2)]
        except (IndexError, ValueError) as exc:
            raise ProtocolError(f"bad MADTLS extension: {exc}") from None
        if not r.done():
            raise ProtocolError("trailing bytes in MADTLS extension")
        if sv_bits >> m:
            raise ProtocolError("self-verify bitmap names an unknown middlebox")
        sv = frozenset(mb for mb in range(1, m + 1) if sv_bits >> (mb - 1) & 1)
        return cls(list(middleboxes), contexts, templates, sv, echo)

    def rights(self) -> AccessRights:
        table = {(ctx, mb): right for ctx, row in enumerate(self.contexts) for mb, right in row.items()}
        return AccessRights(self.n_middleboxes + 2, len(self.contexts), table)

    def template_table(self) -> TemplateTable:
        return TemplateTable(dict(enumerate(self.templates)))

    def session_config(self) -> SessionConfig:
        return SessionConfig(self.rights(), self.template_table(), self.self_verifying, list(self.middleboxes))


def extension_from_config(config: SessionConfig) -> HelloExtension:
    rights = config.rights
    contexts = [{mb: rights.get(ctx, mb) for mb in rights.middleboxes if rights.get(ctx, mb) is not Access.NONE}
                for ctx in rights.contexts]
    tids = sorted(config.templates.templates)
    if tids != list(range(len(tids))):
        raise ConfigurationError("template ids must be dense from 0 to be announced in a hello")
    return HelloExtension(list(config.middlebox_addresses), contexts,
                          [config.templates[t] for t in tids], frozenset(config.self_verifying))


# -- handshake messages ----------------------------------------------------------

@dataclass
class HandshakeMessage:
    msg_type: int
    body: bytes
    message_seq: int = 0

    def encode(self) -> bytes:
        n = len(self.body).to_bytes(3, "big")
        return (bytes([self.msg_type]) + n + self.message_seq.to_bytes(2, "big")
                + bytes(3) + n + self.body)

    @classmethod
    def decode(cls, data: bytes) -> HandshakeMessage:
        r = _Reader(data)
        msg_type = r.uint(1)
        length = r.uint(3)
        seq = r.uint(2)
        offset, frag_len = r.uint(3), r.uint(3)
        if offset != 0 or frag_len != length:
            raise ProtocolError("fragmented handshake messages are not supported")
        body = r.take(length)
        if not r.done():
            raise ProtocolError("trailing bytes after handshake message")
        return cls(msg_type, body, seq)

    @property
    def name(self) -> str:
        return MESSAGE_NAMES.get(self.msg_type, f"type{self.msg_type}")


def _extensions(items: Sequence[tuple[int, bytes]]) -> bytes:
    return _vec(b"".join(t.to_bytes(2, "big") + _vec(d, 2) for t, d in items), 2)


def _parse_extensions(data: bytes) -> dict[int, bytes]:
    r = _Reader(data)
    out = {}
    while not r.done():
        ext_type = r.uint(2)
        out[ext_type] = r.vec(2)
    return out


@dataclass
class ClientHello:
    random: bytes
    cookie: bytes
    suites: list[int]
    extension: HelloExtension
    request_certificates: bool = False

    def encode(self) -> bytes:
        suites = b"".join(s.to_bytes(2, "big") for s in self.suites)
        exts = [(EXT_MADTLS, self.extension.encode())]
        if self.request_certificates:
            exts.append((EXT_MCTLS_CERTIFICATES, b""))
        return (DTLS12_VERSION + self.random + _vec(b"", 1) + _vec(self.cookie, 1)
                + _vec(suites, 2) + _vec(b"\x00", 1) + _extensions(exts))

    @classmethod
    def decode(cls, body: bytes) -> ClientHello:
        r = _Reader(body)
        if r.take(2) != DTLS12_VERSION:
            raise ProtocolError("unsupported client version")
        rnd = r.take(32)
        if r.vec(1):
            raise ProtocolError("session resumption is not supported")
        cookie = r.vec(1)
        raw = r.vec(2)
        if len(raw) % 2:
            raise ProtocolError("odd cipher suite list")
        suites = [int.from_bytes(raw[i:i + 2], "big") for i in range(0, len(raw), 2)]
        if r.vec(1) != b"\x00":
            raise ProtocolError("only null compression is supported")
        exts = _parse_extensions(r.vec(2))
        if EXT_MADTLS not in exts:
            raise HandshakeFailure("ClientHello lacks the MADTLS extension", "missing_extension")
        return cls(rnd, cookie, suites, HelloExtension.decode(exts[EXT_MADTLS]),
                   EXT_MCTLS_CERTIFICATES in exts)


@dataclass
class ServerHello:
    random: bytes
    suite: int
    extension: HelloExtension

    def encode(self) -> bytes:
        ext = self.extension.encode(include_middleboxes=False)
        return (DTLS12_VERSION + self.random + _vec(b"", 1) + self.suite.to_bytes(2, "big") + b"\x00"
                + _extensions([(EXT_MADTLS, ext)]))

    @classmethod
    def decode(cls, body: bytes, middleboxes: list[tuple[str, int]]) -> ServerHello:
        r = _Reader(body)
        if r.take(2) != DTLS12_VERSION:
            raise ProtocolError("unsupported server version")
        rnd = r.take(32)
        if r.vec(1):
            raise ProtocolError("session resumption is not supported")
        suite = r.uint(2)
        if r.uint(1) != 0:
            raise ProtocolError("only null compression is supported")
        exts = _parse_extensions(r.vec(2))
        if EXT_MADTLS not in exts:
            raise HandshakeFailure("ServerHello lacks the MADTLS extension", "missing_extension")
        return cls(rnd, suite, HelloExtension.decode(exts[EXT_MADTLS], middleboxes, with_echo=True))


def build_client_hello(config: SessionConfig, client_random: bytes | None = None, cookie: bytes = b"",
                       suites: Sequence[int] = SUPPORTED_SUITES) -> tuple[HelloExtension, bytes]:
    """Return the announced extension and the encoded ClientHello handshake message."""
    ext = extension_from_config(config)
    ext.validate()
    hello = ClientHello(client_random or os.urandom(32), cookie, list(suites), ext)
    return ext, HandshakeMessage(HT_CLIENT_HELLO, hello.encode()).encode()


@dataclass
class ServerAdditions:
    """Contexts (rights rows) and templates the server appends to the client's."""

    contexts: list[dict[int, Access]] = field(default_factory=list)
    templates: list[SegmentationInfo] = field(default_factory=list)


def build_server_hello(client_ext: HelloExtension, server_additions: ServerAdditions | None = None,
                       offered_suites: Sequence[int] = SUPPORTED_SUITES,
                       supported: Sequence[int] = SUPPORTED_SUITES,
                       server_random: bytes | None = None) -> tuple[HelloExtension, int, bytes]:
    """Return (replayed extension, selected suite, encoded ServerHello message)."""
    additions = server_additions or ServerAdditions()
    suite = next((s for s in offered_suites if s in supported), None)
    if suite is None:
        raise HandshakeFailure("no mutually supported cipher suite")
    contexts = [dict(row) for row in client_ext.contexts] + [dict(row) for row in additions.contexts]
    templates = list(client_ext.templates) + list(additions.templates)
    if len(templates) > MAX_TEMPLATES or len(contexts) > MAX_CONTEXTS:
        raise HandshakeFailure("server additions exceed the template or context cap")
    for row in additions.contexts:
        if any(not 1 <= mb <= client_ext.n_middleboxes for mb in row):
            raise HandshakeFailure("server context references an unknown middlebox")
    for layout in additions.templates:
        if any(seg.context >= len(contexts) for seg in layout):
            raise HandshakeFailure("server template references an unknown context")
    ext = HelloExtension(list(client_ext.middleboxes), contexts, templates, client_ext.self_verifying,
                         list(offered_suites))
    hello = ServerHello(server_random or os.urandom(32), suite, ext)
    return ext, suite, HandshakeMessage(HT_SERVER_HELLO, hello.encode()).encode()


# -- key blobs -------------------------------------------------------------------

@dataclass(frozen=True)
class KeyBlob:
    target: int
    ciphertext: bytes

    def encode(self) -> bytes:
        return bytes([self.target]) + _vec(self.ciphertext, 2)


def blob_key_order(entity: int, rights: AccessRights) -> list[tuple[str, int]]:
    """Slots of a blob plaintext: own read, own write, phi read, phi write, then stream keys."""
    readable = [c for c in rights.contexts if rights.get(c, entity) is not Access.NONE]
    writable = [c for c in readable if rights.get(c, entity) is Access.WRITE]
    return ([("read", c) for c in readable] + [("write", c) for c in writable]
            + [("prev_read", c) for c in readable] + [("prev_write", c) for c in writable]
            + [("enc", c) for c in readable])


def blob_plaintext(keys: EntityKeys, rights: AccessRights) -> bytes:
    return b"".join(getattr(keys, slot)[ctx] for slot, ctx in blob_key_order(keys.entity, rights))


def _blob_nonce(handshake_nonce: bytes, target: int) -> bytes:
    return crypto.sha256(handshake_nonce + bytes([target]))[:12]


def _blob_aad(target: int) -> bytes:
    return b"madtls key blob" + bytes([target])


def build_client_key_exchange(matrix: KeyMatrix, rights: AccessRights, handshake_nonce: bytes,
                              psk_identity: bytes = b"client") -> tuple[list[KeyBlob], bytes]:
    blobs = []
    for mb in rights.middleboxes:
        if not rights.has_any(mb):
            continue
        if mb not in matrix.kd_keys:
            raise ConfigurationError(f"no key distribution key for middlebox {mb}")
        plain = blob_plaintext(matrix.column(mb, rights), rights)
        sealed = crypto.aead_seal(matrix.kd_keys[mb], _blob_nonce(handshake_nonce, mb), plain, _blob_aad(mb))
        blobs.append(KeyBlob(mb, sealed))
    body = _vec(psk_identity, 2) + bytes([len(blobs)]) + b"".join(b.encode() for b in blobs)
    return blobs, HandshakeMessage(HT_CLIENT_KEY_EXCHANGE, body).encode()


def parse_client_key_exchange(body: bytes) -> tuple[bytes, list[KeyBlob]]:
    r = _Reader(body)
    identity = r.vec(2)
    blobs = []
    for _ in range(r.uint(1)):
        target = r.uint(1)
        blobs.append(KeyBlob(target, r.vec(2)))
    if not r.done():
        raise ProtocolError("trailing bytes in ClientKeyExchange")
    return identity, blobs


def open_blob(blob: KeyBlob, kd_key: bytes, handshake_nonce: bytes, rights: AccessRights,
              entity: int | None = None) -> EntityKeys:
    """Decrypt ``blob`` with ``kd_key``; ``entity`` defaults to the blob's target."""
    entity = blob.target if entity is None else entity
    try:
        plain = crypto.aead_open(kd_key, _blob_nonce(handshake_nonce, entity), blob.ciphertext, _blob_aad(entity))
    except InvalidTag:
        raise HandshakeFailure(f"key blob for middlebox {entity} failed authentication", "decrypt_error") from None
    order = blob_key_order(entity, rights)
    if len(plain) != KEY_SIZE * len(order):
        raise HandshakeFailure("key blob has the wrong size", "decode_error")
    slots: dict[str, dict[int, bytes]] = {"read": {}, "write": {}, "prev_read": {}, "prev_write": {}, "enc": {}}
    for n, (slot, ctx) in enumerate(order):
        slots[slot][ctx] = plain[n * KEY_SIZE:(n + 1) * KEY_SIZE]
    return EntityKeys(entity, **slots)


def process_key_exchange_at_middlebox(blobs: Sequence[KeyBlob], kd_key: bytes, entity: int,
                                      handshake_nonce: bytes, rights: AccessRights) -> EntityKeys:
    own = [b for b in blobs if b.target == entity]
    if not own:
        raise HandshakeFailure(f"no key blob for middlebox {entity}")
    return open_blob(own[0], kd_key, handshake_nonce, rights, entity)


# -- endpoint and middlebox state machines ---------------------------------------

@dataclass
class SessionState:
    phase: Phase = Phase.IDLE
    suite: int | None = None
    handshake_nonce: bytes | None = None
    matrix: KeyMatrix | None = None
    templates: TemplateTable | None = None
    config: SessionConfig | None = None
    master_secret: bytes | None = None

    def require(self, *phases: Phase) -> None:
        if self.phase not in phases:
            raise HandshakeFailure(f"unexpected message in phase {self.phase.value}", "unexpected_message")


Record = tuple[int, int, bytes]  # (content_type, epoch, payload)


def encode_dtls_record(content_type: int, epoch: int, sequence: int, payload: bytes) -> bytes:
    return (bytes([content_type]) + DTLS12_VERSION + epoch.to_bytes(2, "big") + sequence.to_bytes(6, "big")
            + len(payload).to_bytes(2, "big") + payload)


def decode_dtls_record(wire: bytes) -> Record:
    if len(wire) < 13:
        raise ProtocolError("truncated record")
    length = int.from_bytes(wire[11:13], "big")
    if len(wire) != 13 + length:
        raise ProtocolError("record length mismatch")
    if wire[0] not in (CT_HANDSHAKE, CT_CHANGE_CIPHER_SPEC):
        raise ProtocolError(f"unexpected content type 0x{wire[0]:02x} during the handshake")
    if wire[1:3] != DTLS12_VERSION:
        raise ProtocolError("unsupported record version")
    return wire[0], int.from_bytes(wire[3:5], "big"), wire[13:]


def _flight_names(flight: Sequence[bytes]) -> tuple[str, ...]:
    names = []
    for wire in flight:
        ct, _, payload = decode_dtls_record(wire)
        names.append("ChangeCipherSpec" if ct == CT_CHANGE_CIPHER_SPEC else HandshakeMessage.decode(payload).name)
    return tuple(names)


def _is_subsequence(sub: Sequence[int], full: Sequence[int]) -> bool:
    it = iter(full)
    return all(s in it for s in sub)


class _Endpoint:
    def __init__(self, psk_sr: bytes):
        self.psk_sr = psk_sr
        self.state = SessionState()
        self.transcript = bytearray()
        self._seq = 0
        self._msg_seq = 0
        self._peer_seq: int | None = None
        self._peer_record_seq: int | None = None

    def _record(self, content_type: int, epoch: int, payload: bytes) -> bytes:
        wire = encode_dtls_record(content_type, epoch, self._seq, payload)
        self._seq += 1
        return wire

    def _handshake(self, msg_type: int, body: bytes, epoch: int = 0) -> tuple[bytes, bytes]:
        msg = HandshakeMessage(msg_type, body, self._msg_seq).encode()
        self._msg_seq += 1
        return msg, self._record(CT_HANDSHAKE, epoch, msg)

    def _messages(self, flight: Sequence[bytes], expected: Sequence[str]) -> list[HandshakeMessage | None]:
        try:
            names = _flight_names(flight)
        except ProtocolError as exc:
            raise HandshakeFailure(str(exc), "decode_error") from None
        if names != tuple(expected):
            raise HandshakeFailure(f"expected flight {expected}, got {names}", "unexpected_message")
        out = []
        for name, wire in zip(names, flight):
            ct, epoch, payload = decode_dtls_record(wire)
            # the simulated handshake is lossless and in order, so record numbers must be consecutive
            record_seq = int.from_bytes(wire[5:11], "big")
            if self._peer_record_seq is not None and record_seq != self._peer_record_seq:
                raise HandshakeFailure(f"{name} has record sequence {record_seq}, expected {self._peer_record_seq}",
                                       "unexpected_message")
            self._peer_record_seq = record_seq + 1
            if epoch != (1 if name == "Finished" else 0):
                raise HandshakeFailure(f"{name} in epoch {epoch}", "unexpected_message")
            if ct == CT_CHANGE_CIPHER_SPEC:
                if payload != b"\x01":
                    raise HandshakeFailure("malformed ChangeCipherSpec", "decode_error")
                out.append(None)
                continue
            msg = HandshakeMessage.decode(payload)
            if self._peer_seq is not None and msg.message_seq != self._peer_seq:
                raise HandshakeFailure(f"{name} has message_seq {msg.message_seq}, expected {self._peer_seq}",
                                       "unexpected_message")
            self._peer_seq = msg.message_seq + 1
            out.append(msg)
        return out


def _replace_suites(body: bytes, suites: bytes) -> bytes:
    """ClientHello body with the cipher suite vector swapped, every other byte untouched."""
    r = _Reader(body)
    r.take(2 + 32)
    r.vec(1)
    r.vec(1)
    start = r.pos
    r.vec(2)
    return body[:start] + _vec(suites, 2) + body[r.pos:]


def _client_hello_for_transcript(msg: HandshakeMessage) -> bytes:
    # middleboxes may strip suites in flight, so only that list is left out of the transcript
    return HandshakeMessage(msg.msg_type, _replace_suites(msg.body, b""), msg.message_seq).encode()


def _decode_errors_as_alerts(method):
    def wrapper(self, *args, **kwargs):
        try:
            return method(self, *args, **kwargs)
        except (ProtocolError, ConfigurationError) as exc:
            raise HandshakeFailure(str(exc), "decode_error") from None
    return wrapper


class ClientHandshake(_Endpoint):
    def __init__(self, config: SessionConfig, psk_sr: bytes, psks_sm: Mapping[int, bytes],
                 suites: Sequence[int] = SUPPORTED_SUITES, cookie: bytes = b"",
                 client_random: bytes | None = None, request_certificates: bool = False):
        super().__init__(psk_sr)
        self.config = config
        self.psks_sm = dict(psks_sm)
        self.suites = list(suites)
        self.cookie = cookie
        self.random = client_random or os.urandom(32)
        self.request_certificates = request_certificates
        self.blobs: list[KeyBlob] = []

    def start(self) -> list[bytes]:
        self.state.require(Phase.IDLE)
        self.extension = extension_from_config(self.config)
        hello = ClientHello(self.random, self.cookie, self.suites, self.extension, self.request_certificates)
        msg, wire = self._handshake(HT_CLIENT_HELLO, hello.encode())
        self.transcript += _client_hello_for_transcript(HandshakeMessage.decode(msg))
        self._peer_seq = self._msg_seq
        self.state.phase = Phase.HELLO_SENT
        return [wire]

    @_decode_errors_as_alerts
    def on_server_flight(self, flight: Sequence[bytes]) -> list[bytes]:
        self.state.require(Phase.HELLO_SENT)
        sh_msg, done_msg = self._messages(flight, ("ServerHello", "ServerHelloDone"))
        server_hello = ServerHello.decode(sh_msg.body, self.extension.middleboxes)
        ext = server_hello.extension
        if server_hello.suite not in self.suites:
            raise HandshakeFailure("server selected a suite that was never offered", "illegal_parameter")
        if ext.echoed_suites is None or not _is_subsequence(ext.echoed_suites, self.suites):
            raise HandshakeFailure("suite list echoed by server is not a subset of the offer", "illegal_parameter")
        if ext.contexts[:len(self.extension.contexts)] != self.extension.contexts \
                or ext.templates[:len(self.extension.templates)] != self.extension.templates:
            raise HandshakeFailure("server altered announced contexts or templates", "illegal_parameter")
        self.transcript += sh_msg.encode() + done_msg.encode()
        st = self.state
        st.suite = server_hello.suite
        st.handshake_nonce = self.random + server_hello.random
        st.config = ext.session_config()
        st.templates = st.config.templates
        st.matrix = derive_key_matrix(self.psk_sr, self.psks_sm, st.handshake_nonce, st.config.rights)
        st.master_secret = psk_master_secret(self.psk_sr, self.random, server_hello.random)
        st.phase = Phase.HELLO_RECEIVED
        self.blobs, cke = build_client_key_exchange(st.matrix, st.config.rights, st.handshake_nonce)
        cke_msg = HandshakeMessage.decode(cke)
        cke_msg.message_seq = self._msg_seq
        msg, cke_wire = self._handshake(HT_CLIENT_KEY_EXCHANGE, cke_msg.body)
        self.transcript += msg
        ccs = self._record(CT_CHANGE_CIPHER_SPEC, 0, b"\x01")
        verify = finished_verify_data(st.master_secret, b"client finished", bytes(self.transcript))
        fin_msg, fin_wire = self._handshake(HT_FINISHED, verify, epoch=1)
        self.transcript += fin_msg
        st.phase = Phase.KEYS_DISTRIBUTED
        return [cke_wire, ccs, fin_wire]

    @_decode_errors_as_alerts
    def on_server_finished(self, flight: Sequence[bytes]) -> SessionState:
        self.state.require(Phase.KEYS_DISTRIBUTED)
        _, fin = self._messages(flight, ("ChangeCipherSpec", "Finished"))
        expected = finished_verify_data(self.state.master_secret, b"server finished", bytes(self.transcript))
        if not hmac.compare_digest(fin.body, expected):
            raise HandshakeFailure("server Finished does not match the transcript", "decrypt_error")
        self.state.phase = Phase.ESTABLISHED
        return self.state


class ServerHandshake(_Endpoint):
    def __init__(self, psk_sr: bytes, supported: Sequence[int] = SUPPORTED_SUITES,
                 additions: ServerAdditions | None = None, psks_sm: Mapping[int, bytes] | None = None,
                 server_random: bytes | None = None):
        super().__init__(psk_sr)
        self.supported = list(supported)
        self.additions = additions
        self.psks_sm = dict(psks_sm) if psks_sm is not None else None
        self.random = server_random or os.urandom(32)

    @_decode_errors_as_alerts
    def on_client_hello(self, flight: Sequence[bytes]) -> list[bytes]:
        self.state.require(Phase.IDLE)
        (msg,) = self._messages(flight, ("ClientHello",))
        hello = ClientHello.decode(msg.body)
        if hello.request_certificates:
            raise HandshakeFailure("certificate-based middlebox authentication is not supported",
                                   "unsupported_extension")
        self._msg_seq = msg.message_seq + 1
        self.client_random = hello.random
        self.transcript += _client_hello_for_transcript(msg)
        ext, suite, sh = build_server_hello(hello.extension, self.additions, hello.suites, self.supported,
                                            self.random)
        sh_msg = HandshakeMessage.decode(sh)
        sh_msg.message_seq = self._msg_seq
        m1, w1 = self._handshake(HT_SERVER_HELLO, sh_msg.body)
        m2, w2 = self._handshake(HT_SERVER_HELLO_DONE, b"")
        self.transcript += m1 + m2
        st = self.state
        st.suite = suite
        st.handshake_nonce = hello.random + self.random
        st.config = ext.session_config()
        st.templates = st.config.templates
        st.master_secret = psk_master_secret(self.psk_sr, hello.random, self.random)
        st.phase = Phase.HELLO_RECEIVED
        return [w1, w2]

    @_decode_errors_as_alerts
    def on_client_flight(self, flight: Sequence[bytes]) -> list[bytes]:
        self.state.require(Phase.HELLO_RECEIVED)
        cke, _, fin = self._messages(flight, ("ClientKeyExchange", "ChangeCipherSpec", "Finished"))
        st = self.state
        self.transcript += cke.encode()
        expected = finished_verify_data(st.master_secret, b"client finished", bytes(self.transcript))
        if not hmac.compare_digest(fin.body, expected):
            raise HandshakeFailure("client Finished does not match the transcript", "decrypt_error")
        self.transcript += fin.encode()
        rights = st.config.rights
        _, blobs = parse_client_key_exchange(cke.body)
        if self.psks_sm is not None:
            st.matrix = derive_key_matrix(self.psk_sr, self.psks_sm, st.handshake_nonce, rights)
            verify_key_blobs(blobs, st.matrix, rights, st.handshake_nonce)
        else:
            st.matrix = derive_key_matrix_server_only(self.psk_sr, st.handshake_nonce, rights)
        st.phase = Phase.KEYS_DISTRIBUTED
        ccs = self._record(CT_CHANGE_CIPHER_SPEC, 0, b"\x01")
        verify = finished_verify_data(st.master_secret, b"server finished", bytes(self.transcript))
        _, fin_wire = self._handshake(HT_FINISHED, verify, epoch=1)
        st.phase = Phase.ESTABLISHED
        return [ccs, fin_wire]


def derive_key_matrix_server_only(psk_sr: bytes, handshake_nonce: bytes, rights: AccessRights) -> KeyMatrix:
    """Matrix without key-distribution keys, for a receiver that does not hold middlebox PSKs."""
    dummy = {mb: b"\x00" for mb in rights.middleboxes}
    full = derive_key_matrix(psk_sr, dummy, handshake_nonce, rights)
    return KeyMatrix(full.entity_count, full.read_keys, full.write_keys, full.enc_keys, {})


def verify_key_blobs(blobs: Sequence[KeyBlob], matrix: KeyMatrix, rights: AccessRights,
                     handshake_nonce: bytes) -> None:
    """Check every entitled middlebox got exactly its column, sealed under its kd key."""
    expected = {mb for mb in rights.middleboxes if rights.has_any(mb)}
    got = [b.target for b in blobs]
    if sorted(got) != sorted(expected) or len(set(got)) != len(got):
        raise HandshakeFailure("key blob set does not match the announced rights", "decrypt_error")
    for blob in blobs:
        keys = open_blob(blob, matrix.kd_keys[blob.target], handshake_nonce, rights)
        if keys != matrix.column(blob.target, rights):
            raise HandshakeFailure(f"key blob for middlebox {blob.target} carries wrong keys", "decrypt_error")


def _guarded(method):
    """Middlebox handler wrapper: a failure is recorded and the flight forwarded untouched.

    The endpoints' Finished check covers anything that reaches them altered;
    the middlebox itself just ends up without a session.
    """
    def wrapper(self, flight: Sequence[bytes]) -> list[bytes]:
        if self.failure is not None:
            return list(flight)
        try:
            return method(self, flight)
        except HandshakeFailure as exc:
            self.failure = exc
        except (ProtocolError, ConfigurationError, ValueError) as exc:
            self.failure = HandshakeFailure(str(exc), "decode_error")
        self.keys = None
        return list(flight)
    return wrapper


class MiddleboxHandshake:
    """On-path observer: learns its rights, may strip suites, extracts its keys."""

    def __init__(self, address: tuple[str, int], psk_sm: bytes, strip_suites: Sequence[int] = ()):
        self.address = address
        self.psk_sm = psk_sm
        self.strip_suites = set(strip_suites)
        self.phase = Phase.IDLE
        self.entity: int | None = None
        self.config: SessionConfig | None = None
        self.keys: EntityKeys | None = None
        self.client_random = b""
        self.failure: HandshakeFailure | None = None

    @_guarded
    def on_client_hello(self, flight: Sequence[bytes]) -> list[bytes]:
        (wire,) = flight
        _, epoch, payload = decode_dtls_record(wire)
        msg = HandshakeMessage.decode(payload)
        hello = ClientHello.decode(msg.body)
        try:
            self.entity = hello.extension.middleboxes.index(tuple(self.address)) + 1
        except ValueError:
            raise HandshakeFailure(f"middlebox {self.address} not listed in ClientHello") from None
        self.client_random = hello.random
        self.middleboxes = hello.extension.middleboxes
        self.phase = Phase.HELLO_SENT
        if not self.strip_suites:
            return list(flight)
        kept = b"".join(s.to_bytes(2, "big") for s in hello.suites if s not in self.strip_suites)
        msg.body = _replace_suites(msg.body, kept)
        seq = int.from_bytes(wire[5:11], "big")
        return [encode_dtls_record(CT_HANDSHAKE, epoch, seq, msg.encode())]

    @_guarded
    def on_server_flight(self, flight: Sequence[bytes]) -> list[bytes]:
        _, _, payload = decode_dtls_record(flight[0])
        server_hello = ServerHello.decode(HandshakeMessage.decode(payload).body, self.middleboxes)
        self.config = server_hello.extension.session_config()
        self.handshake_nonce = self.client_random + server_hello.random
        self.phase = Phase.HELLO_RECEIVED
        return list(flight)

    @_guarded
    def on_client_key_exchange(self, flight: Sequence[bytes]) -> list[bytes]:
        _, _, payload = decode_dtls_record(flight[0])
        _, blobs = parse_client_key_exchange(HandshakeMessage.decode(payload).body)
        rights = self.config.rights
        if rights.has_any(self.entity):
            kd_key = crypto.kdf(self.psk_sm, [self.handshake_nonce])
            self.keys = process_key_exchange_at_middlebox(blobs, kd_key, self.entity, self.handshake_nonce, rights)
        self.phase = Phase.KEYS_DISTRIBUTED
        return list(flight)

    @_guarded
    def on_server_finished(self, flight: Sequence[bytes]) -> list[bytes]:
        self.phase = Phase.ESTABLISHED
        return list(flight)


# hop hook: (flight_index, link_index, flight) -> flight; link 0 is the link leaving the flight's origin
FlightTamper = Callable[[int, int, list[bytes]], list[bytes]]


@dataclass
class HandshakeResult:
    client: SessionState
    server: SessionState
    middlebox_keys: dict[int, EntityKeys | None]
    middlebox_phases: dict[int, Phase]
    flights: list[tuple[str, ...]]

    @property
    def round_trips_added(self) -> int:
        return len(self.flights) - len(BASELINE_DTLS12_PSK_FLIGHTS)


def run_handshake(config: SessionConfig, psk_sr: bytes, psks_sm: Mapping[int, bytes], *,
                  client_suites: Sequence[int] = SUPPORTED_SUITES,
                  server_supported: Sequence[int] = SUPPORTED_SUITES,
                  additions: ServerAdditions | None = None,
                  strip: Mapping[int, Sequence[int]] | None = None,
                  tamper: FlightTamper | None = None,
                  server_knows_middlebox_psks: bool = True,
                  seed: bytes | None = None) -> HandshakeResult:
    """Drive a complete handshake across the configured middlebox path.

    ``seed`` fixes the client/server randoms for reproducible sessions.
    Raises ``HandshakeFailure`` wherever an entity aborts.
    """
    strip = strip or {}
    c_rand = s_rand = None
    if seed is not None:
        c_rand = crypto.sha256(b"client random" + seed)
        s_rand = crypto.sha256(b"server random" + seed)
    client = ClientHandshake(config, psk_sr, psks_sm, client_suites, client_random=c_rand)
    server = ServerHandshake(psk_sr, server_supported, additions,
                             psks_sm if server_knows_middlebox_psks else None, s_rand)
    boxes = [MiddleboxHandshake(addr, psks_sm.get(mb, b"\x00"), strip.get(mb, ()))
             for mb, addr in zip(config.rights.middleboxes, config.middlebox_addresses)]
    flights: list[tuple[str, ...]] = []

    def forward(index: int, flight: list[bytes], handlers: list[Callable]) -> list[bytes]:
        for link, handler in enumerate([None, *handlers]):
            if handler is not None:
                flight = handler(flight)
            if tamper is not None:
                flight = tamper(index, link, list(flight))
        return flight

    f1 = client.start()
    flights.append(_flight_names(f1))
    f1 = forward(0, f1, [b.on_client_hello for b in boxes])
    f2 = server.on_client_hello(f1)
    flights.append(_flight_names(f2))
    f2 = forward(1, f2, [b.on_server_flight for b in reversed(boxes)])
    f3 = client.on_server_flight(f2)
    flights.append(_flight_names(f3))
    f3 = forward(2, f3, [b.on_client_key_exchange for b in boxes])
    f4 = server.on_client_flight(f3)
    flights.append(_flight_names(f4))
    f4 = forward(3, f4, [b.on_server_finished for b in reversed(boxes)])
    client.on_server_finished(f4)
    for index, box in enumerate(boxes, 1):
        if box.failure is not None:
            raise HandshakeFailure(f"middlebox {index} aborted: {box.failure}", box.failure.alert)
    return HandshakeResult(
        client.state, server.state,
        {b.entity: b.keys for b in boxes},
        {b.entity: b.phase for b in boxes},
        flights,
    )


__all__ = [
    "Phase", "HelloExtension", "ClientHello", "ServerHello", "ServerAdditions", "KeyBlob", "SessionState",
    "build_client_hello", "build_server_hello", "build_client_key_exchange", "parse_client_key_exchange",
    "process_key_exchange_at_middlebox", "open_blob", "blob_plaintext", "blob_key_order", "verify_key_blobs",
    "run_handshake", "HandshakeResult", "BASELINE_DTLS12_PSK_FLIGHTS", "ClientHandshake", "ServerHandshake",
    "MiddleboxHandshake", "finished_verify_data", "psk_master_secret", "prf",
]
