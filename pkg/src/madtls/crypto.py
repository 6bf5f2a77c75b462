"""Cryptographic primitives: segment MAC, per-context keystream, KDF, key-blob AEAD.

Everything here is a pure function of its inputs. The only shared state is
an optional per-task call counter used by the simulator and benchmarks to
report how many primitive invocations a hop performed.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import hmac
from dataclasses import dataclass
from typing import Iterator, Sequence

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .bits import Bits
from .errors import ConfigurationError

KEY_SIZE = 32
TAG_SIZE = 16
ZERO_TAG = bytes(TAG_SIZE)

DEFAULT_SESSION_LABEL = b"MDTL"
# 3-byte block counter x 128-bit AES blocks
KEYSTREAM_SPAN_BITS = (1 << 24) * 128

MAX_EPOCH = 0xFFFF
MAX_SEQUENCE = (1 << 48) - 1


@dataclass(frozen=True)
class Nonce:
    epoch: int
    sequence: int

    def __post_init__(self) -> None:
        if not 0 <= self.epoch <= MAX_EPOCH:
            raise ValueError(f"epoch {self.epoch} outside 16 bits")
        if not 0 <= self.sequence <= MAX_SEQUENCE:
            raise ValueError(f"sequence {self.sequence} outside 48 bits")

    def to_bytes(self) -> bytes:
        return self.epoch.to_bytes(2, "big") + self.sequence.to_bytes(6, "big")


@dataclass
class PrimitiveCounter:
    mac: int = 0
    cipher: int = 0
    kdf: int = 0
    aead: int = 0

    def snapshot(self) -> dict[str, int]:
        return {"mac": self.mac, "cipher": self.cipher, "kdf": self.kdf, "aead": self.aead}


_counter: contextvars.ContextVar[PrimitiveCounter | None] = contextvars.ContextVar(
    "madtls_primitive_counter", default=None
)


@contextlib.contextmanager
def count_primitives() -> Iterator[PrimitiveCounter]:
    """Count primitive invocations made inside the ``with`` block."""
    counter = PrimitiveCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def encode_varint(value: int) -> bytes:
    """Unsigned LEB128."""
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(buf: bytes, pos: int = 0) -> tuple[int, int]:
    """Return ``(value, next_pos)``."""
    value, shift = 0, 0
    while True:
        if pos >= len(buf):
            raise ValueError("truncated varint")
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ValueError("varint too long")


def mac_input(domain_tag: bytes, data: Bits) -> bytes:
    """Canonical MAC input: domain tag, bit length, zero-padded data."""
    return domain_tag + encode_varint(data.nbits) + data.data


def mac(key: bytes, domain_tag: bytes, data: Bits) -> bytes:
    """HMAC-SHA256 over the canonical encoding, truncated to 16 bytes."""
    counter = _counter.get()
    if counter is not None:
        counter.mac += 1
    return hmac.digest(key, mac_input(domain_tag, data), "sha256")[:TAG_SIZE]


def xor_bytes(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def xor_all(tags: Iterator[bytes] | Sequence[bytes]) -> bytes:
    acc = 0
    for tag in tags:
        acc ^= int.from_bytes(tag, "big")
    return acc.to_bytes(TAG_SIZE, "big")


def ctr_iv(nonce: Nonce, context_index: int, block: int = 0,
           session_label: bytes = DEFAULT_SESSION_LABEL) -> bytes:
    if len(session_label) != 4:
        raise ValueError("session label must be 4 bytes")
    if not 0 <= context_index <= 0xFF:
        raise ValueError("context index must fit one byte")
    return session_label + nonce.to_bytes() + bytes([context_index]) + block.to_bytes(3, "big")


def keystream_xor(key: bytes, nonce: Nonce, context_index: int, bit_offset: int, data: Bits,
                  session_label: bytes = DEFAULT_SESSION_LABEL) -> Bits:
    """XOR ``data`` with the AES-256-CTR keystream bits starting at ``bit_offset``.

    Involutive and length preserving. Raises ``ValueError`` when the requested
    range leaves the per-record keystream span.
    """
    if len(key) != KEY_SIZE:
        raise ValueError("stream key must be 32 bytes")
    if bit_offset < 0 or bit_offset + data.nbits > KEYSTREAM_SPAN_BITS:
        raise ValueError("keystream span overflow")
    if not data.nbits:
        return data
    counter = _counter.get()
    if counter is not None:
        counter.cipher += 1
    first_block, skip = divmod(bit_offset, 128)
    nbytes = (skip + data.nbits + 7) // 8
    enc = Cipher(algorithms.AES(key), modes.CTR(ctr_iv(nonce, context_index, first_block, session_label))).encryptor()
    stream = enc.update(bytes(nbytes)) + enc.finalize()
    window = int.from_bytes(stream, "big") >> (nbytes * 8 - skip - data.nbits)
    window &= (1 << data.nbits) - 1
    return Bits.from_int(window ^ data.to_int(), data.nbits)


def encode_labels(labels: Sequence[bytes]) -> bytes:
    out = bytearray()
    for label in labels:
        if len(label) > 0xFFFF:
            raise ValueError("label too long")
        out += len(label).to_bytes(2, "big") + label
    return bytes(out)


def kdf(secret: bytes, labels: Sequence[bytes]) -> bytes:
    """HKDF-SHA256 (no salt) with length-prefixed labels as ``info``."""
    if not secret:
        raise ConfigurationError("KDF secret must be non-empty")
    counter = _counter.get()
    if counter is not None:
        counter.kdf += 1
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None,
                info=encode_labels(labels)).derive(secret)


def aead_seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    counter = _counter.get()
    if counter is not None:
        counter.aead += 1
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    """Raises ``cryptography.exceptions.InvalidTag`` on any tampering or wrong key."""
    counter = _counter.get()
    if counter is not None:
        counter.aead += 1
    return AESGCM(key).decrypt(nonce, ciphertext, aad)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
