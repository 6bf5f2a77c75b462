"""Record-layer codec and per-segment encryption.

Wire layout (big-endian)::

    content_type(1) version(2) epoch(2) sequence(6) length(2) seg_byte(1)
    [explicit layout] ciphertext(zero-padded) [self-verify tags] main_tag(16)

``seg_byte`` = m-flag (bit 7) | l-flag (bit 6) | template id (bits 0-5).
An explicit layout is a count byte followed by ``(varint bit_length,
context byte)`` pairs. Each self-verify tag is ``target entity(1) tag(16)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from . import crypto
from .access import EntityKeys, MAX_TEMPLATES, Segment, SegmentationInfo, TemplateTable
from .bits import Bits
from .crypto import TAG_SIZE, Nonce
from .errors import ConfigurationError, ProtocolError, UnknownContentType

CT_TEMPLATE_STREAM = 0x1D
CT_RECORD = 0x1E
CT_INJECTED = 0x1F
CT_HANDSHAKE = 0x16
MADTLS_CONTENT_TYPES = (CT_TEMPLATE_STREAM, CT_RECORD, CT_INJECTED)
PROTECTED_CONTENT_TYPES = (CT_RECORD, CT_INJECTED)

DTLS12_VERSION = b"\xfe\xfd"
DTLS_HEADER_SIZE = 13
MIN_RECORD_SIZE = DTLS_HEADER_SIZE + 1 + TAG_SIZE
SELF_VERIFY_ENTRY_SIZE = 1 + TAG_SIZE

M_FLAG = 0x80
L_FLAG = 0x40


def encode_layout(layout: SegmentationInfo) -> bytes:
    if len(layout) > 0xFF:
        raise ConfigurationError("at most 255 segments in an explicit layout")
    out = bytearray([len(layout)])
    for seg in layout:
        out += crypto.encode_varint(seg.bit_length) + bytes([seg.context])
    return bytes(out)


def decode_layout(buf: bytes, pos: int = 0) -> tuple[SegmentationInfo, int]:
    try:
        count = buf[pos]
        pos += 1
        segs = []
        for _ in range(count):
            nbits, pos = crypto.decode_varint(buf, pos)
            segs.append(Segment(nbits, buf[pos]))
            pos += 1
        return SegmentationInfo(tuple(segs)), pos
    except (IndexError, ValueError) as exc:
        raise ProtocolError(f"bad segmentation info: {exc}") from None


@dataclass(frozen=True)
class RecordHeader:
    content_type: int
    version: bytes
    epoch: int
    sequence: int
    length: int
    m_flag: bool
    l_flag: bool
    template_id: int

    @property
    def seg_byte(self) -> int:
        return (M_FLAG if self.m_flag else 0) | (L_FLAG if self.l_flag else 0) | self.template_id

    @property
    def nonce(self) -> Nonce:
        return Nonce(self.epoch, self.sequence)

    def to_bytes(self) -> bytes:
        return (bytes([self.content_type]) + self.version + self.epoch.to_bytes(2, "big")
                + self.sequence.to_bytes(6, "big") + self.length.to_bytes(2, "big")
                + bytes([self.seg_byte]))


@dataclass(frozen=True)
class ProtectedRecord:
    content_type: int
    epoch: int
    sequence: int
    ciphertext: Bits
    main_tag: bytes
    template_id: int | None = None
    explicit_layout: SegmentationInfo | None = None
    self_verify_tags: tuple[tuple[int, bytes], ...] = ()
    m_flag: bool = False
    version: bytes = DTLS12_VERSION

    def __post_init__(self) -> None:
        if (self.template_id is None) == (self.explicit_layout is None):
            raise ConfigurationError("exactly one of template_id / explicit_layout")
        if self.template_id is not None and not 0 <= self.template_id < MAX_TEMPLATES:
            raise ConfigurationError("template id outside 0..63")
        if len(self.main_tag) != TAG_SIZE:
            raise ConfigurationError("main tag must be 16 bytes")
        if self.self_verify_tags and not self.m_flag:
            raise ConfigurationError("self-verify tags need the m-flag")
        targets = [t for t, _ in self.self_verify_tags]
        if targets != sorted(set(targets)):
            raise ConfigurationError("self-verify tags must be in ascending target order")
        if any(len(tag) != TAG_SIZE for _, tag in self.self_verify_tags):
            raise ConfigurationError("self-verify tags must be 16 bytes")
        if self.explicit_layout is not None and self.explicit_layout.total_bits != self.ciphertext.nbits:
            raise ConfigurationError("layout/ciphertext length mismatch")

    @property
    def nonce(self) -> Nonce:
        return Nonce(self.epoch, self.sequence)

    def layout(self, templates: TemplateTable) -> SegmentationInfo:
        if self.explicit_layout is not None:
            return self.explicit_layout
        if self.template_id not in templates:
            raise ProtocolError(f"unknown template id {self.template_id}")
        return templates[self.template_id]

    def body_length(self) -> int:
        layout_len = len(encode_layout(self.explicit_layout)) if self.explicit_layout is not None else 0
        return (1 + layout_len + len(self.ciphertext.data)
                + SELF_VERIFY_ENTRY_SIZE * len(self.self_verify_tags) + TAG_SIZE)

    @property
    def header(self) -> RecordHeader:
        return RecordHeader(self.content_type, self.version, self.epoch, self.sequence,
                            self.body_length(), self.m_flag, self.explicit_layout is not None,
                            self.template_id or 0)

    def self_verify_tag(self, target: int) -> bytes | None:
        return dict(self.self_verify_tags).get(target)

    def with_self_verify(self, tags: Mapping[int, bytes]) -> ProtectedRecord:
        return replace(self, self_verify_tags=tuple(sorted(tags.items())))

    def segments(self, layout: SegmentationInfo) -> list[Bits]:
        return self.ciphertext.split(layout.lengths)


def encode_record(record: ProtectedRecord, templates: TemplateTable | None = None) -> bytes:
    """Serialize ``record``; pass ``templates`` to check the ciphertext length of template records."""
    if templates is not None and record.template_id is not None:
        if record.layout(templates).total_bits != record.ciphertext.nbits:
            raise ConfigurationError("layout/ciphertext length mismatch")
    length = record.body_length()
    if length > 0xFFFF:
        raise ConfigurationError("record too long")
    out = bytearray(record.header.to_bytes())
    if record.explicit_layout is not None:
        out += encode_layout(record.explicit_layout)
    out += record.ciphertext.data
    for target, tag in record.self_verify_tags:
        out += bytes([target]) + tag
    out += record.main_tag
    return bytes(out)


def decode_record(wire: bytes, templates: TemplateTable) -> tuple[ProtectedRecord, SegmentationInfo]:
    if len(wire) < 1:
        raise ProtocolError("empty datagram")
    if wire[0] not in PROTECTED_CONTENT_TYPES:
        raise UnknownContentType(f"content type 0x{wire[0]:02x}")
    if len(wire) < MIN_RECORD_SIZE:
        raise ProtocolError("truncated record")
    content_type = wire[0]
    version = wire[1:3]
    if version != DTLS12_VERSION:
        raise ProtocolError(f"unsupported version {version.hex()}")
    epoch = int.from_bytes(wire[3:5], "big")
    sequence = int.from_bytes(wire[5:11], "big")
    length = int.from_bytes(wire[11:13], "big")
    if len(wire) - DTLS_HEADER_SIZE != length:
        raise ProtocolError(f"length field {length} does not match {len(wire) - DTLS_HEADER_SIZE} payload bytes")
    seg_byte = wire[13]
    m_flag, l_flag, tid = bool(seg_byte & M_FLAG), bool(seg_byte & L_FLAG), seg_byte & 0x3F
    pos = 14
    explicit = None
    if l_flag:
        explicit, pos = decode_layout(wire, pos)
        layout = explicit
    else:
        if tid not in templates:
            raise ProtocolError(f"unknown template id {tid}")
        layout = templates[tid]
    ct_len = (layout.total_bits + 7) // 8
    rest = len(wire) - pos - ct_len - TAG_SIZE
    if rest < 0:
        raise ProtocolError("truncated record")
    n_sv, extra = divmod(rest, SELF_VERIFY_ENTRY_SIZE)
    if extra:
        raise ProtocolError("record length inconsistent with layout")
    if m_flag != bool(n_sv):
        raise ProtocolError("m-flag does not match the self-verify tags present")
    try:
        ciphertext = Bits(wire[pos:pos + ct_len], layout.total_bits)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None
    pos += ct_len
    sv = []
    for _ in range(n_sv):
        sv.append((wire[pos], wire[pos + 1:pos + SELF_VERIFY_ENTRY_SIZE]))
        pos += SELF_VERIFY_ENTRY_SIZE
    main_tag = wire[pos:pos + TAG_SIZE]
    try:
        record = ProtectedRecord(
            content_type=content_type, epoch=epoch, sequence=sequence, ciphertext=ciphertext,
            main_tag=main_tag, template_id=None if l_flag else tid, explicit_layout=explicit,
            self_verify_tags=tuple(sv), m_flag=m_flag, version=version,
        )
    except ConfigurationError as exc:
        raise ProtocolError(str(exc)) from None
    return record, layout


def dtls12_record_size(payload_bytes: int) -> int:
    """Size of a plain DTLS 1.2 record with a 16-byte tag."""
    return DTLS_HEADER_SIZE + payload_bytes + TAG_SIZE


def encrypt_segment(plain: Bits, index: int, layout: SegmentationInfo, enc_keys: Mapping[int, bytes],
                    nonce: Nonce, session_label: bytes = crypto.DEFAULT_SESSION_LABEL) -> Bits:
    """Transform one segment; encryption and decryption are the same operation."""
    ctx = layout.segments[index].context
    if ctx not in enc_keys:
        raise ConfigurationError(f"no encryption key for context {ctx}")
    if plain.nbits != layout.segments[index].bit_length:
        raise ConfigurationError(f"segment {index} must be {layout.segments[index].bit_length} bits")
    offset = layout.context_offsets()[index]
    return crypto.keystream_xor(enc_keys[ctx], nonce, ctx, offset, plain, session_label)


def encrypt_segments(plaintext: Bits, layout: SegmentationInfo, enc_keys: Mapping[int, bytes],
                     nonce: Nonce, session_label: bytes = crypto.DEFAULT_SESSION_LABEL) -> Bits:
    if plaintext.nbits != layout.total_bits:
        raise ConfigurationError(f"plaintext is {plaintext.nbits} bits, layout needs {layout.total_bits}")
    missing = layout.contexts - set(enc_keys)
    if missing:
        raise ConfigurationError(f"no encryption key for contexts {sorted(missing)}")
    parts = plaintext.split(layout.lengths)
    return Bits.concat(encrypt_segment(p, i, layout, enc_keys, nonce, session_label)
                       for i, p in enumerate(parts))


def decrypt_segments_for(keys: EntityKeys, ciphertext: Bits, layout: SegmentationInfo, nonce: Nonce,
                         session_label: bytes = crypto.DEFAULT_SESSION_LABEL) -> dict[int, Bits]:
    """Plaintext of exactly the segments whose context ``keys`` can decrypt."""
    parts = ciphertext.split(layout.lengths)
    return {
        i: encrypt_segment(part, i, layout, keys.enc, nonce, session_label)
        for i, part in enumerate(parts)
        if layout.segments[i].context in keys.enc
    }


@dataclass
class RecordStats:
    """Wire sizes for one record versus a plain DTLS 1.2 record with the same payload."""

    wire_bytes: int
    payload_bytes: int
    dtls12_bytes: int = field(init=False)

    def __post_init__(self) -> None:
        self.dtls12_bytes = dtls12_record_size(self.payload_bytes)

    @property
    def overhead_vs_dtls12(self) -> int:
        return self.wire_bytes - self.dtls12_bytes
