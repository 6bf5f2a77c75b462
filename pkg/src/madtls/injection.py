"""Limited message injection through endpoint-authenticated templates.

The sender pre-computes, for each sequence number it grants, the record a
middlebox would receive had the template travelled the path from the sender
honestly: fixed-segment ciphertext, placeholder ciphertext (encrypted zero
bits) and the aggregated tag as it arrives at the injector. The injector
fills its placeholders through the ordinary writer update, so every
downstream hop and the receiver process injected records like regular ones.

Injected records are content type 0x1F under their own epochs, allocated
from 65535 downwards; regular traffic uses epochs counting up from 1.
Grants travel to the injector in 0x1D records sealed under a key derived
from its key-distribution key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidTag

from . import crypto
from .access import Access, KeyKind, KeyMatrix, SessionConfig, SegmentationInfo
from .bits import Bits
from .crypto import Nonce, TAG_SIZE, xor_all, xor_bytes
from .errors import ConfigurationError, ProtocolError, ReplayError
from .record import (CT_INJECTED, CT_TEMPLATE_STREAM, DTLS12_VERSION, ProtectedRecord, decode_layout,
                     encode_layout, encode_record, encrypt_segment)
from .session import Middlebox
from .tags import Sigma, TagDomain, build_view, hop_update


class EpochAllocator:
    """Hands out injection epochs from the top of the epoch space downwards."""

    def __init__(self, regular_epoch: int = 1):
        self.regular_epoch = regular_epoch
        self.next_epoch = crypto.MAX_EPOCH
        self.assigned: dict[tuple[int, int], int] = {}

    def allocate(self, injector: int, template_id: int) -> int:
        slot = (injector, template_id)
        if slot in self.assigned:
            return self.assigned[slot]
        if self.next_epoch <= self.regular_epoch:
            raise ConfigurationError("no free future epoch for injection")
        epoch = self.next_epoch
        self.next_epoch -= 1
        self.assigned[slot] = epoch
        return epoch

    def advance_regular(self, epoch: int) -> None:
        if epoch >= self.next_epoch + 1 and any(e <= epoch for e in self.assigned.values()):
            raise ConfigurationError("regular epoch would collide with an injection epoch")
        self.regular_epoch = epoch


@dataclass(frozen=True)
class TemplateGrant:
    """Everything the injector needs to emit one sequence number."""

    sequence: int
    ciphertext: Bits
    base_tag: bytes


@dataclass
class MessageTemplate:
    template_id: int
    layout: SegmentationInfo
    placeholders: frozenset[int]
    injector: int
    epoch: int
    grants: dict[int, TemplateGrant] = field(default_factory=dict)
    issuer: int = 0

    @property
    def fixed(self) -> list[int]:
        return [i for i in range(len(self.layout)) if i not in self.placeholders]

    @property
    def highest_sequence(self) -> int:
        return max(self.grants, default=-1)


def _base_tag(matrix: KeyMatrix, layout: SegmentationInfo, segments: Sequence[Bits], injector: int,
              sigma: Sigma) -> bytes:
    # the tag an honest path would deliver to the injector: last key owners before it
    return xor_all(
        xor_bytes(sigma(matrix.key(KeyKind.READ, seg.context, matrix.phi_owner(seg.context, injector, KeyKind.READ)),
                        i, segments[i]),
                  sigma(matrix.key(KeyKind.WRITE, seg.context, matrix.phi_owner(seg.context, injector, KeyKind.WRITE)),
                        i, segments[i]))
        for i, seg in enumerate(layout)
    )


def _check_template(config: SessionConfig, layout: SegmentationInfo, placeholders: frozenset[int],
                    injector: int) -> None:
    rights = config.rights
    if injector not in rights.middleboxes:
        raise ConfigurationError(f"injector {injector} is not a middlebox")
    for i, seg in enumerate(layout):
        if seg.context >= rights.context_count:
            raise ConfigurationError(f"segment {i} references unknown context {seg.context}")
        can_write = rights.get(seg.context, injector) is Access.WRITE
        if i in placeholders:
            if not can_write:
                raise ConfigurationError(f"injector lacks write access to placeholder segment {i}")
            others = [mb for mb in rights.middleboxes
                      if mb != injector and rights.get(seg.context, mb) is Access.WRITE]
            if others:
                raise ConfigurationError(f"placeholder context {seg.context} is writable by {others}")
        elif can_write:
            raise ConfigurationError(f"fixed segment {i} lies in a context the injector can write")
    if any(not 0 <= i < len(layout) for i in placeholders):
        raise ConfigurationError("placeholder index out of range")


def _grants(config: SessionConfig, matrix: KeyMatrix, template: MessageTemplate, fixed_plaintext: Sequence[Bits],
            sequences: Iterable[int], session_label: bytes) -> dict[int, TemplateGrant]:
    out = {}
    enc = matrix.enc_keys
    for seq in sequences:
        nonce = Nonce(template.epoch, seq)
        segments = []
        for i, seg in enumerate(template.layout):
            plain = Bits.zeros(seg.bit_length) if i in template.placeholders else fixed_plaintext[i]
            segments.append(encrypt_segment(plain, i, template.layout, enc, nonce, session_label))
        sigma = Sigma(TagDomain(CT_INJECTED, nonce))
        tag = _base_tag(matrix, template.layout, segments, template.injector, sigma)
        out[seq] = TemplateGrant(seq, Bits.concat(segments), tag)
    return out


class TemplateIssuer:
    """Endpoint-side bookkeeping for templates it has authenticated."""

    def __init__(self, config: SessionConfig, matrix: KeyMatrix, allocator: EpochAllocator | None = None,
                 session_label: bytes = crypto.DEFAULT_SESSION_LABEL):
        self.config = config
        self.matrix = matrix
        self.allocator = allocator or EpochAllocator()
        self.session_label = session_label
        self.templates: dict[tuple[int, int], MessageTemplate] = {}
        self._fixed: dict[tuple[int, int], list[Bits]] = {}
        self._stream_seq = 0

    def issue_template(self, template_id: int, layout: SegmentationInfo, placeholders: Iterable[int],
                       injector: int, sequences: Iterable[int], fixed_plaintext: Bits) -> MessageTemplate:
        placeholders = frozenset(placeholders)
        _check_template(self.config, layout, placeholders, injector)
        if fixed_plaintext.nbits != layout.total_bits:
            raise ConfigurationError("template plaintext must cover the whole layout")
        slot = (injector, template_id)
        if slot in self.templates:
            raise ConfigurationError(f"template {template_id} already issued to middlebox {injector}")
        epoch = self.allocator.allocate(injector, template_id)
        template = MessageTemplate(template_id, layout, placeholders, injector, epoch)
        parts = fixed_plaintext.split(layout.lengths)
        template.grants = _grants(self.config, self.matrix, template, parts, sorted(set(sequences)),
                                  self.session_label)
        self.templates[slot] = template
        self._fixed[slot] = parts
        return template

    def extend(self, template: MessageTemplate, sequences: Iterable[int]) -> dict[int, TemplateGrant]:
        """Grant more sequence numbers without re-sending the template itself."""
        sequences = sorted(set(sequences))
        overlap = [s for s in sequences if s in template.grants]
        if overlap:
            raise ConfigurationError(f"sequences {overlap} already granted")
        new = _grants(self.config, self.matrix, template, self._fixed[(template.injector, template.template_id)],
                      sequences, self.session_label)
        template.grants.update(new)
        return new

    def stream_record(self, template: MessageTemplate, grants: Mapping[int, TemplateGrant] | None = None,
                      include_template: bool = True) -> bytes:
        """Seal a template (and/or extra grants) for the injector in a 0x1D record."""
        kd = self.matrix.kd_keys.get(template.injector)
        if kd is None:
            raise ConfigurationError(f"no key distribution key for middlebox {template.injector}")
        seq = self._stream_seq
        self._stream_seq += 1
        payload = encode_template_stream(template, template.grants if grants is None else grants, include_template)
        return seal_stream_record(kd, template.epoch, seq, payload)


def _stream_key(kd_key: bytes) -> bytes:
    return crypto.kdf(kd_key, [b"template stream"])


def seal_stream_record(kd_key: bytes, epoch: int, sequence: int, payload: bytes) -> bytes:
    header_wo_len = bytes([CT_TEMPLATE_STREAM]) + DTLS12_VERSION + epoch.to_bytes(2, "big") + sequence.to_bytes(6, "big")
    sealed_len = len(payload) + 16
    header = header_wo_len + sealed_len.to_bytes(2, "big")
    nonce = bytes(4) + header_wo_len[3:11]
    return header + crypto.aead_seal(_stream_key(kd_key), nonce, payload, header)


def open_stream_record(kd_key: bytes, wire: bytes) -> bytes:
    if len(wire) < 13 or wire[0] != CT_TEMPLATE_STREAM:
        raise ProtocolError("not a template stream record")
    header = wire[:13]
    if int.from_bytes(header[11:13], "big") != len(wire) - 13:
        raise ProtocolError("length mismatch")
    try:
        return crypto.aead_open(_stream_key(kd_key), bytes(4) + header[3:11], wire[13:], header)
    except InvalidTag:
        raise ProtocolError("template stream record failed authentication") from None


def encode_template_stream(template: MessageTemplate, grants: Mapping[int, TemplateGrant],
                           include_template: bool) -> bytes:
    out = bytearray([int(include_template), template.template_id, template.injector])
    out += template.epoch.to_bytes(2, "big")
    if include_template:
        out += encode_layout(template.layout)
        marks = sum(1 << i for i in template.placeholders)
        out += marks.to_bytes((len(template.layout) + 7) // 8, "big")
    out += len(grants).to_bytes(2, "big")
    ct_len = (template.layout.total_bits + 7) // 8
    for seq in sorted(grants):
        g = grants[seq]
        if len(g.ciphertext.data) != ct_len:
            raise ConfigurationError(f"grant {seq} does not match the template length")
        out += seq.to_bytes(6, "big") + g.ciphertext.data + g.base_tag
    return bytes(out)


def decode_template_stream(payload: bytes, known: MessageTemplate | None = None) -> MessageTemplate:
    try:
        has_template, tid, injector = payload[0], payload[1], payload[2]
        epoch = int.from_bytes(payload[3:5], "big")
        pos = 5
        if has_template:
            layout, pos = decode_layout(payload, pos)
            nmark = (len(layout) + 7) // 8
            marks = int.from_bytes(payload[pos:pos + nmark], "big")
            pos += nmark
            template = MessageTemplate(tid, layout, frozenset(i for i in range(len(layout)) if marks >> i & 1),
                                       injector, epoch)
        else:
            if known is None or (known.template_id, known.injector, known.epoch) != (tid, injector, epoch):
                raise ProtocolError("tag stream for an unknown template")
            template = known
        count = int.from_bytes(payload[pos:pos + 2], "big")
        pos += 2
        ct_len = (template.layout.total_bits + 7) // 8
        for _ in range(count):
            seq = int.from_bytes(payload[pos:pos + 6], "big")
            pos += 6
            ct = Bits(payload[pos:pos + ct_len], template.layout.total_bits)
            pos += ct_len
            tag = payload[pos:pos + TAG_SIZE]
            pos += TAG_SIZE
            if len(tag) != TAG_SIZE:
                raise ProtocolError("truncated grant")
            template.grants[seq] = TemplateGrant(seq, ct, tag)
    except (IndexError, ValueError) as exc:
        raise ProtocolError(f"bad template stream: {exc}") from None
    if pos != len(payload):
        raise ProtocolError("trailing bytes in template stream")
    return template


@dataclass
class InjectionBudget:
    middlebox: int
    template_id: int
    highest_issued: int = -1
    consumed: set[int] = field(default_factory=set)

    def consume(self, sequence: int, granted: Iterable[int]) -> None:
        if sequence not in set(granted):
            raise ReplayError(f"sequence {sequence} was never granted")
        if sequence in self.consumed:
            raise ReplayError(f"sequence {sequence} already used")
        self.consumed.add(sequence)


class Injector:
    """Middlebox-side state: received templates and their remaining budget."""

    def __init__(self, middlebox: Middlebox, kd_key: bytes | None = None):
        self.middlebox = middlebox
        self.kd_key = kd_key
        self.templates: dict[int, MessageTemplate] = {}
        self.budgets: dict[int, InjectionBudget] = {}

    @property
    def entity(self) -> int:
        return self.middlebox.entity

    def receive_stream(self, wire: bytes) -> MessageTemplate:
        if self.kd_key is None:
            raise ConfigurationError("injector has no key distribution key")
        payload = open_stream_record(self.kd_key, wire)
        tid = payload[1] if len(payload) > 1 else -1
        template = decode_template_stream(payload, self.templates.get(tid))
        return self.accept_template(template)

    def accept_template(self, template: MessageTemplate) -> MessageTemplate:
        if template.injector != self.entity:
            raise ConfigurationError("template issued to another middlebox")
        self.templates[template.template_id] = template
        budget = self.budgets.setdefault(template.template_id, InjectionBudget(self.entity, template.template_id))
        budget.highest_issued = template.highest_sequence
        return template

    def inject(self, template_id: int, sequence: int, values: Mapping[int, Bits]) -> bytes:
        template = self.templates.get(template_id)
        if template is None:
            raise ConfigurationError(f"no template {template_id}")
        layout = template.layout
        if set(values) != set(template.placeholders):
            raise ConfigurationError("values must fill exactly the placeholder segments")
        for i, v in values.items():
            if v.nbits != layout.segments[i].bit_length:
                raise ConfigurationError(f"value for segment {i} must be {layout.segments[i].bit_length} bits")
        budget = self.budgets[template_id]
        budget.consume(sequence, template.grants)
        return encode_record(build_injected_record(self.middlebox, template, sequence, values))


def build_injected_record(middlebox: Middlebox, template: MessageTemplate, sequence: int,
                          values: Mapping[int, Bits]) -> ProtectedRecord:
    grant = template.grants[sequence]
    layout = template.layout
    nonce = Nonce(template.epoch, sequence)
    old = grant.ciphertext.split(layout.lengths)
    new = list(old)
    for i, value in values.items():
        new[i] = encrypt_segment(value, i, layout, middlebox.keys.enc, nonce, middlebox.session_label)
    view = build_view(middlebox.keys, middlebox.config.rights, layout)
    tag = hop_update(grant.base_tag, view, old, new, Sigma(TagDomain(CT_INJECTED, nonce)))
    tid = next((t for t, lay in middlebox.config.templates.templates.items() if lay == layout), None)
    return ProtectedRecord(
        content_type=CT_INJECTED, epoch=nonce.epoch, sequence=sequence, ciphertext=Bits.concat(new),
        main_tag=tag, template_id=tid, explicit_layout=None if tid is not None else layout,
    )
