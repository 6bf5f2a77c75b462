"""Entities, contexts, access rights, segment layouts and the session key matrix."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from . import crypto
from .errors import AccessViolation, ConfigurationError

MAX_ENTITIES = 255
MAX_CONTEXTS = 64
MAX_TEMPLATES = 64

SENDER = 0


class Access(enum.IntEnum):
    NONE = 0
    READ = 1
    WRITE = 2

    @classmethod
    def parse(cls, value: str | int | Access) -> Access:
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigurationError(f"unknown access right {value!r}") from None
        return cls(value)


class KeyKind(str, enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class Segment:
    bit_length: int
    context: int


@dataclass(frozen=True)
class SegmentationInfo:
    """Ordered, contiguous segments covering a plaintext exactly."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigurationError("a layout needs at least one segment")
        for seg in self.segments:
            if seg.bit_length < 1:
                raise ConfigurationError("segment bit length must be >= 1")
            if not 0 <= seg.context < MAX_CONTEXTS:
                raise ConfigurationError(f"context {seg.context} out of range")

    @classmethod
    def of(cls, *pairs: tuple[int, int]) -> SegmentationInfo:
        """Build from ``(bit_length, context)`` pairs."""
        return cls(tuple(Segment(n, c) for n, c in pairs))

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    @property
    def total_bits(self) -> int:
        return sum(s.bit_length for s in self.segments)

    @property
    def lengths(self) -> list[int]:
        return [s.bit_length for s in self.segments]

    @property
    def contexts(self) -> set[int]:
        return {s.context for s in self.segments}

    def context_offsets(self) -> list[int]:
        """Per-segment keystream offset: bits of earlier segments in the same context."""
        seen: dict[int, int] = {}
        out = []
        for seg in self.segments:
            out.append(seen.get(seg.context, 0))
            seen[seg.context] = seen.get(seg.context, 0) + seg.bit_length
        return out


def delta(layout: SegmentationInfo, segment_index: int) -> int:
    """Context of segment ``segment_index``."""
    if not 0 <= segment_index < len(layout):
        raise IndexError(f"segment {segment_index} out of range for {len(layout)} segments")
    return layout.segments[segment_index].context


@dataclass
class TemplateTable:
    templates: dict[int, SegmentationInfo] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.templates) > MAX_TEMPLATES:
            raise ConfigurationError(f"at most {MAX_TEMPLATES} templates")
        for tid in self.templates:
            if not 0 <= tid < MAX_TEMPLATES:
                raise ConfigurationError(f"template id {tid} outside 0..63")

    def __contains__(self, tid: object) -> bool:
        return tid in self.templates

    def __getitem__(self, tid: int) -> SegmentationInfo:
        return self.templates[tid]

    def __len__(self) -> int:
        return len(self.templates)

    def next_free_id(self) -> int:
        for tid in range(MAX_TEMPLATES):
            if tid not in self.templates:
                return tid
        raise ConfigurationError("template table full")

    def add(self, layout: SegmentationInfo) -> int:
        tid = self.next_free_id()
        self.templates[tid] = layout
        return tid

    def ordered(self) -> list[tuple[int, SegmentationInfo]]:
        return sorted(self.templates.items())


@dataclass
class AccessRights:
    """Per (context, middlebox) rights.

    The sender implicitly writes every context; the receiver has no entry.
    Unlisted pairs are ``Access.NONE``.
    """

    entity_count: int
    context_count: int
    table: dict[tuple[int, int], Access] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 2 <= self.entity_count <= MAX_ENTITIES:
            raise ConfigurationError(f"entity count must be in 2..{MAX_ENTITIES}")
        if not 1 <= self.context_count <= MAX_CONTEXTS:
            raise ConfigurationError(f"context count must be in 1..{MAX_CONTEXTS}")
        clean = {}
        for (ctx, ent), right in self.table.items():
            right = Access.parse(right)
            if not 0 <= ctx < self.context_count:
                raise ConfigurationError(f"context {ctx} out of range")
            if not 1 <= ent <= self.entity_count - 2:
                raise ConfigurationError(f"entity {ent} is not a middlebox")
            if right is not Access.NONE:
                clean[(ctx, ent)] = right
        self.table = clean

    @property
    def receiver(self) -> int:
        return self.entity_count - 1

    @property
    def middleboxes(self) -> range:
        return range(1, self.entity_count - 1)

    @property
    def contexts(self) -> range:
        return range(self.context_count)

    def get(self, context: int, entity: int) -> Access:
        if entity == SENDER:
            return Access.WRITE
        if entity == self.receiver:
            return Access.NONE
        return self.table.get((context, entity), Access.NONE)

    def can_read(self, context: int, entity: int) -> bool:
        # the receiver decrypts and verifies everything without holding per-context rights
        return entity == self.receiver or self.get(context, entity) is not Access.NONE

    def has_any(self, entity: int) -> bool:
        return any(ent == entity for (_, ent) in self.table)

    def segment_sets(self, entity: int, layout: SegmentationInfo) -> tuple[list[int], list[int]]:
        """Return (read-only segments, write segments) of ``entity`` for ``layout``."""
        reads, writes = [], []
        for i, seg in enumerate(layout):
            right = self.get(seg.context, entity)
            if right is Access.WRITE:
                writes.append(i)
            elif right is Access.READ:
                reads.append(i)
        return reads, writes


@dataclass(frozen=True)
class EntityKeys:
    """Key material one entity holds: its own keys plus phi predecessors."""

    entity: int
    read: Mapping[int, bytes]
    write: Mapping[int, bytes]
    prev_read: Mapping[int, bytes]
    prev_write: Mapping[int, bytes]
    enc: Mapping[int, bytes]


@dataclass(frozen=True)
class KeyMatrix:
    entity_count: int
    read_keys: Mapping[tuple[int, int], bytes]
    write_keys: Mapping[tuple[int, int], bytes]
    enc_keys: Mapping[int, bytes]
    kd_keys: Mapping[int, bytes]

    @property
    def receiver(self) -> int:
        return self.entity_count - 1

    def has(self, kind: KeyKind, context: int, entity: int) -> bool:
        return (context, entity) in self._keys(kind)

    def key(self, kind: KeyKind, context: int, entity: int) -> bytes:
        try:
            return self._keys(kind)[(context, entity)]
        except KeyError:
            raise AccessViolation(f"no {kind.value} key for context {context} at entity {entity}") from None

    def _keys(self, kind: KeyKind) -> Mapping[tuple[int, int], bytes]:
        return self.read_keys if KeyKind(kind) is KeyKind.READ else self.write_keys

    def phi_owner(self, context: int, entity: int, kind: KeyKind) -> int:
        keys = self._keys(kind)
        for j in range(entity - 1, -1, -1):
            if (context, j) in keys:
                return j
        raise ConfigurationError(f"context {context} has no sender {KeyKind(kind).value} key")

    def column(self, entity: int, rights: AccessRights) -> EntityKeys:
        """Restrict the matrix to what ``entity`` is entitled to hold."""
        if entity == SENDER:
            ctxs = list(rights.contexts)
            return EntityKeys(
                entity,
                read={c: self.read_keys[(c, 0)] for c in ctxs},
                write={c: self.write_keys[(c, 0)] for c in ctxs},
                prev_read={}, prev_write={},
                enc={c: self.enc_keys[c] for c in ctxs},
            )
        if entity == self.receiver:
            ctxs = list(rights.contexts)
            return EntityKeys(
                entity, read={}, write={},
                prev_read={c: phi(self, c, entity, KeyKind.READ) for c in ctxs},
                prev_write={c: phi(self, c, entity, KeyKind.WRITE) for c in ctxs},
                enc={c: self.enc_keys[c] for c in ctxs},
            )
        readable = [c for c in rights.contexts if rights.get(c, entity) is not Access.NONE]
        writable = [c for c in readable if rights.get(c, entity) is Access.WRITE]
        return EntityKeys(
            entity,
            read={c: self.read_keys[(c, entity)] for c in readable},
            write={c: self.write_keys[(c, entity)] for c in writable},
            prev_read={c: phi(self, c, entity, KeyKind.READ) for c in readable},
            prev_write={c: phi(self, c, entity, KeyKind.WRITE) for c in writable},
            enc={c: self.enc_keys[c] for c in readable},
        )

    def check_invariants(self, rights: AccessRights) -> None:
        for ctx in rights.contexts:
            if (ctx, 0) not in self.read_keys or (ctx, 0) not in self.write_keys:
                raise ConfigurationError(f"sender keys missing for context {ctx}")
            for ent in rights.middleboxes:
                right = rights.get(ctx, ent)
                if ((ctx, ent) in self.read_keys) != (right is not Access.NONE):
                    raise ConfigurationError(f"read key presence wrong at ({ctx}, {ent})")
                if ((ctx, ent) in self.write_keys) != (right is Access.WRITE):
                    raise ConfigurationError(f"write key presence wrong at ({ctx}, {ent})")
        for (_, ent) in list(self.read_keys) + list(self.write_keys):
            if ent == self.receiver:
                raise ConfigurationError("receiver must not own a key")


def phi(matrix: KeyMatrix, context: int, entity: int, kind: KeyKind) -> bytes:
    """Key of the nearest earlier entity holding a ``kind`` key for ``context``."""
    kind = KeyKind(kind)
    if entity <= 0 or entity >= matrix.entity_count:
        raise AccessViolation(f"phi undefined for entity {entity}")
    if entity != matrix.receiver and not matrix.has(kind, context, entity):
        raise AccessViolation(f"entity {entity} holds no {kind.value} key for context {context}")
    return matrix.key(kind, context, matrix.phi_owner(context, entity, kind))


def _id(value: int) -> bytes:
    return bytes([value])


def derive_key_matrix(psk_sr: bytes, psks_sm: Mapping[int, bytes], handshake_nonce: bytes,
                      rights: AccessRights, contexts: Iterable[int] | None = None) -> KeyMatrix:
    """Derive every session key from the pre-shared secrets and handshake nonce."""
    if not psk_sr:
        raise ConfigurationError("sender/receiver PSK is required")
    ctxs = sorted(rights.contexts if contexts is None else contexts)
    read, write, enc, kd = {}, {}, {}, {}
    for ctx in ctxs:
        enc[ctx] = crypto.kdf(psk_sr, [handshake_nonce, _id(ctx), b"encrypt"])
        for ent in [SENDER, *rights.middleboxes]:
            right = rights.get(ctx, ent)
            if right is Access.NONE:
                continue
            read[(ctx, ent)] = crypto.kdf(psk_sr, [handshake_nonce, _id(ent), _id(ctx), b"read"])
            if right is Access.WRITE:
                write[(ctx, ent)] = crypto.kdf(psk_sr, [handshake_nonce, _id(ent), _id(ctx), b"write"])
    for ent in rights.middleboxes:
        if not rights.has_any(ent):
            continue
        secret = psks_sm.get(ent)
        if not secret:
            raise ConfigurationError(f"no PSK shared with middlebox {ent}")
        kd[ent] = crypto.kdf(secret, [handshake_nonce])
    return KeyMatrix(rights.entity_count, read, write, enc, kd)


@dataclass
class SessionConfig:
    """Static description of one session."""

    rights: AccessRights
    templates: TemplateTable = field(default_factory=TemplateTable)
    self_verifying: frozenset[int] = frozenset()
    middlebox_addresses: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.self_verifying = frozenset(self.self_verifying)
        for ent in self.self_verifying:
            if ent not in self.rights.middleboxes:
                raise ConfigurationError(f"self-verifying entity {ent} is not a middlebox")
        if not self.middlebox_addresses:
            self.middlebox_addresses = [(f"10.0.0.{ent}", 4433) for ent in self.rights.middleboxes]
        if len(self.middlebox_addresses) != len(self.rights.middleboxes):
            raise ConfigurationError("one address per middlebox required")
        for tid, layout in self.templates.templates.items():
            for seg in layout:
                if seg.context >= self.rights.context_count:
                    raise ConfigurationError(f"template {tid} references unknown context {seg.context}")

    @property
    def entity_count(self) -> int:
        return self.rights.entity_count

    @property
    def receiver(self) -> int:
        return self.rights.receiver
