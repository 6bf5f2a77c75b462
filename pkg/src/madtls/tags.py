"""Aggregated authentication tags.

The main tag is the XOR of one read-key and one write-key partial tag per
segment. Every entity with access to a segment swaps the partial tags made
under its predecessor's keys (phi) for ones under its own keys; the receiver
recomputes the aggregate under the last owners' keys. Self-verify tags apply
the same algebra restricted to one middlebox's segments.

Each partial tag MACs the ciphertext segment under a domain tag binding the
content type, epoch, sequence number and segment index, so partial tags
cannot be moved between records or positions.
"""

from __future__ import annotations

import hmac
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import crypto
from .access import Access, AccessRights, EntityKeys, KeyKind, KeyMatrix, SENDER, SegmentationInfo
from .bits import Bits
from .crypto import Nonce, xor_all, xor_bytes
from .errors import AccessViolation, ConfigurationError


@dataclass(frozen=True)
class TagDomain:
    content_type: int
    nonce: Nonce

    def tag(self, segment_index: int) -> bytes:
        return bytes([self.content_type]) + self.nonce.to_bytes() + segment_index.to_bytes(2, "big")


class Sigma:
    """Partial-tag function for one record at one hop.

    Results are memoized so that self-verify tags reuse partial tags already
    computed for the main tag instead of invoking the MAC again.
    """

    def __init__(self, domain: TagDomain):
        self.domain = domain
        self._cache: dict[tuple[bytes, int, Bits], bytes] = {}

    def __call__(self, key: bytes, index: int, data: Bits) -> bytes:
        slot = (key, index, data)
        tag = self._cache.get(slot)
        if tag is None:
            tag = crypto.mac(key, self.domain.tag(index), data)
            self._cache[slot] = tag
        return tag


@dataclass(frozen=True)
class SegmentKeys:
    index: int
    context: int
    access: Access
    read: bytes | None = None
    write: bytes | None = None
    prev_read: bytes | None = None
    prev_write: bytes | None = None


@dataclass(frozen=True)
class TagContextView:
    """Keys one entity uses for the segments of one layout it can access."""

    entity: int
    segments: tuple[SegmentKeys, ...]

    @property
    def read_set(self) -> list[SegmentKeys]:
        return [s for s in self.segments if s.access is Access.READ]

    @property
    def write_set(self) -> list[SegmentKeys]:
        return [s for s in self.segments if s.access is Access.WRITE]

    @property
    def indices(self) -> set[int]:
        return {s.index for s in self.segments}


def build_view(keys: EntityKeys, rights: AccessRights, layout: SegmentationInfo) -> TagContextView:
    entity = keys.entity
    segs = []
    try:
        for i, seg in enumerate(layout):
            ctx = seg.context
            if entity == SENDER:
                segs.append(SegmentKeys(i, ctx, Access.WRITE, read=keys.read[ctx], write=keys.write[ctx]))
            elif entity == rights.receiver:
                segs.append(SegmentKeys(i, ctx, Access.NONE, prev_read=keys.prev_read[ctx],
                                        prev_write=keys.prev_write[ctx]))
            else:
                right = rights.get(ctx, entity)
                if right is Access.READ:
                    segs.append(SegmentKeys(i, ctx, right, read=keys.read[ctx], prev_read=keys.prev_read[ctx]))
                elif right is Access.WRITE:
                    segs.append(SegmentKeys(i, ctx, right, read=keys.read[ctx], write=keys.write[ctx],
                                            prev_read=keys.prev_read[ctx], prev_write=keys.prev_write[ctx]))
    except KeyError as exc:
        raise ConfigurationError(f"entity {entity} lacks a key for context {exc.args[0]}") from None
    return TagContextView(entity, tuple(segs))


def view_from_matrix(matrix: KeyMatrix, rights: AccessRights, layout: SegmentationInfo,
                     entity: int) -> TagContextView:
    return build_view(matrix.column(entity, rights), rights, layout)


def initial_tag(segments: Sequence[Bits], sender_view: TagContextView, sigma: Sigma) -> bytes:
    if sender_view.entity != SENDER:
        raise ConfigurationError("initial tag is computed by the sender")
    if not segments:
        raise ConfigurationError("a record needs at least one segment")
    if len(sender_view.segments) != len(segments):
        raise ConfigurationError("sender view does not cover every segment")
    return xor_all(
        xor_bytes(sigma(s.read, s.index, segments[s.index]), sigma(s.write, s.index, segments[s.index]))
        for s in sender_view.segments
    )


def reader_update(tag: bytes, view: TagContextView, segments: Sequence[Bits], sigma: Sigma) -> bytes:
    terms = [tag]
    for s in view.read_set:
        terms += [sigma(s.prev_read, s.index, segments[s.index]), sigma(s.read, s.index, segments[s.index])]
    return xor_all(terms)


def writer_update(tag: bytes, view: TagContextView, old: Sequence[Bits], new: Sequence[Bits],
                  sigma: Sigma) -> bytes:
    _check_rewrite(view, old, new)
    terms = [tag]
    for s in view.write_set:
        i = s.index
        terms += [
            sigma(s.prev_read, i, old[i]), sigma(s.read, i, new[i]),
            sigma(s.prev_write, i, old[i]), sigma(s.write, i, new[i]),
        ]
    return xor_all(terms)


def hop_update(tag: bytes, view: TagContextView, old: Sequence[Bits], new: Sequence[Bits],
               sigma: Sigma) -> bytes:
    """Reader update over read-only segments followed by writer update over write segments."""
    return writer_update(reader_update(tag, view, old, sigma), view, old, new, sigma)


def _check_rewrite(view: TagContextView, old: Sequence[Bits], new: Sequence[Bits]) -> None:
    if len(old) != len(new):
        raise ConfigurationError("segment count is fixed in flight")
    writable = {s.index for s in view.write_set}
    for i, (a, b) in enumerate(zip(old, new)):
        if a.nbits != b.nbits:
            raise ConfigurationError(f"segment {i} changed length; the layout is immutable in flight")
        if a != b and i not in writable:
            raise AccessViolation(f"entity {view.entity} may not modify segment {i}")


def expected_receiver_tag(segments: Sequence[Bits], receiver_view: TagContextView, sigma: Sigma) -> bytes:
    return xor_all(
        xor_bytes(sigma(s.prev_read, s.index, segments[s.index]), sigma(s.prev_write, s.index, segments[s.index]))
        for s in receiver_view.segments
    )


def receiver_verify(tag: bytes, segments: Sequence[Bits], receiver_view: TagContextView, sigma: Sigma) -> bool:
    if len(receiver_view.segments) != len(segments):
        return False
    return hmac.compare_digest(tag, expected_receiver_tag(segments, receiver_view, sigma))


def selfverify_initial(sender_view: TagContextView, segments: Sequence[Bits], rights: AccessRights,
                       layout: SegmentationInfo, target: int, sigma: Sigma) -> bytes:
    if target not in rights.middleboxes:
        raise ConfigurationError(f"self-verify target {target} is not a middlebox")
    reads, writes = rights.segment_sets(target, layout)
    by_index = {s.index: s for s in sender_view.segments}
    terms = [sigma(by_index[i].read, i, segments[i]) for i in sorted(reads + writes)]
    terms += [sigma(by_index[i].write, i, segments[i]) for i in writes]
    return xor_all(terms)


def selfverify_update(tag_j: bytes, intermediary_view: TagContextView, target_sets: tuple[Iterable[int], Iterable[int]],
                      old: Sequence[Bits], new: Sequence[Bits], sigma: Sigma) -> bytes:
    """Update a downstream middlebox's tag with the intermediary's key rotation.

    Read-key terms are rotated on every segment both parties access; write-key
    terms on segments both parties write.
    """
    target_reads, target_writes = (set(s) for s in target_sets)
    target_all = target_reads | target_writes
    terms = [tag_j]
    for s in intermediary_view.segments:
        i = s.index
        if i not in target_all:
            continue
        terms += [sigma(s.prev_read, i, old[i]), sigma(s.read, i, new[i])]
        if s.access is Access.WRITE and i in target_writes:
            terms += [sigma(s.prev_write, i, old[i]), sigma(s.write, i, new[i])]
    return xor_all(terms)


def selfverify_expected(target_view: TagContextView, segments: Sequence[Bits], sigma: Sigma) -> bytes:
    terms = [sigma(s.prev_read, s.index, segments[s.index]) for s in target_view.segments]
    terms += [sigma(s.prev_write, s.index, segments[s.index]) for s in target_view.write_set]
    return xor_all(terms)


def selfverify_check(target_view: TagContextView, segments: Sequence[Bits], tag_j: bytes, sigma: Sigma) -> bool:
    return hmac.compare_digest(tag_j, selfverify_expected(target_view, segments, sigma))


class TagOracle:
    """Reference model of the aggregated tag as an explicit multiset of partial tags.

    Terms are ``(kind, context, owner, segment_index, data)``; XOR semantics mean
    a term added twice cancels. The previous owner of each context's keys is
    tracked from the order hops are applied, not from key existence.
    """

    def __init__(self, matrix: KeyMatrix, rights: AccessRights, layout: SegmentationInfo, domain: TagDomain):
        self.matrix = matrix
        self.rights = rights
        self.layout = layout
        self.domain = domain
        self.terms: Counter = Counter()
        self.owner: dict[tuple[KeyKind, int], int] = {}

    def _toggle(self, term: tuple) -> None:
        self.terms[term] += 1

    def live_terms(self) -> set[tuple]:
        return {term for term, count in self.terms.items() if count % 2}

    def sender(self, segments: Sequence[Bits]) -> None:
        if not segments:
            raise ValueError("oracle requires at least one segment")
        if self.owner:
            raise ValueError("sender already applied")
        for i, seg in enumerate(self.layout):
            for kind in KeyKind:
                self._toggle((kind, seg.context, SENDER, i, segments[i]))
        for ctx in self.rights.contexts:
            for kind in KeyKind:
                self.owner[(kind, ctx)] = SENDER

    def hop(self, entity: int, old: Sequence[Bits], new: Sequence[Bits] | None = None) -> None:
        new = old if new is None else new
        touched: set[tuple[KeyKind, int]] = set()
        for i, seg in enumerate(self.layout):
            right = self.rights.get(seg.context, entity)
            kinds = {Access.READ: [KeyKind.READ], Access.WRITE: [KeyKind.READ, KeyKind.WRITE]}.get(right, [])
            for kind in kinds:
                self._toggle((kind, seg.context, self.owner[(kind, seg.context)], i, old[i]))
                self._toggle((kind, seg.context, entity, i, new[i]))
                touched.add((kind, seg.context))
        for key in touched:
            self.owner[key] = entity

    def _value(self, term: tuple) -> bytes:
        kind, ctx, owner, i, data = term
        return crypto.mac(self.matrix.key(kind, ctx, owner), self.domain.tag(i), data)

    def tag(self) -> bytes:
        return xor_all(self._value(t) for t in self.live_terms())

    def verify_individually(self, segments: Sequence[Bits]) -> bool:
        """Accept iff every live partial tag is exactly the one the receiver expects."""
        receiver = self.matrix.receiver
        expected = set()
        for i, seg in enumerate(self.layout):
            for kind in KeyKind:
                owner = self.matrix.phi_owner(seg.context, receiver, kind)
                expected.add((kind, seg.context, owner, i, segments[i]))
        return self.live_terms() == expected


__all__ = [
    "TagDomain", "Sigma", "SegmentKeys", "TagContextView", "build_view", "view_from_matrix",
    "initial_tag", "reader_update", "writer_update", "hop_update", "receiver_verify",
    "expected_receiver_tag", "selfverify_initial", "selfverify_update", "selfverify_check",
    "selfverify_expected", "TagOracle",
]
