"""Randomized honest sessions for soundness and oracle-equivalence sweeps.

Sessions skip the handshake and derive the key matrix directly, which keeps
ten thousand of them affordable. Writers change every segment they may
write, so each run exercises both update paths.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..access import (Access, AccessRights, KeyMatrix, SegmentationInfo, SessionConfig, TemplateTable,
                      derive_key_matrix)
from ..bits import Bits
from ..record import CT_RECORD, decode_record, encode_record
from ..session import HopResult, Middlebox, Receiver, ReceiveResult, Sender
from ..tags import TagDomain, TagOracle


def flip_writable(writable: set[int]):
    """Behavior that inverts the first bit of every segment in a writable context."""
    def behave(plain: dict[int, Bits], layout: SegmentationInfo) -> dict[int, Bits]:
        return {i: seg.flip(0) for i, seg in plain.items() if layout.segments[i].context in writable}
    return behave


@dataclass
class RandomSession:
    config: SessionConfig
    matrix: KeyMatrix
    layout: SegmentationInfo
    plaintext: Bits
    self_verify: bool = False

    @property
    def rights(self) -> AccessRights:
        return self.config.rights

    def sender(self) -> Sender:
        return Sender(self.config, self.matrix)

    def middleboxes(self) -> list[Middlebox]:
        rights = self.rights
        out = []
        for m in rights.middleboxes:
            writable = {c for c in rights.contexts if rights.get(c, m) is Access.WRITE}
            out.append(Middlebox(m, self.config, self.matrix.column(m, rights), flip_writable(writable)))
        return out

    def receiver(self) -> Receiver:
        return Receiver(self.config, self.matrix)


def random_rights(rng: random.Random, entities: int, contexts: int) -> AccessRights:
    table = {}
    for ctx in range(contexts):
        for m in range(1, entities - 1):
            right = rng.choice((Access.NONE, Access.READ, Access.WRITE))
            if right is not Access.NONE:
                table[(ctx, m)] = right
    return AccessRights(entities, contexts, table)


def random_layout(rng: random.Random, contexts: int, max_segments: int = 6, max_bits: int = 64) -> SegmentationInfo:
    count = rng.randint(1, max_segments)
    return SegmentationInfo.of(*[(rng.randint(1, max_bits), rng.randrange(contexts)) for _ in range(count)])


def random_session(rng: random.Random, max_entities: int = 6, max_contexts: int = 5, max_segments: int = 6,
                   self_verify_rate: float = 0.3) -> RandomSession:
    entities = rng.randint(2, max_entities)
    contexts = rng.randint(1, max_contexts)
    rights = random_rights(rng, entities, contexts)
    layout = random_layout(rng, contexts, max_segments)
    sv = frozenset(m for m in rights.middleboxes if rng.random() < self_verify_rate)
    config = SessionConfig(rights, TemplateTable({0: layout}), sv)
    psks = {m: rng.randbytes(32) for m in rights.middleboxes}
    matrix = derive_key_matrix(rng.randbytes(32), psks, rng.randbytes(64), rights)
    plaintext = Bits.from_int(rng.getrandbits(layout.total_bits), layout.total_bits)
    return RandomSession(config, matrix, layout, plaintext, bool(sv))


@dataclass
class HonestRun:
    result: ReceiveResult
    hops: list[HopResult] = field(default_factory=list)
    oracle_mismatches: int = 0
    oracle_checks: int = 0
    oracle_individual: bool | None = None

    @property
    def accepted(self) -> bool:
        return self.result.accepted


def run_honest(session: RandomSession, with_oracle: bool = False) -> HonestRun:
    """Send one record through every middlebox and verify at the receiver.

    With ``with_oracle`` the streaming tag is compared with the multiset
    oracle after the sender and after every hop.
    """
    sender = session.sender()
    record = sender.protect(session.plaintext, template_id=0)
    wire = encode_record(record)
    oracle = None
    mismatches = checks = 0
    if with_oracle:
        oracle = TagOracle(session.matrix, session.rights, session.layout, TagDomain(CT_RECORD, record.nonce))
        segments = record.segments(session.layout)
        oracle.sender(segments)
        checks += 1
        mismatches += oracle.tag() != record.main_tag
    hops = []
    for mb in session.middleboxes():
        before = decode_record(wire, session.config.templates)[0].segments(session.layout) if oracle else None
        hop = mb.process(wire)
        hops.append(hop)
        wire = hop.wire_out
        if oracle is not None:
            after = decode_record(wire, session.config.templates)[0].segments(session.layout)
            oracle.hop(mb.entity, before, after)
            checks += 1
            mismatches += oracle.tag() != hop.main_tag
    result = session.receiver().accept(wire)
    run = HonestRun(result, hops, mismatches, checks)
    if oracle is not None:
        final = decode_record(wire, session.config.templates)[0].segments(session.layout)
        run.oracle_individual = oracle.verify_individually(final)
    return run
