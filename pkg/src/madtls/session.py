"""Per-entity record processing once a session is established.

``Sender`` protects plaintext, ``Middlebox`` reads/rewrites its segments and
rotates tags, ``Receiver`` enforces anti-replay and verifies. All three
exchange encoded wire bytes, so attacks can be applied in between.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping

from . import crypto
from .access import EntityKeys, KeyMatrix, SessionConfig, SegmentationInfo
from .bits import Bits
from .crypto import Nonce
from .errors import ConfigurationError, ProtocolError, ReplayError, UnknownContentType
from .record import (CT_INJECTED, CT_RECORD, ProtectedRecord, decode_record, decrypt_segments_for,
                     encode_record, encrypt_segment, encrypt_segments)
from .tags import (Sigma, TagDomain, build_view, hop_update, initial_tag, receiver_verify, selfverify_check,
                   selfverify_initial, selfverify_update)

REPLAY_WINDOW = 64


class AntiReplayWindow:
    """DTLS-style sliding window over 48-bit sequence numbers for one epoch."""

    def __init__(self, size: int = REPLAY_WINDOW):
        self.size = size
        self.highest = -1
        self.bitmap = 0

    def check(self, sequence: int) -> bool:
        if sequence > self.highest:
            return True
        offset = self.highest - sequence
        if offset >= self.size:
            return False
        return not self.bitmap >> offset & 1

    def mark(self, sequence: int) -> None:
        if not self.check(sequence):
            raise ReplayError(f"sequence {sequence} replayed or too old")
        if sequence > self.highest:
            shift = sequence - self.highest
            self.bitmap = ((self.bitmap << shift) | 1) & ((1 << self.size) - 1)
            self.highest = sequence
        else:
            self.bitmap |= 1 << (self.highest - sequence)


class Verdict(str, enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    DROP = "drop"
    IGNORE = "ignore"


class SelfVerifyPolicy(str, enum.Enum):
    DROP_AND_REPORT = "drop-and-report"
    FLAG = "flag"
    FORWARD = "forward"


@dataclass
class Sender:
    config: SessionConfig
    matrix: KeyMatrix
    epoch: int = 1
    next_sequence: int = 0
    session_label: bytes = crypto.DEFAULT_SESSION_LABEL

    def __post_init__(self) -> None:
        self.keys = self.matrix.column(0, self.config.rights)

    def protect(self, plaintext: Bits, template_id: int | None = None, layout: SegmentationInfo | None = None,
                self_verify: bool = True) -> ProtectedRecord:
        if (template_id is None) == (layout is None):
            raise ConfigurationError("give exactly one of template_id / layout")
        resolved = self.config.templates[template_id] if template_id is not None else layout
        nonce = Nonce(self.epoch, self.next_sequence)
        self.next_sequence += 1
        ciphertext = encrypt_segments(plaintext, resolved, self.keys.enc, nonce, self.session_label)
        segments = ciphertext.split(resolved.lengths)
        sigma = Sigma(TagDomain(CT_RECORD, nonce))
        rights = self.config.rights
        view = build_view(self.keys, rights, resolved)
        tag = initial_tag(segments, view, sigma)
        sv = {}
        if self_verify:
            for target in sorted(self.config.self_verifying):
                reads, writes = rights.segment_sets(target, resolved)
                if reads or writes:
                    sv[target] = selfverify_initial(view, segments, rights, resolved, target, sigma)
        return ProtectedRecord(
            content_type=CT_RECORD, epoch=nonce.epoch, sequence=nonce.sequence, ciphertext=ciphertext,
            main_tag=tag, template_id=template_id, explicit_layout=layout,
            self_verify_tags=tuple(sorted(sv.items())), m_flag=bool(sv),
        )

    def send(self, plaintext: Bits, **kwargs) -> bytes:
        return encode_record(self.protect(plaintext, **kwargs))


# Middlebox behavior: readable plaintext by segment index -> replacement plaintext for written segments,
# or None to drop the record.
Behavior = Callable[[dict[int, Bits], SegmentationInfo], "Mapping[int, Bits] | None"]


@dataclass
class HopResult:
    entity: int
    verdict: Verdict
    wire_out: bytes | None
    view: dict[int, Bits] = field(default_factory=dict)
    written: dict[int, Bits] = field(default_factory=dict)
    self_verified: bool | None = None
    reason: str = ""
    main_tag: bytes | None = None


@dataclass
class Middlebox:
    entity: int
    config: SessionConfig
    keys: EntityKeys
    behavior: Behavior | None = None
    policy: SelfVerifyPolicy = SelfVerifyPolicy.DROP_AND_REPORT
    session_label: bytes = crypto.DEFAULT_SESSION_LABEL

    def _check_targets(self, record: ProtectedRecord, layout: SegmentationInfo) -> str:
        # tags may only name this or a later self-verifying box with segments here
        rights = self.config.rights
        expected = {t for t in self.config.self_verifying
                    if t >= self.entity and any(rights.segment_sets(t, layout))}
        targets = {t for t, _ in record.self_verify_tags}
        if targets - expected:
            return f"unexpected self-verify targets {sorted(targets - expected)}"
        if targets and self.entity in expected and self.entity not in targets:
            return "own self-verify tag missing"
        return ""

    def process(self, wire: bytes) -> HopResult:
        try:
            record, layout = decode_record(wire, self.config.templates)
        except UnknownContentType as exc:
            return HopResult(self.entity, Verdict.IGNORE, wire, reason=str(exc))
        except ProtocolError as exc:
            return HopResult(self.entity, Verdict.REJECT, None, reason=f"malformed: {exc}")
        rights = self.config.rights
        problem = self._check_targets(record, layout)
        if problem:
            return HopResult(self.entity, Verdict.REJECT, None, reason=problem)
        nonce = record.nonce
        sigma = Sigma(TagDomain(record.content_type, nonce))
        view = build_view(self.keys, rights, layout)
        old = record.segments(layout)

        verified = None
        own_tag = record.self_verify_tag(self.entity)
        if own_tag is not None:
            verified = selfverify_check(view, old, own_tag, sigma)
            if not verified and self.policy is SelfVerifyPolicy.DROP_AND_REPORT:
                return HopResult(self.entity, Verdict.REJECT, None, self_verified=False,
                                 reason="self-verify tag mismatch")

        plain = decrypt_segments_for(self.keys, record.ciphertext, layout, nonce, self.session_label)
        writable = {s.index for s in view.write_set}
        written: dict[int, Bits] = {}
        if self.behavior is not None:
            wanted = self.behavior(dict(plain), layout)
            if wanted is None:
                return HopResult(self.entity, Verdict.DROP, None, plain, self_verified=verified,
                                 reason="dropped by middlebox")
            for i, value in dict(wanted).items():
                if i not in writable:
                    raise ConfigurationError(f"behavior of entity {self.entity} wrote segment {i} without rights")
                written[i] = value
        new = list(old)
        for i, value in written.items():
            new[i] = encrypt_segment(value, i, layout, self.keys.enc, nonce, self.session_label)
        tag = hop_update(record.main_tag, view, old, new, sigma)
        sv = {}
        for target, tag_j in record.self_verify_tags:
            if target == self.entity:
                continue
            if target > self.entity:
                tag_j = selfverify_update(tag_j, view, rights.segment_sets(target, layout), old, new, sigma)
            sv[target] = tag_j
        out = ProtectedRecord(
            content_type=record.content_type, epoch=record.epoch, sequence=record.sequence,
            ciphertext=Bits.concat(new), main_tag=tag, template_id=record.template_id,
            explicit_layout=record.explicit_layout, self_verify_tags=tuple(sorted(sv.items())), m_flag=bool(sv),
        )
        reason = "self-verify failed; forwarded" if verified is False else ""
        return HopResult(self.entity, Verdict.ACCEPT, encode_record(out), plain, written, verified, reason, tag)


@dataclass
class ReceiveResult:
    verdict: Verdict
    plaintext: Bits | None = None
    segments: dict[int, Bits] = field(default_factory=dict)
    content_type: int | None = None
    nonce: Nonce | None = None
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPT


@dataclass
class Receiver:
    config: SessionConfig
    matrix: KeyMatrix
    session_label: bytes = crypto.DEFAULT_SESSION_LABEL
    injection_epochs: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.keys = self.matrix.column(self.matrix.receiver, self.config.rights)
        self.windows: dict[tuple[int, int], AntiReplayWindow] = {}

    def register_injection_epoch(self, epoch: int) -> None:
        self.injection_epochs.add(epoch)

    def window(self, content_type: int, epoch: int) -> AntiReplayWindow:
        return self.windows.setdefault((content_type, epoch), AntiReplayWindow())

    def accept(self, wire: bytes) -> ReceiveResult:
        try:
            record, layout = decode_record(wire, self.config.templates)
        except UnknownContentType as exc:
            return ReceiveResult(Verdict.IGNORE, reason=str(exc))
        except ProtocolError as exc:
            return ReceiveResult(Verdict.REJECT, reason=f"malformed: {exc}")
        nonce = record.nonce
        if record.content_type == CT_INJECTED and nonce.epoch not in self.injection_epochs:
            return ReceiveResult(Verdict.REJECT, reason=f"epoch {nonce.epoch} is not an injection epoch")
        if record.content_type == CT_RECORD and nonce.epoch in self.injection_epochs:
            return ReceiveResult(Verdict.REJECT, reason=f"epoch {nonce.epoch} is reserved for injection")
        if record.self_verify_tags:
            # every target is upstream, so each tag should have been consumed
            return ReceiveResult(Verdict.REJECT, reason="unconsumed self-verify tags", nonce=nonce)
        window = self.window(record.content_type, nonce.epoch)
        if not window.check(nonce.sequence):
            return ReceiveResult(Verdict.REJECT, reason="replay", nonce=nonce)
        segments = record.segments(layout)
        sigma = Sigma(TagDomain(record.content_type, nonce))
        view = build_view(self.keys, self.config.rights, layout)
        if not receiver_verify(record.main_tag, segments, view, sigma):
            return ReceiveResult(Verdict.REJECT, reason="tag mismatch", nonce=nonce,
                                 content_type=record.content_type)
        window.mark(nonce.sequence)
        plain = decrypt_segments_for(self.keys, record.ciphertext, layout, nonce, self.session_label)
        return ReceiveResult(Verdict.ACCEPT, Bits.concat(plain[i] for i in range(len(layout))), plain,
                             record.content_type, nonce)
