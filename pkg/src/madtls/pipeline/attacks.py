"""Adversary actions applied to records in flight.

Outsider actions (flip, revert, forge, replay, drop) mutate wire bytes on a
link. Insider actions replace a middlebox's processing: a compromised box
that writes outside its write set, and a pair of colluding readers that
modify and later restore a shared context while patching the tag terms
they hold keys for.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Sequence

from ..access import Access, SegmentationInfo, TemplateTable
from ..bits import Bits
from ..crypto import TAG_SIZE, xor_all
from ..errors import ScenarioError
from ..record import DTLS_HEADER_SIZE, ProtectedRecord, decode_record, encode_layout, encode_record
from ..session import HopResult, Middlebox
from ..tags import Sigma, TagDomain


def ciphertext_offset(record: ProtectedRecord) -> int:
    """Byte offset of the ciphertext inside the encoded record."""
    layout_len = len(encode_layout(record.explicit_layout)) if record.explicit_layout is not None else 0
    return DTLS_HEADER_SIZE + 1 + layout_len


def flip_wire_bits(wire: bytes, positions: Sequence[int]) -> bytes:
    buf = bytearray(wire)
    for pos in positions:
        if not 0 <= pos < len(buf) * 8:
            raise ScenarioError([f"bit {pos} outside the {len(buf)}-byte record"])
        buf[pos // 8] ^= 0x80 >> (pos % 8)
    return bytes(buf)


def resolve_flip(wire: bytes, templates: TemplateTable, params: dict) -> list[int]:
    """Translate a flip directive into absolute wire bit positions."""
    target = params.get("field", "ciphertext")
    bits = [int(b) for b in (params.get("bits") or [0])]
    if target == "wire":
        return bits
    record, layout = decode_record(wire, templates)
    if target == "tag":
        base = (len(wire) - TAG_SIZE) * 8
        return [base + b for b in bits]
    if target != "ciphertext":
        raise ScenarioError([f"unknown flip field {target!r}"])
    base = ciphertext_offset(record) * 8
    if "segment" in params:
        seg = int(params["segment"])
        start = sum(layout.lengths[:seg])
        if any(b >= layout.lengths[seg] for b in bits):
            raise ScenarioError([f"flip beyond segment {seg}"])
        bits = [start + b for b in bits]
    if any(b >= record.ciphertext.nbits for b in bits):
        raise ScenarioError(["flip beyond the ciphertext"])
    return [base + b for b in bits]


def forge_record(wire: bytes, templates: TemplateTable, rng: random.Random, params: dict) -> bytes:
    """Build a fresh record with random ciphertext and tag and an unused sequence number."""
    record, layout = decode_record(wire, templates)
    ciphertext = Bits.from_int(rng.getrandbits(layout.total_bits), layout.total_bits)
    content_type = int(params.get("content_type", record.content_type))
    forged = replace(
        record, content_type=content_type, ciphertext=ciphertext, main_tag=rng.randbytes(TAG_SIZE),
        sequence=int(params.get("sequence", record.sequence + 1 + rng.randrange(1 << 20))),
        self_verify_tags=(), m_flag=False,
    )
    return encode_record(forged)


def _compensate(record: ProtectedRecord, layout: SegmentationInfo, key: bytes | None, indices: Sequence[int],
                old: Sequence[Bits], new: Sequence[Bits]) -> bytes:
    """Swap the partial tags under ``key`` on ``indices`` from old to new data."""
    if key is None or not indices:
        return record.main_tag
    sigma = Sigma(TagDomain(record.content_type, record.nonce))
    terms = [record.main_tag]
    for i in indices:
        terms += [sigma(key, i, old[i]), sigma(key, i, new[i])]
    return xor_all(terms)


def _segment_flips(layout: SegmentationInfo, context: int, params: dict) -> dict[int, list[int]]:
    indices = [i for i, s in enumerate(layout) if s.context == context]
    if "segment" in params:
        indices = [int(params["segment"])]
    bits = [int(b) for b in (params.get("bits") or [0])]
    return {i: [b for b in bits if b < layout.segments[i].bit_length] for i in indices[:1]}


@dataclass
class InsiderWriter:
    """A compromised middlebox that also rewrites a segment it may not write.

    It forwards everything else honestly and patches whatever partial tag it
    holds a key for, which is the best a single insider can do.
    """

    middlebox: Middlebox
    params: dict

    @property
    def entity(self) -> int:
        return self.middlebox.entity

    def process(self, wire: bytes) -> HopResult:
        result = self.middlebox.process(wire)
        if result.wire_out is None:
            return result
        templates = self.middlebox.config.templates
        record, layout = decode_record(result.wire_out, templates)
        rights = self.middlebox.config.rights
        target = self.params.get("segment")
        if target is None:
            target = next((i for i, s in enumerate(layout)
                           if rights.get(s.context, self.entity) is not Access.WRITE), None)
            if target is None:
                raise ScenarioError([f"middlebox {self.entity} can write every segment; nothing to violate"])
        target = int(target)
        old = record.segments(layout)
        new = list(old)
        new[target] = old[target].flip(*[int(b) for b in (self.params.get("bits") or [0])])
        keys = self.middlebox.keys
        ctx = layout.segments[target].context
        tag = _compensate(record, layout, keys.read.get(ctx), [target], old, new)
        tag_record = replace(record, ciphertext=Bits.concat(new), main_tag=tag)
        tag = _compensate(tag_record, layout, keys.write.get(ctx), [target], old, new)
        out = replace(tag_record, main_tag=tag)
        result.wire_out = encode_record(out)
        result.reason = f"insider rewrote segment {target}"
        return result


@dataclass
class CollusionState:
    context: int
    params: dict
    flips: dict[int, list[int]] = field(default_factory=dict)


@dataclass
class ColluderModify:
    """First colluder: processes honestly, then alters the shared context."""

    middlebox: Middlebox
    state: CollusionState

    @property
    def entity(self) -> int:
        return self.middlebox.entity

    def process(self, wire: bytes) -> HopResult:
        result = self.middlebox.process(wire)
        if result.wire_out is None:
            return result
        record, layout = decode_record(result.wire_out, self.middlebox.config.templates)
        self.state.flips = _segment_flips(layout, self.state.context, self.state.params)
        old = record.segments(layout)
        new = [seg.flip(*self.state.flips.get(i, [])) for i, seg in enumerate(old)]
        key = self.middlebox.keys.read.get(self.state.context)
        tag = _compensate(record, layout, key, sorted(self.state.flips), old, new)
        result.wire_out = encode_record(replace(record, ciphertext=Bits.concat(new), main_tag=tag))
        result.reason = "colluder modified shared context"
        return result


@dataclass
class ColluderRevert:
    """Second colluder: restores the data, swaps the predecessor's terms back, then processes honestly."""

    middlebox: Middlebox
    state: CollusionState

    @property
    def entity(self) -> int:
        return self.middlebox.entity

    def process(self, wire: bytes) -> HopResult:
        try:
            record, layout = decode_record(wire, self.middlebox.config.templates)
        except ValueError:
            return self.middlebox.process(wire)
        old = record.segments(layout)
        new = [seg.flip(*self.state.flips.get(i, [])) for i, seg in enumerate(old)]
        key = self.middlebox.keys.prev_read.get(self.state.context)
        tag = _compensate(record, layout, key, sorted(self.state.flips), old, new)
        restored = encode_record(replace(record, ciphertext=Bits.concat(new), main_tag=tag))
        result = self.middlebox.process(restored)
        result.reason = "colluder reverted shared context"
        return result

