import random

import pytest
from hypothesis import given, settings, strategies as st

from madtls.access import Access, AccessRights, SegmentationInfo, TemplateTable
from madtls.bits import Bits
from madtls.errors import ProtocolError, UnknownContentType
from madtls.record import (CT_RECORD, ProtectedRecord, decode_record, dtls12_record_size, encode_record,
                           encrypt_segments)

from .conftest import build_session


@st.composite
def records(draw):
    layout = SegmentationInfo.of(*draw(st.lists(st.tuples(st.integers(1, 70), st.integers(0, 3)),
                                                min_size=1, max_size=5)))
    n = layout.total_bits
    explicit = draw(st.booleans())
    sv_targets = sorted(draw(st.sets(st.integers(1, 20), max_size=3)))
    rec = ProtectedRecord(
        content_type=draw(st.sampled_from([0x1E, 0x1F])), epoch=draw(st.integers(0, 0xFFFF)),
        sequence=draw(st.integers(0, 2 ** 48 - 1)), ciphertext=Bits.from_int(draw(st.integers(0, (1 << n) - 1)), n),
        main_tag=draw(st.binary(min_size=16, max_size=16)),
        template_id=None if explicit else draw(st.integers(0, 63)),
        explicit_layout=layout if explicit else None,
        self_verify_tags=tuple((t, draw(st.binary(min_size=16, max_size=16))) for t in sv_targets),
        m_flag=bool(sv_targets),
    )
    return rec, layout


@settings(max_examples=200)
@given(records())
def test_encode_decode_round_trip(pair):
    rec, layout = pair
    templates = TemplateTable({} if rec.template_id is None else {rec.template_id: layout})
    wire = encode_record(rec, templates)
    decoded, got_layout = decode_record(wire, templates)
    assert decoded == rec and got_layout == layout
    assert int.from_bytes(wire[11:13], "big") == len(wire) - 13


@settings(max_examples=200)
@given(records())
def test_template_overhead_is_one_byte_plus_self_verify(pair):
    rec, layout = pair
    wire = encode_record(rec)
    payload = (layout.total_bits + 7) // 8
    extra = len(wire) - dtls12_record_size(payload)
    sv = 17 * len(rec.self_verify_tags)
    if rec.template_id is not None:
        assert extra == 1 + sv
    else:
        assert extra > 1 + sv


def test_fifty_byte_record_example():
    layout = SegmentationInfo.of((48, 0), (352, 1))
    rec = ProtectedRecord(CT_RECORD, 1, 0, Bits.zeros(400), bytes(16), template_id=5)
    wire = encode_record(rec, TemplateTable({5: layout}))
    assert len(wire) == 13 + 1 + 50 + 16
    assert len(wire) - dtls12_record_size(50) == 1
    assert wire[13] == 5


def test_decode_rejects_malformed():
    layout = SegmentationInfo.of((16, 0))
    templates = TemplateTable({0: layout})
    wire = encode_record(ProtectedRecord(CT_RECORD, 1, 0, Bits.zeros(16), bytes(16), template_id=0))
    with pytest.raises(UnknownContentType):
        decode_record(b"\x17" + wire[1:], templates)
    for bad in (wire[:-1], wire + b"\x00", wire[:1] + b"\xfe\xff" + wire[3:], wire[:13] + b"\x07" + wire[14:]):
        with pytest.raises(ProtocolError):
            decode_record(bad, templates)
    # self-verify entries without the m-flag
    longer = bytearray(wire[:-16] + b"\x01" + bytes(16) + wire[-16:])
    longer[11:13] = (len(longer) - 13).to_bytes(2, "big")
    with pytest.raises(ProtocolError):
        decode_record(bytes(longer), templates)


def test_segment_encryption_is_per_context():
    rights = AccessRights(3, 2, {(0, 1): Access.READ})
    layout = SegmentationInfo.of((10, 0), (6, 1), (9, 0))
    s = build_session(rights, layout)
    from madtls.crypto import Nonce
    from madtls.record import decrypt_segments_for
    nonce = Nonce(1, 0)
    ct = encrypt_segments(s.plaintext, layout, s.matrix.enc_keys, nonce)
    view = decrypt_segments_for(s.matrix.column(1, rights), ct, layout, nonce)
    assert set(view) == {0, 2}
    parts = s.plaintext.split(layout.lengths)
    assert view[0] == parts[0] and view[2] == parts[2]
    full = decrypt_segments_for(s.matrix.column(2, rights), ct, layout, nonce)
    assert Bits.concat(full[i] for i in range(3)) == s.plaintext


def test_sender_records_have_exact_overhead():
    rights = AccessRights(5, 2, {(0, 1): Access.WRITE, (0, 2): Access.READ, (1, 3): Access.READ})
    layout = SegmentationInfo.of((13, 0), (27, 1))
    for sv in [(), (1,), (1, 3), (1, 2, 3)]:
        s = build_session(rights, layout, self_verifying=sv, seed=len(sv))
        wire = encode_record(s.sender().protect(s.plaintext, template_id=0))
        assert len(wire) - dtls12_record_size(5) == 1 + 17 * len(sv)
    rng = random.Random(3)
    s = build_session(rights, layout)
    sender = s.sender()
    for _ in range(20):
        p = Bits.from_int(rng.getrandbits(40), 40)
        assert len(sender.send(p, template_id=0)) == dtls12_record_size(5) + 1


def test_m_flag_must_match_tags():
    rights = AccessRights(3, 1, {(0, 1): Access.READ})
    s = build_session(rights, SegmentationInfo.of((8, 0)))
    wire = bytearray(s.sender().send(s.plaintext, template_id=0))
    wire[13] |= 0x80
    with pytest.raises(ProtocolError):
        decode_record(bytes(wire), s.config.templates)
