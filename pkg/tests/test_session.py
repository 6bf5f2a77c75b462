from hypothesis import given, strategies as st

from madtls.access import Access, AccessRights, SegmentationInfo
from madtls.bits import Bits
from madtls.record import encode_record
from madtls.session import AntiReplayWindow, Verdict

from .conftest import build_session


@given(st.lists(st.integers(0, 200), max_size=60))
def test_replay_window_accepts_each_sequence_once(seqs):
    win = AntiReplayWindow(64)
    accepted = []
    for s in seqs:
        if win.check(s):
            win.mark(s)
            accepted.append(s)
    assert len(accepted) == len(set(accepted))
    for s in accepted:
        assert not win.check(s)


def test_replay_window_rejects_old():
    win = AntiReplayWindow(8)
    win.mark(20)
    assert not win.check(12) and win.check(13)


def test_receiver_rejects_replay_and_wrong_type(small_session):
    s = small_session
    receiver = s.receiver()
    sender = s.sender()
    wire = sender.send(s.plaintext, template_id=0)
    for mb in s.middleboxes():
        wire = mb.process(wire).wire_out
    assert receiver.accept(wire).accepted
    again = receiver.accept(wire)
    assert not again.accepted and again.reason == "replay"
    assert receiver.accept(b"\x17" + wire[1:]).verdict is Verdict.IGNORE
    assert receiver.accept(wire[:10]).verdict is Verdict.REJECT


def test_middlebox_views_and_drop():
    rights = AccessRights(4, 2, {(0, 1): Access.READ, (1, 2): Access.WRITE})
    layout = SegmentationInfo.of((8, 0), (8, 1))
    s = build_session(rights, layout, plaintext=Bits.from_bytes(b"\x41\x42"))
    from madtls.session import Middlebox
    col1, col2 = s.matrix.column(1, rights), s.matrix.column(2, rights)
    wire = s.sender().send(s.plaintext, template_id=0)
    hop1 = Middlebox(1, s.config, col1).process(wire)
    assert hop1.view == {0: Bits.from_bytes(b"A")}
    writer = Middlebox(2, s.config, col2, lambda plain, lay: {1: Bits.from_bytes(b"Z")})
    hop2 = writer.process(hop1.wire_out)
    assert hop2.view == {1: Bits.from_bytes(b"B")}
    result = s.receiver().accept(hop2.wire_out)
    assert result.accepted and result.plaintext == Bits.from_bytes(b"AZ")
    dropper = Middlebox(2, s.config, col2, lambda plain, lay: None)
    assert dropper.process(hop1.wire_out).verdict is Verdict.DROP


def test_explicit_layout_records_verify():
    rights = AccessRights(3, 2, {(1, 1): Access.WRITE})
    s = build_session(rights, SegmentationInfo.of((8, 0)))
    layout = SegmentationInfo.of((5, 0), (11, 1), (3, 0))
    plain = Bits.from_int(0x2A5A5, 19)
    wire = s.sender().send(plain, layout=layout)
    hop = s.middleboxes()[0].process(wire)
    result = s.receiver().accept(hop.wire_out)
    assert result.accepted and result.segments[1] == plain.split(layout.lengths)[1].flip(0)


def test_self_verify_targets_are_checked():
    rights = AccessRights(4, 1, {(0, 1): Access.READ, (0, 2): Access.READ})
    s = build_session(rights, SegmentationInfo.of((16, 0)), self_verifying={1})
    mb1, mb2 = s.middleboxes()
    wire = s.sender().send(s.plaintext, template_id=0)
    target_byte = len(wire) - 2 * 16 - 1
    assert wire[target_byte] == 1
    for other in (0, 2, 3, 9):
        forged = bytearray(wire)
        forged[target_byte] = other
        assert mb1.process(bytes(forged)).verdict is Verdict.REJECT
    # a tag whose target was skipped is caught downstream and at the receiver
    assert mb2.process(wire).reason == "unexpected self-verify targets [1]"
    assert s.receiver().accept(wire).reason == "unconsumed self-verify tags"
    assert s.receiver().accept(mb2.process(mb1.process(wire).wire_out).wire_out).accepted
