import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from support import GOLDEN_MESSAGES, golden_anchor, golden_bytes, sample_messages
from voicesig.archive import read_archive
from voicesig.core import CallTrailer, ChannelDirection, FormatError, MediaPacket, TerminationReason, ViolationKind
from voicesig.policy import OnViolation, PolicyConfig
from voicesig.protocol import (
    TERMINATE_ACK,
    Ack,
    Announce,
    IntervalSig,
    Phase,
    Recorder,
    RecorderOutcome,
    SeqList,
    Signer,
    Terminate,
    decode_sig_msg,
    encode_sig_msg,
    events as ev,
)
from voicesig.protocol.messages import MAX_MESSAGE_BYTES
from voicesig.simnet import SimScenario, make_pki, scenario_header

A_TO_B, B_TO_A = ChannelDirection.A_TO_B, ChannelDirection.B_TO_A


# -- codec -------------------------------------------------------------------------

def test_messages_match_frozen_encodings():
    frozen = json.loads(GOLDEN_MESSAGES.read_text())
    fresh = {k: encode_sig_msg(m).hex() for k, m in sample_messages(golden_bytes()).items()}
    assert fresh == frozen


def test_ack_is_hand_encodable():
    assert encode_sig_msg(Ack(3)) == bytes([0x56, 1, 4, 8, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0])
    assert encode_sig_msg(Ack(TERMINATE_ACK))[-8:] == b"\xff" * 8


@pytest.mark.parametrize("name", ["announce", "seq_list", "interval_sig", "ack", "terminate_ack", "terminate"])
def test_sample_round_trip(name):
    msg = sample_messages(golden_bytes())[name]
    assert decode_sig_msg(encode_sig_msg(msg)) == msg


@given(st.integers(0, 2**64 - 1), st.sampled_from(ChannelDirection), st.sets(st.integers(0, 2**64 - 1), max_size=50))
def test_seq_list_round_trip(index, channel, seqs):
    msg = SeqList(index, channel, 5, 10, tuple(sorted(seqs)))
    assert decode_sig_msg(encode_sig_msg(msg)) == msg


def test_non_ascending_rejected_both_ways():
    with pytest.raises(ValueError):
        SeqList(0, A_TO_B, 0, 1, (3, 3))
    raw = bytearray(encode_sig_msg(SeqList(0, A_TO_B, 0, 1, (1, 2))))
    raw[-16:-8] = (5).to_bytes(8, "little")
    with pytest.raises(FormatError) as info:
        decode_sig_msg(bytes(raw))
    assert "NonAscending" in str(info.value)


def test_oversize_rejected():
    seqs = tuple(range(MAX_MESSAGE_BYTES // 8))
    with pytest.raises(ValueError):
        encode_sig_msg(SeqList(0, A_TO_B, 0, 1, seqs))
    with pytest.raises(FormatError):
        decode_sig_msg(bytes(MAX_MESSAGE_BYTES + 1))


@pytest.mark.parametrize("raw, offset", [
    (b"\x57\x01\x04\x08\x00\x00\x00" + bytes(8), 0),
    (b"\x56\x02\x04\x08\x00\x00\x00" + bytes(8), 1),
    (b"\x56\x01\x09\x08\x00\x00\x00" + bytes(8), 2),
    (b"\x56\x01\x04\x09\x00\x00\x00" + bytes(8), 3),
])
def test_frame_errors_are_localized(raw, offset):
    with pytest.raises(FormatError) as info:
        decode_sig_msg(raw)
    assert info.value.offset == offset


@given(st.binary(max_size=300))
def test_decoder_only_raises_format_errors(data):
    try:
        decode_sig_msg(b"\x56\x01" + data)
    except FormatError as exc:
        assert 0 <= exc.offset <= len(data) + 2


# -- machines driven by hand -------------------------------------------------------

SCEN = SimScenario()
PKI = make_pki(SCEN)
HEADER = scenario_header(SCEN)
T0 = SCEN.start_wallclock


def messages(actions):
    return [a.message for a in actions if isinstance(a, ev.SendSigMsg)]


def pkt(seq, t):
    return MediaPacket(1, seq, seq * 160, 0, t, b"\x00" * 20)


class Pair:
    """Zero-latency lockstep wiring of one signer and one recorder."""

    def __init__(self, config=PolicyConfig()):
        self.a = Signer(PKI.leaf_key, [PKI.leaf_cert], HEADER, config)
        self.b = Recorder(PKI.anchor, config, interval_length_ms=HEADER.interval_length_ms)
        self.timers = {}
        self.now = T0
        self.deliver(self.a, self.a.start(T0))
        self.deliver(self.b, self.b.start(T0))

    def deliver(self, source, actions):
        # messages are queued so each machine's action list applies in full
        # before the peer's reply, as it would over any real link
        queue = [(source, actions)]
        while queue:
            src, acts = queue.pop(0)
            target = self.b if src is self.a else self.a
            for act in acts:
                if isinstance(act, (ev.StartTimer, ev.ResumeTimer)):
                    self.timers[(src, act.timer_id)] = act.deadline
                elif isinstance(act, ev.SuspendTimer):
                    self.timers.pop((src, act.timer_id), None)
                elif isinstance(act, ev.SendSigMsg):
                    queue.append((target, target.handle(ev.SigMsgArrived(self.now, act.message))))

    def advance(self, until, step=20):
        seq = getattr(self, "seq", 0)
        while self.now < until:
            self.now += step
            for (m, tid), deadline in sorted(self.timers.items(), key=lambda kv: kv[1]):
                if deadline <= self.now and self.timers.get((m, tid)) == deadline:
                    del self.timers[(m, tid)]
                    self.deliver(m, m.handle(ev.TimerFired(self.now, tid)))
            if self.a.phase is Phase.CLOSED or self.b.phase is Phase.CLOSED:
                break
            for sender, ch in ((self.a, A_TO_B), (self.b, B_TO_A)):
                p = pkt(seq, self.now)
                self.deliver(sender, sender.handle(ev.MediaArrived(self.now, p, ch)))
                receiver = self.b if sender is self.a else self.a
                self.deliver(receiver, receiver.handle(ev.MediaArrived(self.now, p, ch)))
            seq += 1
        self.seq = seq


def test_lockstep_call_is_accepted():
    pair = Pair()
    pair.advance(T0 + 4000)
    pair.deliver(pair.a, pair.a.handle(ev.LocalHangup(pair.now)))
    assert pair.b.outcome is RecorderOutcome.ACCEPTED
    assert pair.a.phase is Phase.CLOSED
    arch = read_archive(pair.b.archive_bytes)
    assert len(arch.intervals) >= 6
    assert {c.sealed.payload.channel for c in arch.intervals} == set(ChannelDirection)


def test_hangup_by_recorder_gets_signed_trailer():
    pair = Pair()
    pair.advance(T0 + 2500)
    pair.deliver(pair.b, pair.b.handle(ev.LocalHangup(pair.now)))
    assert pair.b.outcome is RecorderOutcome.ACCEPTED
    assert read_archive(pair.b.archive_bytes).trailer.signed


def test_duplicate_interval_sig_is_re_acked():
    pair = Pair()
    pair.advance(T0 + 1500)
    sealed = read_archive(pair.b.archive_bytes).intervals[0].sealed
    assert sealed.payload.channel is B_TO_A
    out = pair.b.handle(ev.SigMsgArrived(pair.now, IntervalSig(sealed)))
    assert messages(out) == [Ack(0)]
    assert pair.b.violations == []


def test_unexpected_ack_is_a_violation():
    pair = Pair(PolicyConfig(on_violation=OnViolation.NOTIFY))
    pair.advance(T0 + 100)
    out = pair.a.handle(ev.SigMsgArrived(pair.now, Ack(41)))
    assert [a.violation.kind for a in out if isinstance(a, ev.RaiseViolation)] == [ViolationKind.UNEXPECTED_ACK]


def test_request_for_unsent_seqs_terminates():
    pair = Pair()
    pair.advance(T0 + 100)
    out = pair.a.handle(ev.SigMsgArrived(pair.now, SeqList(0, A_TO_B, T0, pair.now, (10**9,))))
    assert pair.a.violations[0].kind is ViolationKind.UNKNOWN_SEQ_REQUESTED
    assert any(isinstance(a, ev.TerminateCall) for a in out)
    assert isinstance(messages(out)[0], Terminate)


def test_interval_sig_before_announce_is_stashed():
    pair = Pair()
    pair.advance(T0 + 1500)
    arch = read_archive(pair.b.archive_bytes)
    late = Recorder(PKI.anchor)
    late.start(T0)
    # B->A interval 0 arrives first; B never sent those packets so it must
    # at least hold it until the announce, then judge it
    assert late.handle(ev.SigMsgArrived(T0 + 5, IntervalSig(arch.intervals[0].sealed))) == []
    assert late.stash
    out = late.handle(ev.SigMsgArrived(T0 + 6, Announce(arch.header_envelope)))
    assert any(isinstance(a, ev.EmitArchiveChunk) for a in out)
    assert late.stash == []


def test_watchdog_drops_silent_peer():
    b = Recorder(PKI.anchor)
    b.start(T0)
    out = b.handle(ev.TimerFired(T0 + 3000, ev.WATCHDOG))
    assert b.trailer.reason is TerminationReason.CONNECTION_DROP
    assert any(isinstance(a, ev.TerminateCall) for a in out)


def test_closed_machine_ignores_events():
    b = Recorder(PKI.anchor)
    b.start(T0)
    b.handle(ev.TimerFired(T0 + 3000, ev.WATCHDOG))
    assert b.handle(ev.SigMsgArrived(T0 + 3001, Ack(0))) == []


def test_terminate_ack_closes_signer():
    pair = Pair()
    pair.advance(T0 + 500)
    a = pair.a
    a.handle(ev.LocalHangup(pair.now))
    assert a.phase is Phase.TERMINATING
    a.handle(ev.SigMsgArrived(pair.now + 1, Ack(TERMINATE_ACK)))
    assert a.phase is Phase.CLOSED


def test_unsigned_terminate_from_signer_ends_recorder_as_violation():
    pair = Pair()
    pair.advance(T0 + 500)
    trailer = CallTrailer(pair.now, TerminationReason.POLICY_VIOLATION, ViolationKind.BORDER_GAP)
    pair.b.handle(ev.SigMsgArrived(pair.now, Terminate(trailer)))
    assert pair.b.outcome is RecorderOutcome.VIOLATION


def test_announce_from_foreign_root_rejected():
    # the golden root is seeded differently from this module's PKI
    b = Recorder(golden_anchor())
    b.start(T0)
    b.handle(ev.SigMsgArrived(T0, Announce(Pair().a.announce.envelope)))
    assert b.violations[0].kind is ViolationKind.UNTRUSTED_CERTIFICATE
    assert b.phase is Phase.CLOSED
