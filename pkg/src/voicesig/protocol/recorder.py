"""Party B: requests A->B signatures, checks everything A signs, archives."""

from __future__ import annotations

import io
from enum import Enum
from typing import BinaryIO, Callable, Optional

from ..archive import ArchiveWriter, ChunkRecord, ChunkType, start_payload
from ..chain import packet_digest
from ..core import (
    CallHeader,
    CallTrailer,
    Certificate,
    ChannelDirection,
    Digest,
    FormatError,
    MediaPacket,
    SealedInterval,
    TerminationReason,
    TrailerSeal,
    Violation,
    ViolationKind,
)
from ..crypto import TrustAnchor, VerifyResult, check_signature, digest, verify_envelope
from ..policy import (
    PolicyConfig,
    QosMonitor,
    ReplayResult,
    ReplayWindow,
    SeqTracker,
    timestamp_check,
)
from . import events as ev
from .machine import Machine, Phase, trailer_for
from .messages import TERMINATE_ACK, Ack, Announce, IntervalSig, SeqList, Terminate

A_TO_B = ChannelDirection.A_TO_B
B_TO_A = ChannelDirection.B_TO_A

SeqFilter = Callable[[list[int], int], list[int]]

MAX_OUT_OF_ORDER = 4
TERMINATE_RETRIES = 10


class RecorderOutcome(Enum):
    ACCEPTED = "accepted"
    VIOLATION = "violation"
    DROPPED = "dropped"
    OPEN = "open"


class Recorder(Machine):
    """Recorder state machine.

    ``report_filter`` lets a test play a dishonest B that under-reports the
    sequence numbers it received.
    """

    def __init__(
        self,
        anchor: TrustAnchor,
        config: PolicyConfig = PolicyConfig(),
        expected_signer_uri: Optional[str] = None,
        sink: Optional[BinaryIO] = None,
        report_filter: Optional[SeqFilter] = None,
        interval_length_ms: int = 1000,
    ):
        super().__init__(config, interval_length_ms)
        self.anchor = anchor
        self.expected_signer_uri = expected_signer_uri
        self.sink = sink if sink is not None else io.BytesIO()
        self.report_filter = report_filter
        self.header: Optional[CallHeader] = None
        self.leaf: Optional[Certificate] = None
        self.writer: Optional[ArchiveWriter] = None
        self.next_index = 0
        self.last_link: Optional[Digest] = None
        self.stash: list[SealedInterval] = []
        self.pending: dict[int, tuple[SealedInterval, list[MediaPacket]]] = {}
        # A->B collection driven by B's interval timer
        self.atob_window = ReplayWindow(config.replay_window_size)
        self.collected: list[MediaPacket] = []
        self.window_start = 0
        self.request_index = 0
        self.outstanding: Optional[SeqList] = None
        self.outstanding_packets: dict[int, MediaPacket] = {}
        self.outstanding_since = 0
        # B->A: B's own packets, kept until A has signed past them
        self.sent: dict[int, MediaPacket] = {}
        self.covered_max = -1
        self.coverage = QosMonitor(config, ViolationKind.COVERAGE_TOO_LOW)
        # mirrors of the offline checks, run as intervals are archived
        self.trackers = {c: SeqTracker(config) for c in ChannelDirection}
        self.qos = {c: QosMonitor(config) for c in ChannelDirection}
        self.starts: dict[ChannelDirection, list[int]] = {A_TO_B: [], B_TO_A: []}
        self.peer_terminate: Optional[Terminate] = None
        self.hangup_request: Optional[Terminate] = None
        self.hangup_tries = 0
        self.stragglers = 0

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: int) -> list:
        self._out = []
        self.now = self.last_heard = now
        self.emit(ev.StartTimer(ev.WATCHDOG, now + self.drop_timeout))
        return self._out

    @property
    def archive_bytes(self) -> bytes:
        return self.sink.getvalue() if isinstance(self.sink, io.BytesIO) else b""

    @property
    def outcome(self) -> RecorderOutcome:
        if self.phase is not Phase.CLOSED:
            return RecorderOutcome.OPEN
        t = self.trailer
        if t is None or self.violations or t.reason in (
            TerminationReason.QOS_UNDERRUN, TerminationReason.POLICY_VIOLATION
        ):
            return RecorderOutcome.VIOLATION
        if t.reason == TerminationReason.CONNECTION_DROP or not t.signed:
            return RecorderOutcome.DROPPED
        return RecorderOutcome.ACCEPTED

    def finish(self, trailer: CallTrailer, envelope=None) -> None:
        self.trailer = trailer
        if self.writer is not None and not self.writer.closed:
            chunk = self.writer.close(trailer, envelope)
            self.emit(ev.EmitArchiveChunk(chunk))
        self.stragglers += len(self.collected) + len(self.outstanding_packets)
        self.phase = Phase.CLOSED
        for t in (ev.INTERVAL, ev.RETRANSMIT, ev.TERMINATE, ev.WATCHDOG):
            self.emit(ev.SuspendTimer(t))
        self.emit(ev.TerminateCall(trailer))

    def policy_terminate(self, violation: Violation) -> None:
        trailer = trailer_for(self.now, violation, signed=False)
        self.emit(ev.SendSigMsg(Terminate(trailer)))
        self.finish(trailer)

    def connection_dropped(self) -> None:
        self.finish(CallTrailer(self.now, TerminationReason.CONNECTION_DROP))

    def on_hangup(self) -> None:
        if self.phase is Phase.ACTIVE:
            # ask A to close the chain; A answers with its signed trailer
            self.phase = Phase.TERMINATING
            self.hangup_request = Terminate(CallTrailer(self.now, TerminationReason.NORMAL_HANGUP))
            self.emit(
                ev.SuspendTimer(ev.INTERVAL),
                ev.SendSigMsg(self.hangup_request),
                ev.StartTimer(ev.TERMINATE, self.now + self.config.retransmit_timeout_ms),
            )

    # -- media -------------------------------------------------------------

    def on_media(self, event: ev.MediaArrived) -> None:
        p = event.packet
        if event.channel == B_TO_A:
            if self.phase in (Phase.NEGOTIATING, Phase.ACTIVE):
                self.sent[p.seq] = p
            return
        self.heard()
        if self.phase not in (Phase.NEGOTIATING, Phase.ACTIVE):
            return
        v = timestamp_check(p, self.now, self.config, channel=A_TO_B)
        if v is not None and self.violate(v):
            return
        result, released = self.atob_window.push(p)
        if result is ReplayResult.DUPLICATE and self.config.terminate_on_duplicate:
            self.violate(Violation(ViolationKind.DUPLICATE, f"duplicate seq {p.seq}", seq=p.seq, channel=A_TO_B))
            return
        self.collected.extend(released)

    # -- signalling --------------------------------------------------------

    def on_message(self, msg) -> None:
        if isinstance(msg, Announce):
            self.on_announce(msg)
        elif isinstance(msg, IntervalSig):
            if self.header is None:
                if len(self.stash) < 2 * MAX_OUT_OF_ORDER:
                    self.stash.append(msg.sealed)
                return
            self.on_interval_sig(msg.sealed)
        elif isinstance(msg, Terminate):
            self.on_terminate(msg)
        else:
            self.violate(Violation(ViolationKind.MALFORMED_MESSAGE, f"unexpected {type(msg).__name__} at recorder"))

    def on_announce(self, msg: Announce) -> None:
        if self.header is not None:
            return
        env = msg.envelope
        try:
            header = msg.header
        except FormatError as exc:
            self.violate(Violation(ViolationKind.MALFORMED_MESSAGE, f"announce: {exc}"))
            return
        if not env.cert_chain:
            self.violate(Violation(ViolationKind.UNTRUSTED_CERTIFICATE, "announce carries no certificate chain"))
            return
        expected = self.expected_signer_uri or header.caller_uri
        result = verify_envelope(self.anchor, env.cert_chain[0], env, expected, header.call_start_wallclock)
        if result is not VerifyResult.VALID:
            kind = (ViolationKind.SIGNATURE_INVALID if result is VerifyResult.BAD_SIGNATURE
                    else ViolationKind.UNTRUSTED_CERTIFICATE)
            self.violate(Violation(kind, f"announce envelope: {result.value}"))
            return
        self.header, self.leaf = header, env.cert_chain[0]
        self.interval_length = header.interval_length_ms
        self.writer = ArchiveWriter(self.sink, header, env)
        self.emit(ev.EmitArchiveChunk(ChunkRecord(ChunkType.START, self.writer.start_chunk)))
        self.last_link = digest(start_payload(header, env))
        self.phase = Phase.ACTIVE
        self.window_start = self.now
        self.emit(ev.StartTimer(ev.INTERVAL, self.now + self.interval_length))
        stash, self.stash = self.stash, []
        for sealed in stash:
            if self.phase is Phase.ACTIVE:
                self.on_interval_sig(sealed)

    def on_interval_sig(self, sealed: SealedInterval) -> None:
        payload = sealed.payload
        idx = payload.interval_index
        where = dict(interval_index=idx, channel=payload.channel)
        if not check_signature(self.leaf, sealed.envelope) or sealed.envelope.cert_chain is not None:
            self.violate(Violation(ViolationKind.SIGNATURE_INVALID, "interval signature invalid", **where))
            return
        if idx < self.next_index or idx in self.pending:
            if payload.channel == B_TO_A:
                self.emit(ev.SendSigMsg(Ack(idx)))
            return
        if idx > self.next_index + MAX_OUT_OF_ORDER:
            self.violate(Violation(ViolationKind.CHAIN_MISMATCH, f"interval {idx} far ahead of {self.next_index}", **where))
            return
        if payload.channel == A_TO_B:
            packets = self._accept_atob(sealed)
        else:
            packets = self._accept_btoa(sealed)
        if packets is None:
            return
        self.pending[idx] = (sealed, packets)
        self._drain()

    def _hash_check(self, sealed: SealedInterval, held: dict[int, MediaPacket]) -> Optional[list[MediaPacket]]:
        payload = sealed.payload
        out = []
        for seq, h in zip(payload.packet_seqs, payload.packet_hashes):
            p = held.get(seq)
            if p is None or packet_digest(p) != h:
                self.violate(Violation(
                    ViolationKind.HASH_MISMATCH,
                    f"seq {seq} {'unknown' if p is None else 'hash differs'}",
                    interval_index=payload.interval_index, seq=seq, channel=payload.channel,
                ))
                return None
            out.append(p)
        return out

    def _accept_atob(self, sealed: SealedInterval) -> Optional[list[MediaPacket]]:
        payload = sealed.payload
        req = self.outstanding
        if req is None or payload.packet_seqs != req.seqs or \
                (payload.start_wallclock, payload.end_wallclock) != (req.start_ms, req.end_ms):
            self.violate(Violation(
                ViolationKind.COVERAGE_TOO_LOW,
                "A->B signature does not cover exactly the requested packets",
                interval_index=payload.interval_index, channel=A_TO_B,
            ))
            return None
        packets = self._hash_check(sealed, self.outstanding_packets)
        if packets is None:
            return None
        self.outstanding, self.outstanding_packets = None, {}
        self.emit(ev.SuspendTimer(ev.RETRANSMIT))
        if self.phase is Phase.ACTIVE:
            self.emit(ev.ResumeTimer(ev.INTERVAL, max(self.now, self.window_start + self.interval_length)))
        return packets

    def _accept_btoa(self, sealed: SealedInterval) -> Optional[list[MediaPacket]]:
        payload = sealed.payload
        packets = self._hash_check(sealed, self.sent)
        if packets is None:
            return None
        # did A sign enough of what B sent?
        stale_cut = payload.end_wallclock - self.config.latency_slack_ms
        hi = max(payload.packet_seqs[-1] if payload.packet_seqs else -1,
                 max((s for s, p in self.sent.items() if p.capture_wallclock <= stale_cut), default=-1))
        expected = sum(1 for s in self.sent if self.covered_max < s <= hi)
        v = self.coverage.record(expected, len(packets), interval_index=payload.interval_index, channel=B_TO_A)
        if v is not None and self.violate(v):
            return None
        if payload.packet_seqs:
            self.covered_max = payload.packet_seqs[-1]
            self.sent = {s: p for s, p in self.sent.items() if s > self.covered_max}
        self.emit(ev.SendSigMsg(Ack(payload.interval_index)))
        return packets

    def _drain(self) -> None:
        while self.next_index in self.pending and self.phase is not Phase.CLOSED:
            sealed, packets = self.pending.pop(self.next_index)
            if not self._archive(sealed, packets):
                return
        self._maybe_finish()

    def _archive(self, sealed: SealedInterval, packets: list[MediaPacket]) -> bool:
        payload = sealed.payload
        ch = payload.channel
        where = dict(interval_index=payload.interval_index, channel=ch)
        if payload.prev_link != self.last_link:
            return not self.violate(Violation(ViolationKind.CHAIN_MISMATCH, "prev_link does not match chain", **where))
        obs = self.trackers[ch].observe(payload.packet_seqs, **where)
        if obs.violation is not None and self.violate(obs.violation):
            return False
        v = self.qos[ch].record(obs.expected, obs.received, **where)
        if v is not None and self.violate(v):
            return False
        starts = self.starts[ch]
        starts.append(payload.start_wallclock)
        other = self.starts[ch.other]
        k = len(starts) - 1
        if k < len(other):
            drift = abs(starts[k] - other[k])
            if drift > self.config.drift_limit(self.interval_length):
                v = Violation(ViolationKind.CHANNEL_DRIFT, f"channel starts differ by {drift} ms", value=drift, **where)
                if self.violate(v):
                    return False
        chunk = self.writer.append_interval(packets, sealed)
        self.emit(ev.EmitArchiveChunk(chunk))
        self.last_link = digest(sealed.encode())
        self.next_index += 1
        return True

    def on_terminate(self, msg: Terminate) -> None:
        if msg.envelope is None:
            # unsigned: A aborted (policy or drop); nothing more will be signed
            if self.phase is not Phase.CLOSED:
                self.finish(msg.trailer)
            return
        try:
            seal = TrailerSeal.decode(msg.envelope.payload_bytes)
        except FormatError:
            seal = None
        if seal is None or self.leaf is None or seal.trailer != msg.trailer or \
                not check_signature(self.leaf, msg.envelope):
            self.violate(Violation(ViolationKind.SIGNATURE_INVALID, "end-of-call signature invalid"))
            return
        if seal.interval_count < self.next_index:
            self.violate(Violation(ViolationKind.CHAIN_MISMATCH, "trailer closes fewer intervals than archived"))
            return
        self.peer_terminate = msg
        if self.phase is Phase.ACTIVE:
            self.phase = Phase.TERMINATING
            self.emit(ev.SuspendTimer(ev.INTERVAL))
        self._maybe_finish()

    def _maybe_finish(self) -> None:
        msg = self.peer_terminate
        if msg is None or self.phase is Phase.CLOSED:
            return
        seal = TrailerSeal.decode(msg.envelope.payload_bytes)
        if seal.interval_count != self.next_index:
            return
        if seal.final_link != self.last_link:
            self.violate(Violation(ViolationKind.CHAIN_MISMATCH, "trailer does not seal the archived chain"))
            return
        self.emit(ev.SendSigMsg(Ack(TERMINATE_ACK)))
        self.finish(msg.trailer, msg.envelope)

    # -- timers ------------------------------------------------------------

    def on_timer(self, timer_id: str) -> None:
        if timer_id == ev.WATCHDOG:
            self.check_watchdog()
        elif timer_id == ev.INTERVAL:
            self.request_signature()
        elif timer_id == ev.TERMINATE:
            if self.peer_terminate is not None or self.hangup_request is None:
                return
            self.hangup_tries += 1
            if self.hangup_tries >= TERMINATE_RETRIES:
                self.finish(self.hangup_request.trailer)
            else:
                self.emit(ev.SendSigMsg(self.hangup_request),
                          ev.StartTimer(ev.TERMINATE, self.now + self.config.retransmit_timeout_ms))
        elif timer_id == ev.RETRANSMIT:
            req = self.outstanding
            if req is None:
                return
            if self.phase is Phase.ACTIVE and self.peer_alive() and self.now - self.outstanding_since > self.interval_length:
                v = Violation(
                    ViolationKind.QOS_UNDERRUN,
                    f"signature for request {req.request_index} outstanding for "
                    f"{self.now - self.outstanding_since} ms",
                    channel=A_TO_B,
                )
                if self.violate(v):
                    return
            self.emit(ev.SendSigMsg(req), ev.StartTimer(ev.RETRANSMIT, self.now + self.config.retransmit_timeout_ms))

    def request_signature(self) -> None:
        if self.outstanding is not None or self.phase is not Phase.ACTIVE or self.stopped:
            return
        self.collected.extend(self.atob_window.flush())
        packets = {p.seq: p for p in self.collected}
        self.collected = []
        seqs = sorted(packets)
        if self.report_filter is not None:
            seqs = sorted(self.report_filter(seqs, self.now))
        req = SeqList(self.request_index, A_TO_B, self.window_start, self.now, tuple(seqs))
        self.request_index += 1
        self.window_start = self.now
        self.outstanding = req
        self.outstanding_packets = {s: packets[s] for s in seqs}
        self.stragglers += len(packets) - len(seqs)
        self.outstanding_since = self.now
        self.emit(
            ev.SendSigMsg(req),
            ev.SuspendTimer(ev.INTERVAL),
            ev.StartTimer(ev.RETRANSMIT, self.now + self.config.retransmit_timeout_ms),
        )


def recorder_on_event(state: Recorder, event: ev.ProtocolEvent):
    return state, state.handle(event)
