"""Party A: announces the call, signs both channels, closes the chain."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

from ..archive import start_payload
from ..chain import ChainState, build_interval, seal_interval
from ..core import (
    CallHeader,
    CallTrailer,
    Certificate,
    ChannelDirection,
    MediaPacket,
    SealedInterval,
    TerminationReason,
    TrailerSeal,
    Violation,
    ViolationKind,
)
from ..crypto import SigningKey, sign
from ..policy import PolicyConfig, QosMonitor, ReplayResult, ReplayWindow, SeqTracker, timestamp_check
from . import events as ev
from .machine import Machine, Phase, trailer_for
from .messages import TERMINATE_ACK, Ack, Announce, IntervalSig, SeqList, Terminate

A_TO_B = ChannelDirection.A_TO_B
B_TO_A = ChannelDirection.B_TO_A

PacketFilter = Callable[[list[MediaPacket], int], list[MediaPacket]]

TERMINATE_RETRIES = 10


class Signer(Machine):
    """Signer state machine.

    ``btoa_filter`` lets a test play a dishonest A that drops part of B's
    packets before signing them.
    """

    def __init__(
        self,
        key: SigningKey,
        cert_chain: Sequence[Certificate],
        header: CallHeader,
        config: PolicyConfig = PolicyConfig(),
        btoa_filter: Optional[PacketFilter] = None,
    ):
        super().__init__(config, header.interval_length_ms)
        self.key = key
        self.cert_chain = tuple(cert_chain)
        self.header = header
        self.btoa_filter = btoa_filter
        self.announce: Optional[Announce] = None
        self.announce_acked = False
        self.chain: Optional[ChainState] = None
        # A->B: packets A sent, kept one iteration past signing
        self.sent: dict[int, tuple[MediaPacket, int]] = {}
        self.reported_max = -1
        self.signed_max_history: list[int] = []
        self.sealed_requests: dict[int, SealedInterval] = {}
        self.next_request = 0
        self.atob_qos = QosMonitor(config)
        self.atob_seqs = SeqTracker(config)
        # B->A: received packets, sorted by the replay window
        self.btoa_window = ReplayWindow(config.replay_window_size)
        self.btoa_collected: list[MediaPacket] = []
        self.btoa_start = header.call_start_wallclock
        self.btoa_qos = QosMonitor(config)
        self.btoa_seqs = SeqTracker(config)
        self.pending: Optional[SealedInterval] = None
        self.pending_since = 0
        self.acked: set[int] = set()
        self.starts: dict[ChannelDirection, list[int]] = {A_TO_B: [], B_TO_A: []}
        self.terminate_msg: Optional[Terminate] = None
        self.terminate_tries = 0

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: int) -> list:
        self._out = []
        self.now = self.last_heard = now
        env = sign(self.key, self.header.encode(), self.cert_chain)
        self.announce = Announce(env)
        self.chain = ChainState.anchored(start_payload(self.header, env))
        self.btoa_start = now
        rto = self.config.retransmit_timeout_ms
        self.emit(
            ev.SendSigMsg(self.announce),
            ev.StartTimer(ev.ANNOUNCE, now + rto),
            ev.StartTimer(ev.INTERVAL, now + self.interval_length),
            ev.StartTimer(ev.WATCHDOG, now + self.drop_timeout),
        )
        return self._out

    def on_hangup(self) -> None:
        if self.phase in (Phase.NEGOTIATING, Phase.ACTIVE):
            self.terminate(CallTrailer(self.now, TerminationReason.NORMAL_HANGUP, signed=True))

    def terminate(self, trailer: CallTrailer) -> None:
        """Sign and send the end-of-call trailer, sealing the chain head."""
        self.phase = Phase.TERMINATING
        self.trailer = trailer
        seal = TrailerSeal(trailer, self.chain.next_interval_index, self.chain.last_link)
        self.terminate_msg = Terminate(trailer, sign(self.key, seal.encode()))
        self.terminate_tries = 0
        self.emit(
            ev.SuspendTimer(ev.INTERVAL),
            ev.SendSigMsg(self.terminate_msg),
            ev.StartTimer(ev.TERMINATE, self.now + self.config.retransmit_timeout_ms),
            ev.TerminateCall(trailer),
        )

    def policy_terminate(self, violation: Violation) -> None:
        self.terminate(trailer_for(self.now, violation, signed=True))

    def connection_dropped(self) -> None:
        self.close(CallTrailer(self.now, TerminationReason.CONNECTION_DROP))

    def close(self, trailer: Optional[CallTrailer] = None) -> None:
        already_ended = self.trailer is not None
        if trailer is not None and self.trailer is None:
            self.trailer = trailer
        self.phase = Phase.CLOSED
        for t in (ev.INTERVAL, ev.RETRANSMIT, ev.ANNOUNCE, ev.TERMINATE, ev.WATCHDOG):
            self.emit(ev.SuspendTimer(t))
        if not already_ended and self.trailer is not None:
            self.emit(ev.TerminateCall(self.trailer))

    # -- media -------------------------------------------------------------

    def on_media(self, event: ev.MediaArrived) -> None:
        if self.phase is Phase.NEGOTIATING:
            self.phase = Phase.ACTIVE
        p = event.packet
        if event.channel == A_TO_B:
            if self.phase is Phase.ACTIVE:
                self.sent[p.seq] = (p, self.now)
            return
        self.heard()
        if self.phase is not Phase.ACTIVE:
            return
        v = timestamp_check(p, self.now, self.config, channel=B_TO_A)
        if v is not None and self.violate(v):
            return
        result, released = self.btoa_window.push(p)
        if result is ReplayResult.DUPLICATE and self.config.terminate_on_duplicate:
            self.violate(Violation(ViolationKind.DUPLICATE, f"duplicate seq {p.seq}", seq=p.seq, channel=B_TO_A))
            return
        self.btoa_collected.extend(released)

    # -- signalling --------------------------------------------------------

    def on_message(self, msg) -> None:
        if not isinstance(msg, Terminate):
            self.announce_acked = True
        if isinstance(msg, SeqList):
            self.on_seq_list(msg)
        elif isinstance(msg, Ack):
            self.on_ack(msg.interval_index)
        elif isinstance(msg, Terminate):
            self.on_peer_terminate(msg)
        else:
            self.violate(Violation(ViolationKind.MALFORMED_MESSAGE, f"unexpected {type(msg).__name__} at signer"))

    def on_peer_terminate(self, msg: Terminate) -> None:
        if self.phase is Phase.TERMINATING:
            return
        if msg.trailer.reason == TerminationReason.NORMAL_HANGUP and self.phase is Phase.ACTIVE:
            # B hung up; A closes the chain with its own signed trailer
            self.terminate(CallTrailer(self.now, TerminationReason.NORMAL_HANGUP, signed=True))
            return
        self.close(msg.trailer)

    def on_seq_list(self, msg: SeqList) -> None:
        cached = self.sealed_requests.get(msg.request_index)
        if cached is not None:
            self.emit(ev.SendSigMsg(IntervalSig(cached)))
            return
        if msg.request_index < self.next_request or self.phase is not Phase.ACTIVE or self.stopped:
            return
        where = dict(interval_index=self.chain.next_interval_index, channel=A_TO_B)
        if msg.channel != A_TO_B:
            self.violate(Violation(ViolationKind.MALFORMED_MESSAGE, "sequence list for B->A", **where))
            return
        if msg.request_index != self.next_request:
            self.violate(Violation(
                ViolationKind.NON_MONOTONIC_SEQ,
                f"request {msg.request_index} skips {self.next_request}",
                **where,
            ))
            return
        unknown = [s for s in msg.seqs if s not in self.sent]
        if unknown:
            self.violate(Violation(
                ViolationKind.UNKNOWN_SEQ_REQUESTED,
                f"B requested {len(unknown)} seqs A never sent",
                seq=unknown[0],
                **where,
            ))
            return
        obs = self.atob_seqs.observe(msg.seqs, **where)
        if obs.violation is not None and self.violate(obs.violation):
            return
        # A's own loss measure: every packet it sent that B should have had
        stale_cut = msg.end_ms - self.config.latency_slack_ms
        hi = max(msg.seqs[-1] if msg.seqs else -1,
                 max((s for s, (_, t) in self.sent.items() if t <= stale_cut), default=-1))
        expected = sum(1 for s in self.sent if self.reported_max < s <= hi)
        v = self.atob_qos.record(expected, len(msg.seqs), **where)
        if v is not None and self.violate(v):
            return
        if msg.seqs:
            self.reported_max = msg.seqs[-1]
        packets = [self.sent[s][0] for s in msg.seqs]
        sealed = self._seal(A_TO_B, packets, (msg.start_ms, msg.end_ms))
        if sealed is None:
            return
        self.next_request += 1
        self.sealed_requests[msg.request_index] = sealed
        self.sealed_requests.pop(msg.request_index - 2, None)
        self.signed_max_history.append(self.reported_max)
        if len(self.signed_max_history) >= 2:
            floor = self.signed_max_history[-2]
            self.sent = {s: v for s, v in self.sent.items() if s > floor}
        self.emit(ev.SendSigMsg(IntervalSig(sealed)))

    def _seal(self, channel: ChannelDirection, packets, window) -> Optional[SealedInterval]:
        starts = self.starts[channel]
        starts.append(window[0])
        other = self.starts[channel.other]
        k = len(starts) - 1
        if k < len(other) and abs(starts[k] - other[k]) > self.config.drift_limit(self.interval_length):
            v = Violation(
                ViolationKind.CHANNEL_DRIFT,
                f"channel starts differ by {abs(starts[k] - other[k])} ms",
                interval_index=self.chain.next_interval_index,
                value=abs(starts[k] - other[k]),
            )
            if self.violate(v):
                return None
        payload = build_interval(self.chain, channel, packets, window)
        sealed, self.chain = seal_interval(self.key, payload, self.chain)
        return sealed

    def on_ack(self, index: int) -> None:
        if index == TERMINATE_ACK:
            if self.phase is Phase.TERMINATING:
                self.close()
            return
        if self.pending is not None and index == self.pending.payload.interval_index:
            self.acked.add(index)
            self.pending = None
            self.emit(ev.SuspendTimer(ev.RETRANSMIT))
            if self.phase is Phase.ACTIVE:
                deadline = max(self.now, self.btoa_start + self.interval_length)
                self.emit(ev.ResumeTimer(ev.INTERVAL, deadline))
        elif index in self.acked:
            return  # repeated ack, e.g. for a retransmission
        else:
            self.violate(Violation(
                ViolationKind.UNEXPECTED_ACK, f"ack for interval {index} that is not pending",
                interval_index=index,
            ))

    # -- timers ------------------------------------------------------------

    def on_timer(self, timer_id: str) -> None:
        rto = self.config.retransmit_timeout_ms
        if timer_id == ev.WATCHDOG:
            self.check_watchdog()
        elif timer_id == ev.ANNOUNCE:
            if not self.announce_acked and self.phase is not Phase.TERMINATING:
                self.emit(ev.SendSigMsg(self.announce), ev.StartTimer(ev.ANNOUNCE, self.now + rto))
        elif timer_id == ev.INTERVAL:
            self.seal_btoa()
        elif timer_id == ev.RETRANSMIT:
            if self.pending is None:
                return
            if self.phase is Phase.ACTIVE and self.peer_alive() and self.now - self.pending_since > self.interval_length:
                v = Violation(
                    ViolationKind.QOS_UNDERRUN,
                    f"interval {self.pending.payload.interval_index} unacknowledged for "
                    f"{self.now - self.pending_since} ms",
                    interval_index=self.pending.payload.interval_index,
                    channel=B_TO_A,
                )
                if self.violate(v):
                    return
            self.emit(ev.SendSigMsg(IntervalSig(self.pending)), ev.StartTimer(ev.RETRANSMIT, self.now + rto))
        elif timer_id == ev.TERMINATE:
            if self.phase is not Phase.TERMINATING:
                return
            self.terminate_tries += 1
            if self.terminate_tries >= TERMINATE_RETRIES:
                self.close()
            else:
                self.emit(ev.SendSigMsg(self.terminate_msg), ev.StartTimer(ev.TERMINATE, self.now + rto))

    def seal_btoa(self) -> None:
        if self.pending is not None or self.phase is not Phase.ACTIVE or self.stopped:
            return
        self.btoa_collected.extend(self.btoa_window.flush())
        packets, self.btoa_collected = self.btoa_collected, []
        window = (self.btoa_start, self.now)
        where = dict(interval_index=self.chain.next_interval_index, channel=B_TO_A)
        seqs = [p.seq for p in packets]
        obs = self.btoa_seqs.observe(seqs, **where)
        if obs.violation is not None and self.violate(obs.violation):
            return
        v = self.btoa_qos.record(obs.expected, obs.received, **where)
        if v is not None and self.violate(v):
            return
        if self.btoa_filter is not None:
            packets = self.btoa_filter(packets, self.now)
        sealed = self._seal(B_TO_A, packets, window)
        if sealed is None:
            return
        self.btoa_start = self.now
        self.pending, self.pending_since = sealed, self.now
        self.emit(
            ev.SendSigMsg(IntervalSig(sealed)),
            ev.SuspendTimer(ev.INTERVAL),
            ev.StartTimer(ev.RETRANSMIT, self.now + self.config.retransmit_timeout_ms),
        )


def signer_init(key, cert_chain, header, config: PolicyConfig = PolicyConfig(), **kw):
    signer = Signer(key, cert_chain, header, config, **kw)
    return signer, signer.start(header.call_start_wallclock)


def signer_on_event(state: Signer, event: ev.ProtocolEvent):
    return state, state.handle(event)
