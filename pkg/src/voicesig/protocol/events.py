"""Inputs to and outputs from the protocol machines.

Every event carries the injected wallclock ``now``; actions are the machines'
only side-effect channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from ..archive import ChunkRecord
from ..core import CallTrailer, ChannelDirection, MediaPacket, Violation
from .messages import SigMessage

# Timer identifiers
INTERVAL = "interval"
RETRANSMIT = "retransmit"
ANNOUNCE = "announce"
TERMINATE = "terminate"
WATCHDOG = "watchdog"


@dataclass(frozen=True)
class MediaArrived:
    """A media packet seen by a machine.

    For the channel a machine sends on, this reports its own outgoing packet;
    for the other channel it is a packet received from the network.
    """

    now: int
    packet: MediaPacket
    channel: ChannelDirection


@dataclass(frozen=True)
class SigMsgArrived:
    now: int
    message: SigMessage


@dataclass(frozen=True)
class TimerFired:
    now: int
    timer_id: str


@dataclass(frozen=True)
class LocalHangup:
    now: int


@dataclass(frozen=True)
class ClockTick:
    now: int


ProtocolEvent = Union[MediaArrived, SigMsgArrived, TimerFired, LocalHangup, ClockTick]


@dataclass(frozen=True)
class SendSigMsg:
    message: SigMessage


@dataclass(frozen=True)
class EmitArchiveChunk:
    chunk: ChunkRecord


@dataclass(frozen=True)
class StartTimer:
    timer_id: str
    deadline: int


@dataclass(frozen=True)
class SuspendTimer:
    timer_id: str


@dataclass(frozen=True)
class ResumeTimer:
    timer_id: str
    deadline: int


@dataclass(frozen=True)
class TerminateCall:
    trailer: CallTrailer


@dataclass(frozen=True)
class RaiseViolation:
    violation: Violation


ProtocolAction = Union[
    SendSigMsg, EmitArchiveChunk, StartTimer, SuspendTimer, ResumeTimer, TerminateCall, RaiseViolation
]
