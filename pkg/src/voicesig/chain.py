"""Interval construction, sealing and the production-order hash chain.

Both channels feed one chain. Each interval's ``prev_link`` is the digest of
the complete serialized predecessor (payload and signature), and the first
interval links to the digest of the start chunk payload.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import (
    Certificate,
    ChannelDirection,
    Digest,
    IntervalPayload,
    MediaPacket,
    SealedInterval,
)
from .crypto import SigningKey, check_signature, digest, sign


class ChainError(ValueError):
    pass


class DuplicateSeq(ChainError):
    pass


class ChainMismatch(ChainError):
    pass


@dataclass(frozen=True)
class ChainState:
    next_interval_index: int
    last_link: Digest
    last_end: tuple[Optional[int], Optional[int]] = (None, None)

    @classmethod
    def anchored(cls, start_chunk_bytes: bytes) -> "ChainState":
        return cls(0, digest(start_chunk_bytes))


def packet_digest(packet: MediaPacket) -> Digest:
    return digest(packet.encode())


def build_interval(
    state: ChainState,
    channel: ChannelDirection,
    packets: Iterable[MediaPacket],
    window: tuple[int, int],
) -> IntervalPayload:
    ordered = sorted(packets, key=lambda p: p.seq)
    for a, b in zip(ordered, ordered[1:]):
        if a.seq == b.seq:
            raise DuplicateSeq(f"seq {a.seq} collected twice")
    start, end = window
    return IntervalPayload(
        interval_index=state.next_interval_index,
        channel=channel,
        start_wallclock=start,
        end_wallclock=end,
        prev_link=state.last_link,
        packet_seqs=tuple(p.seq for p in ordered),
        packet_hashes=tuple(packet_digest(p) for p in ordered),
    )


def seal_interval(
    key: SigningKey, payload: IntervalPayload, state: ChainState
) -> tuple[SealedInterval, ChainState]:
    if payload.prev_link != state.last_link:
        raise ChainMismatch("payload does not link to the current chain head")
    if payload.interval_index != state.next_interval_index:
        raise ChainMismatch(
            f"payload index {payload.interval_index}, chain expects {state.next_interval_index}"
        )
    sealed = SealedInterval(payload, sign(key, payload.encode()))
    last_end = list(state.last_end)
    last_end[payload.channel] = payload.end_wallclock
    return sealed, ChainState(
        next_interval_index=state.next_interval_index + 1,
        last_link=digest(sealed.encode()),
        last_end=tuple(last_end),
    )


@dataclass
class LinkCheck:
    position: int
    interval_index: int
    signature_ok: Optional[bool]
    link_ok: bool
    index_ok: bool

    @property
    def ok(self) -> bool:
        return self.link_ok and self.index_ok and self.signature_ok is not False


@dataclass
class ChainReport:
    entries: list[LinkCheck] = field(default_factory=list)
    final_link: Optional[Digest] = None

    @property
    def valid(self) -> bool:
        return all(e.ok for e in self.entries)

    def failures(self) -> list[LinkCheck]:
        return [e for e in self.entries if not e.ok]


def verify_chain(
    start_chunk_bytes: bytes,
    intervals: Sequence[SealedInterval],
    signer: Optional[Certificate] = None,
) -> ChainReport:
    """Check links, index continuity and (given ``signer``) every signature.

    Position ``i`` must hold the interval with index ``i``; the report is
    indexed by position so a deletion or swap is pinpointed where it lands.
    """
    report = ChainReport()
    link = digest(start_chunk_bytes)
    for pos, sealed in enumerate(intervals):
        report.entries.append(LinkCheck(
            position=pos,
            interval_index=sealed.payload.interval_index,
            signature_ok=None if signer is None else check_signature(signer, sealed.envelope),
            link_ok=sealed.payload.prev_link == link,
            index_ok=sealed.payload.interval_index == pos,
        ))
        link = digest(sealed.encode())
    report.final_link = link
    return report


def seal_many(
    key: SigningKey,
    state: ChainState,
    batches: Iterable[tuple[ChannelDirection, Sequence[MediaPacket], tuple[int, int]]],
) -> tuple[list[SealedInterval], ChainState]:
    """Seal a sequence of ``(channel, packets, window)`` batches in order."""
    out = []
    for channel, packets, window in batches:
        sealed, state = seal_interval(key, build_interval(state, channel, packets, window), state)
        out.append(sealed)
    return out, state


__all__ = [
    "ChainError",
    "ChainMismatch",
    "ChainReport",
    "ChainState",
    "DuplicateSeq",
    "LinkCheck",
    "build_interval",
    "packet_digest",
    "seal_interval",
    "seal_many",
    "verify_chain",
]
