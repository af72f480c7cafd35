"""Wire codec for the signature application stream.

Frame: magic ``0x56`` | version u8 | tag u8 | body length u32 LE | body.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from ..core import (
    CallHeader,
    CallTrailer,
    ChannelDirection,
    Decoder,
    Encoder,
    FormatError,
    SealedInterval,
    SignedEnvelope,
    decode_exact,
)

MAGIC = 0x56
VERSION = 1
MAX_MESSAGE_BYTES = 64 * 1024
FRAME_HEADER = 7
# Ack index reserved for acknowledging the end-of-call message
TERMINATE_ACK = 2**64 - 1


@dataclass(frozen=True)
class Announce:
    envelope: SignedEnvelope
    tag = 1

    @property
    def header(self) -> CallHeader:
        return CallHeader.decode(self.envelope.payload_bytes)

    def put(self, enc: Encoder) -> None:
        self.envelope.put(enc)

    @classmethod
    def get(cls, dec: Decoder) -> "Announce":
        return cls(SignedEnvelope.get(dec))


@dataclass(frozen=True)
class SeqList:
    request_index: int
    channel: ChannelDirection
    start_ms: int
    end_ms: int
    seqs: tuple[int, ...]
    tag = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "seqs", tuple(self.seqs))
        if any(b <= a for a, b in zip(self.seqs, self.seqs[1:])):
            raise ValueError("NonAscending: seqs must be strictly ascending")

    def put(self, enc: Encoder) -> None:
        enc.u64(self.request_index).u8(self.channel).u64(self.start_ms).u64(self.end_ms)
        enc.seq(self.seqs, Encoder.u64)

    @classmethod
    def get(cls, dec: Decoder) -> "SeqList":
        index = dec.u64()
        channel = dec.enum(ChannelDirection)
        start, end = dec.u64(), dec.u64()
        at = dec.offset
        seqs = dec.seq(Decoder.u64, 8)
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise FormatError(at, "NonAscending sequence list")
        return cls(index, channel, start, end, tuple(seqs))


@dataclass(frozen=True)
class IntervalSig:
    sealed: SealedInterval
    tag = 3

    def put(self, enc: Encoder) -> None:
        self.sealed.put(enc)

    @classmethod
    def get(cls, dec: Decoder) -> "IntervalSig":
        return cls(SealedInterval.get(dec))


@dataclass(frozen=True)
class Ack:
    interval_index: int
    tag = 4

    def put(self, enc: Encoder) -> None:
        enc.u64(self.interval_index)

    @classmethod
    def get(cls, dec: Decoder) -> "Ack":
        return cls(dec.u64())


@dataclass(frozen=True)
class Terminate:
    trailer: CallTrailer
    envelope: Optional[SignedEnvelope] = None
    tag = 5

    def put(self, enc: Encoder) -> None:
        self.trailer.put(enc)
        if self.envelope is None:
            enc.u8(0)
        else:
            enc.u8(1)
            self.envelope.put(enc)

    @classmethod
    def get(cls, dec: Decoder) -> "Terminate":
        trailer = CallTrailer.get(dec)
        return cls(trailer, SignedEnvelope.get(dec) if dec.flag() else None)


SigMessage = Union[Announce, SeqList, IntervalSig, Ack, Terminate]
_BY_TAG = {cls.tag: cls for cls in (Announce, SeqList, IntervalSig, Ack, Terminate)}


def encode_sig_msg(msg: SigMessage) -> bytes:
    enc = Encoder()
    msg.put(enc)
    body = enc.getvalue()
    frame = Encoder().u8(MAGIC).u8(VERSION).u8(msg.tag).u32(len(body)).raw(body).getvalue()
    if len(frame) > MAX_MESSAGE_BYTES:
        raise ValueError(f"message of {len(frame)} bytes exceeds {MAX_MESSAGE_BYTES}")
    return frame


def decode_sig_msg(data: bytes) -> SigMessage:
    if len(data) > MAX_MESSAGE_BYTES:
        raise FormatError(MAX_MESSAGE_BYTES, "message exceeds 64 KiB")
    d = Decoder(data)
    if d.u8() != MAGIC:
        raise FormatError(0, "bad magic")
    if d.u8() != VERSION:
        raise FormatError(1, "unsupported version")
    tag = d.u8()
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise FormatError(2, f"unknown message tag {tag}")
    length = d.u32()
    if length != d.remaining:
        raise FormatError(3, f"body length {length} but {d.remaining} bytes follow")
    return decode_exact(data[FRAME_HEADER:], cls.get, FRAME_HEADER)
