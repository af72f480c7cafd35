"""The ``.vsc`` conversation archive: a start chunk, interval chunks, an end chunk.

Layout::

    "VSIG" | version u16 | chunk*
    chunk   = type u8 | length u32 | payload
    start   = CallHeader | SignedEnvelope (with certificate chain)
    interval= count u32 | (u32-prefixed MediaPacket)* | SealedInterval
    end     = CallTrailer | has_envelope u8 | [SignedEnvelope over TrailerSeal]

The writer streams: nothing but the current chunk is held in memory.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Iterable, Optional, Sequence, Union

from .core import (
    CallHeader,
    CallTrailer,
    Decoder,
    Encoder,
    FormatError,
    MediaPacket,
    SealedInterval,
    SignedEnvelope,
    TrailerSeal,
    decode_exact,
)

MAGIC = b"VSIG"
FORMAT_VERSION = 1
PREAMBLE_SIZE = 6
CHUNK_HEADER_SIZE = 5


class ChunkType(IntEnum):
    START = 1
    INTERVAL = 2
    END = 3


class ArchiveError(Exception):
    pass


class WriterContractError(ArchiveError):
    pass


class SeqMismatch(WriterContractError):
    pass


class WriterClosed(ArchiveError):
    pass


@dataclass(frozen=True)
class ChunkRecord:
    chunk_type: ChunkType
    payload: bytes

    def encode(self) -> bytes:
        return Encoder().u8(self.chunk_type).u32(len(self.payload)).raw(self.payload).getvalue()


def start_payload(header: CallHeader, envelope: SignedEnvelope) -> bytes:
    return header.encode() + envelope.encode()


def interval_payload(packets: Sequence[MediaPacket], sealed: SealedInterval) -> bytes:
    enc = Encoder().u32(len(packets))
    for p in packets:
        enc.blob(p.encode())
    sealed.put(enc)
    return enc.getvalue()


def end_payload(trailer: CallTrailer, envelope: Optional[SignedEnvelope]) -> bytes:
    enc = Encoder()
    trailer.put(enc)
    if envelope is None:
        enc.u8(0)
    else:
        enc.u8(1)
        envelope.put(enc)
    return enc.getvalue()


def check_interval_packets(packets: Iterable[MediaPacket], sealed: SealedInterval) -> list[MediaPacket]:
    """Order ``packets`` by seq; they must be exactly the signed set."""
    ordered = sorted(packets, key=lambda p: p.seq)
    if tuple(p.seq for p in ordered) != sealed.payload.packet_seqs:
        raise SeqMismatch(
            f"interval {sealed.payload.interval_index}: stored seqs differ from signed seqs"
        )
    return ordered


class ArchiveWriter:
    def __init__(self, sink: BinaryIO, header: CallHeader, header_envelope: SignedEnvelope):
        if not header_envelope.cert_chain:
            raise WriterContractError("the start-chunk envelope must carry the certificate chain")
        if header_envelope.payload_bytes != header.encode():
            raise WriterContractError("header envelope does not enclose the call header")
        self.sink = sink
        self.closed = False
        self.intervals_written = 0
        self.start_chunk = start_payload(header, header_envelope)
        self._write(Encoder().raw(MAGIC).u16(FORMAT_VERSION).getvalue())
        self._chunk(ChunkType.START, self.start_chunk)

    def _write(self, data: bytes) -> None:
        self.sink.write(data)
        flush = getattr(self.sink, "flush", None)
        if flush is not None:
            flush()

    def _chunk(self, chunk_type: ChunkType, payload: bytes) -> ChunkRecord:
        record = ChunkRecord(chunk_type, payload)
        self._write(record.encode())
        return record

    def append_interval(self, packets: Iterable[MediaPacket], sealed: SealedInterval) -> ChunkRecord:
        if self.closed:
            raise WriterClosed("archive already closed")
        if sealed.envelope.cert_chain is not None:
            raise WriterContractError("only the start-chunk envelope carries certificates")
        ordered = check_interval_packets(packets, sealed)
        self.intervals_written += 1
        return self._chunk(ChunkType.INTERVAL, interval_payload(ordered, sealed))

    def close(self, trailer: CallTrailer, envelope: Optional[SignedEnvelope] = None) -> ChunkRecord:
        if self.closed:
            raise WriterClosed("archive already closed")
        if trailer.signed != (envelope is not None):
            raise WriterContractError("trailer.signed must match envelope presence")
        self.closed = True
        return self._chunk(ChunkType.END, end_payload(trailer, envelope))


def open_writer(sink: BinaryIO, header: CallHeader, header_envelope: SignedEnvelope) -> ArchiveWriter:
    return ArchiveWriter(sink, header, header_envelope)


# ---------------------------------------------------------------------------
# Reader
# ---------------------------------------------------------------------------

@dataclass
class IntervalChunk:
    position: int
    offset: int  # of the chunk header
    raw: bytes  # chunk payload
    packets: list[MediaPacket] = field(default_factory=list)
    sealed: Optional[SealedInterval] = None
    error: Optional[FormatError] = None

    @property
    def payload_offset(self) -> int:
        return self.offset + CHUNK_HEADER_SIZE


@dataclass
class ConversationArchive:
    version: int = FORMAT_VERSION
    header: Optional[CallHeader] = None
    header_envelope: Optional[SignedEnvelope] = None
    header_raw: bytes = b""
    header_offset: Optional[int] = None
    header_error: Optional[FormatError] = None
    intervals: list[IntervalChunk] = field(default_factory=list)
    trailer: Optional[CallTrailer] = None
    trailer_envelope: Optional[SignedEnvelope] = None
    trailer_offset: Optional[int] = None
    trailer_raw: bytes = b""
    trailer_error: Optional[FormatError] = None
    truncated: bool = False
    truncated_at: Optional[int] = None

    @property
    def sealed_intervals(self) -> list[SealedInterval]:
        return [c.sealed for c in self.intervals if c.sealed is not None]

    def errors(self) -> list[FormatError]:
        errs = [self.header_error, self.trailer_error] + [c.error for c in self.intervals]
        return [e for e in errs if e is not None]

    def to_bytes(self) -> bytes:
        """Re-encode from the raw chunk payloads (lossless for parsed input)."""
        out = Encoder().raw(MAGIC).u16(self.version)
        if self.header_offset is not None:
            out.raw(ChunkRecord(ChunkType.START, self.header_raw).encode())
        for c in self.intervals:
            out.raw(ChunkRecord(ChunkType.INTERVAL, c.raw).encode())
        if self.trailer_offset is not None:
            out.raw(ChunkRecord(ChunkType.END, self.trailer_raw).encode())
        return out.getvalue()


def _decode_start(raw: bytes, base: int) -> tuple[CallHeader, SignedEnvelope]:
    d = Decoder(raw, base)
    header = CallHeader.get(d)
    env = SignedEnvelope.get(d)
    d.expect_end()
    return header, env


def _packet_record(d: Decoder) -> MediaPacket:
    base = d.offset + 4
    return decode_exact(d.blob(), MediaPacket.get, base)


def _decode_interval(raw: bytes, base: int) -> tuple[list[MediaPacket], SealedInterval]:
    d = Decoder(raw, base)
    packets = d.seq(_packet_record, 4)
    sealed = SealedInterval.get(d)
    d.expect_end()
    return packets, sealed


def _decode_end(raw: bytes, base: int) -> tuple[CallTrailer, Optional[SignedEnvelope]]:
    d = Decoder(raw, base)
    trailer = CallTrailer.get(d)
    env = SignedEnvelope.get(d) if d.flag() else None
    d.expect_end()
    return trailer, env


def decode_trailer_seal(env: SignedEnvelope) -> TrailerSeal:
    return TrailerSeal.decode(env.payload_bytes)


Source = Union[bytes, bytearray, memoryview, BinaryIO, str]


def _read_all(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, str):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def read_archive(source: Source, strict: bool = True) -> ConversationArchive:
    """Parse an archive.

    Framing problems (magic, version, chunk types and order) always raise
    :class:`FormatError`. A file that ends inside a chunk yields the complete
    prefix with ``truncated`` set. Undecodable chunk contents raise in strict
    mode; otherwise they are attached to the chunk as ``error`` so a verifier
    can localize them.
    """
    data = _read_all(source)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(0, "bad magic, not a VSIG archive")
    if len(data) < PREAMBLE_SIZE:
        return ConversationArchive(truncated=True, truncated_at=len(data))
    version = int.from_bytes(data[4:6], "little")
    if version != FORMAT_VERSION:
        raise FormatError(4, f"unsupported archive version {version}")
    arch = ConversationArchive(version=version)
    pos = PREAMBLE_SIZE
    while pos < len(data):
        if len(data) - pos < CHUNK_HEADER_SIZE:
            arch.truncated, arch.truncated_at = True, pos
            break
        ctype = data[pos]
        length = int.from_bytes(data[pos + 1:pos + 5], "little")
        try:
            kind = ChunkType(ctype)
        except ValueError:
            raise FormatError(pos, f"unknown chunk type {ctype}") from None
        if arch.trailer_offset is not None:
            raise FormatError(pos, "chunk after end chunk")
        if (kind == ChunkType.START) != (arch.header_offset is None):
            raise FormatError(pos, "start chunk must come first, exactly once")
        body = pos + CHUNK_HEADER_SIZE
        if body + length > len(data):
            arch.truncated, arch.truncated_at = True, pos
            break
        raw = data[body:body + length]
        err: Optional[FormatError] = None
        if kind == ChunkType.START:
            arch.header_offset, arch.header_raw = pos, raw
            try:
                arch.header, arch.header_envelope = _decode_start(raw, body)
            except FormatError as exc:
                err = arch.header_error = exc
        elif kind == ChunkType.INTERVAL:
            chunk = IntervalChunk(len(arch.intervals), pos, raw)
            try:
                chunk.packets, chunk.sealed = _decode_interval(raw, body)
            except FormatError as exc:
                err = chunk.error = exc
            arch.intervals.append(chunk)
        else:
            arch.trailer_offset, arch.trailer_raw = pos, raw
            try:
                arch.trailer, arch.trailer_envelope = _decode_end(raw, body)
            except FormatError as exc:
                err = arch.trailer_error = exc
        if err is not None and strict:
            raise err
        pos = body + length
    return arch


def chunk_spans(data: bytes) -> list[tuple[ChunkType, int, int]]:
    """``(type, payload_start, payload_end)`` for each complete chunk."""
    spans = []
    pos = PREAMBLE_SIZE
    while pos + CHUNK_HEADER_SIZE <= len(data):
        ctype = ChunkType(data[pos])
        length = int.from_bytes(data[pos + 1:pos + 5], "little")
        body = pos + CHUNK_HEADER_SIZE
        if body + length > len(data):
            break
        spans.append((ctype, body, body + length))
        pos = body + length
    return spans


def write_archive(
    header: CallHeader,
    header_envelope: SignedEnvelope,
    intervals: Iterable[tuple[Sequence[MediaPacket], SealedInterval]],
    trailer: Optional[CallTrailer] = None,
    trailer_envelope: Optional[SignedEnvelope] = None,
) -> bytes:
    sink = io.BytesIO()
    writer = ArchiveWriter(sink, header, header_envelope)
    for packets, sealed in intervals:
        writer.append_interval(packets, sealed)
    if trailer is not None:
        writer.close(trailer, trailer_envelope)
    return sink.getvalue()
