"""Domain types and their canonical binary serialization.

Every structure encodes its fields in declaration order: integers are
little-endian and fixed-width, byte strings and text carry a u32 length
prefix, lists carry a u32 element count. Decoding is strict: trailing bytes,
unknown enum values and out-of-range fields all raise :class:`FormatError`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional, Sequence, TypeVar

T = TypeVar("T")

MAX_PAYLOAD_BYTES = 1400
MIN_INTERVAL_LENGTH_MS = 100


class FormatError(ValueError):
    """Malformed binary input, located by absolute byte offset."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"{reason} at offset {offset}")
        self.offset = offset
        self.reason = reason


# ---------------------------------------------------------------------------
# Codec primitives
# ---------------------------------------------------------------------------

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class Encoder:
    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> "Encoder":
        self.buf += _U8.pack(v)
        return self

    def u16(self, v: int) -> "Encoder":
        self.buf += _U16.pack(v)
        return self

    def u32(self, v: int) -> "Encoder":
        self.buf += _U32.pack(v)
        return self

    def u64(self, v: int) -> "Encoder":
        self.buf += _U64.pack(v)
        return self

    def raw(self, b: bytes) -> "Encoder":
        self.buf += b
        return self

    def blob(self, b: bytes) -> "Encoder":
        self.u32(len(b))
        self.buf += b
        return self

    def text(self, s: str) -> "Encoder":
        return self.blob(s.encode("utf-8"))

    def seq(self, items: Sequence[T], put: Callable[["Encoder", T], object]) -> "Encoder":
        self.u32(len(items))
        for item in items:
            put(self, item)
        return self

    def getvalue(self) -> bytes:
        return bytes(self.buf)


class Decoder:
    """Cursor over a byte string; ``base`` is the absolute offset of ``data[0]``."""

    def __init__(self, data: bytes, base: int = 0):
        self.data = memoryview(data)
        self.pos = 0
        self.base = base

    @property
    def offset(self) -> int:
        return self.base + self.pos

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def fail(self, reason: str) -> FormatError:
        return FormatError(self.offset, reason)

    def _take(self, n: int, what: str) -> memoryview:
        if n > self.remaining:
            raise self.fail(f"truncated {what}: need {n} bytes, have {self.remaining}")
        view = self.data[self.pos:self.pos + n]
        self.pos += n
        return view

    def u8(self) -> int:
        return _U8.unpack(self._take(1, "u8"))[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2, "u16"))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4, "u32"))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8, "u64"))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n, "bytes"))

    def blob(self) -> bytes:
        n = self.u32()
        return bytes(self._take(n, "byte string"))

    def text(self) -> str:
        start = self.offset
        b = self.blob()
        try:
            return b.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(start, "invalid utf-8 text") from None

    def seq(self, get: Callable[["Decoder"], T], min_item_size: int = 1) -> list[T]:
        start = self.offset
        n = self.u32()
        if n * min_item_size > self.remaining:
            raise FormatError(start, f"list count {n} exceeds remaining input")
        return [get(self) for _ in range(n)]

    def enum(self, cls: type, width: int = 1):
        start = self.offset
        v = self.u8() if width == 1 else self.u16()
        try:
            return cls(v)
        except ValueError:
            raise FormatError(start, f"unknown {cls.__name__} value {v}") from None

    def flag(self) -> bool:
        start = self.offset
        v = self.u8()
        if v > 1:
            raise FormatError(start, f"invalid flag byte {v}")
        return bool(v)

    def expect_end(self) -> None:
        if self.remaining:
            raise self.fail(f"{self.remaining} trailing bytes")


def decode_exact(data: bytes, get: Callable[[Decoder], T], base: int = 0) -> T:
    """Decode one structure that must consume ``data`` completely."""
    d = Decoder(data, base)
    value = get(d)
    d.expect_end()
    return value


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------

class ChannelDirection(IntEnum):
    A_TO_B = 0
    B_TO_A = 1

    @property
    def other(self) -> "ChannelDirection":
        return ChannelDirection(1 - self.value)


class HashAlgorithm(IntEnum):
    SHA256 = 1


DIGEST_SIZES = {HashAlgorithm.SHA256: 32}


class SignatureAlgorithm(IntEnum):
    ED25519 = 1


class TerminationReason(IntEnum):
    NORMAL_HANGUP = 0
    QOS_UNDERRUN = 1
    POLICY_VIOLATION = 2
    CONNECTION_DROP = 3


class ViolationKind(IntEnum):
    """Every kind of finding a live machine or the verifier can raise."""

    QOS_UNDERRUN = 1
    DUPLICATE = 2
    TIMESTAMP_SKEW = 3
    BORDER_GAP = 4
    CHANNEL_DRIFT = 5
    NON_MONOTONIC_SEQ = 6
    COVERAGE_TOO_LOW = 7
    UNKNOWN_SEQ_REQUESTED = 8
    HASH_MISMATCH = 9
    CHAIN_MISMATCH = 10
    SIGNATURE_INVALID = 11
    UNEXPECTED_ACK = 12
    UNTRUSTED_CERTIFICATE = 13
    MALFORMED_MESSAGE = 14


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Digest:
    algorithm: HashAlgorithm
    value: bytes

    def __post_init__(self) -> None:
        size = DIGEST_SIZES[self.algorithm]
        if len(self.value) != size:
            raise ValueError(f"{self.algorithm.name} digest must be {size} bytes")

    def put(self, enc: Encoder) -> None:
        enc.u8(self.algorithm).raw(self.value)

    @classmethod
    def get(cls, dec: Decoder) -> "Digest":
        alg = dec.enum(HashAlgorithm)
        return cls(alg, dec.raw(DIGEST_SIZES[alg]))

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class MediaPacket:
    ssrc: int
    seq: int
    rtp_timestamp: int
    payload_type: int
    capture_wallclock: int
    payload: bytes

    def __post_init__(self) -> None:
        if not 1 <= len(self.payload) <= MAX_PAYLOAD_BYTES:
            raise ValueError(f"payload must be 1..{MAX_PAYLOAD_BYTES} bytes, got {len(self.payload)}")
        if not 0 <= self.payload_type < 128:
            raise ValueError("payload_type is a 7-bit field")
        if not (0 <= self.ssrc < 2**32 and 0 <= self.rtp_timestamp < 2**32):
            raise ValueError("ssrc and rtp_timestamp are 32-bit fields")

    def put(self, enc: Encoder) -> None:
        enc.u32(self.ssrc).u64(self.seq).u32(self.rtp_timestamp).u8(self.payload_type)
        enc.u64(self.capture_wallclock).blob(self.payload)

    @classmethod
    def get(cls, dec: Decoder) -> "MediaPacket":
        start = dec.offset
        ssrc, seq, ts, pt, wall = dec.u32(), dec.u64(), dec.u32(), dec.u8(), dec.u64()
        payload = dec.blob()
        try:
            return cls(ssrc, seq, ts, pt, wall, payload)
        except ValueError as exc:
            raise FormatError(start, f"invalid media packet: {exc}") from None

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "MediaPacket":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class IntervalPayload:
    interval_index: int
    channel: ChannelDirection
    start_wallclock: int
    end_wallclock: int
    prev_link: Digest
    packet_seqs: tuple[int, ...] = ()
    packet_hashes: tuple[Digest, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "packet_seqs", tuple(self.packet_seqs))
        object.__setattr__(self, "packet_hashes", tuple(self.packet_hashes))
        if len(self.packet_seqs) != len(self.packet_hashes):
            raise ValueError("packet_seqs and packet_hashes differ in length")
        if any(b <= a for a, b in zip(self.packet_seqs, self.packet_seqs[1:])):
            raise ValueError("packet_seqs must be strictly increasing")
        if self.start_wallclock > self.end_wallclock:
            raise ValueError("interval ends before it starts")

    def put(self, enc: Encoder) -> None:
        enc.u64(self.interval_index).u8(self.channel)
        enc.u64(self.start_wallclock).u64(self.end_wallclock)
        self.prev_link.put(enc)
        enc.seq(self.packet_seqs, Encoder.u64)
        enc.seq(self.packet_hashes, lambda e, h: h.put(e))

    @classmethod
    def get(cls, dec: Decoder) -> "IntervalPayload":
        start = dec.offset
        index = dec.u64()
        channel = dec.enum(ChannelDirection)
        t0, t1 = dec.u64(), dec.u64()
        prev = Digest.get(dec)
        seqs = dec.seq(Decoder.u64, 8)
        hashes = dec.seq(Digest.get, 33)
        try:
            return cls(index, channel, t0, t1, prev, tuple(seqs), tuple(hashes))
        except ValueError as exc:
            raise FormatError(start, f"invalid interval payload: {exc}") from None

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "IntervalPayload":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class Certificate:
    subject_uri: str
    issuer_uri: str
    key_algorithm: SignatureAlgorithm
    public_key: bytes
    not_before: int
    not_after: int
    issuer_signature: bytes = b""

    def put_body(self, enc: Encoder) -> None:
        enc.text(self.subject_uri).text(self.issuer_uri).u8(self.key_algorithm)
        enc.blob(self.public_key).u64(self.not_before).u64(self.not_after)

    def body(self) -> bytes:
        enc = Encoder()
        self.put_body(enc)
        return enc.getvalue()

    def put(self, enc: Encoder) -> None:
        self.put_body(enc)
        enc.blob(self.issuer_signature)

    @classmethod
    def get(cls, dec: Decoder) -> "Certificate":
        subject, issuer = dec.text(), dec.text()
        alg = dec.enum(SignatureAlgorithm)
        key = dec.blob()
        nb, na = dec.u64(), dec.u64()
        return cls(subject, issuer, alg, key, nb, na, dec.blob())

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "Certificate":
        return decode_exact(data, cls.get, base)


ENVELOPE_VERSION = 1


@dataclass(frozen=True)
class SignedEnvelope:
    payload_bytes: bytes
    signature: bytes
    cert_chain: Optional[tuple[Certificate, ...]] = None
    signature_algorithm: SignatureAlgorithm = SignatureAlgorithm.ED25519

    def put(self, enc: Encoder) -> None:
        enc.u8(ENVELOPE_VERSION).u8(self.signature_algorithm)
        enc.blob(self.payload_bytes).blob(self.signature)
        if self.cert_chain is None:
            enc.u8(0)
        else:
            enc.u8(1).seq(self.cert_chain, lambda e, c: c.put(e))

    @classmethod
    def get(cls, dec: Decoder) -> "SignedEnvelope":
        start = dec.offset
        version = dec.u8()
        if version != ENVELOPE_VERSION:
            raise FormatError(start, f"unsupported envelope version {version}")
        alg = dec.enum(SignatureAlgorithm)
        payload, sig = dec.blob(), dec.blob()
        chain = tuple(dec.seq(Certificate.get, 38)) if dec.flag() else None
        return cls(payload, sig, chain, alg)

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "SignedEnvelope":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class SealedInterval:
    """A signed interval. Serialized as its envelope alone; the payload is
    recovered by decoding ``envelope.payload_bytes``."""

    payload: IntervalPayload
    envelope: SignedEnvelope

    def __post_init__(self) -> None:
        if self.envelope.payload_bytes != self.payload.encode():
            raise ValueError("envelope does not enclose this payload")

    def put(self, enc: Encoder) -> None:
        self.envelope.put(enc)

    @classmethod
    def get(cls, dec: Decoder) -> "SealedInterval":
        start = dec.offset
        env = SignedEnvelope.get(dec)
        # payload_bytes begins after version, alg and the u32 length prefix
        payload = IntervalPayload.decode(env.payload_bytes, start + 6)
        try:
            return cls(payload, env)
        except ValueError as exc:
            raise FormatError(start, f"non-canonical interval payload: {exc}") from None

    def encode(self) -> bytes:
        return self.envelope.encode()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "SealedInterval":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class CallHeader:
    caller_uri: str
    callee_uri: str
    call_start_wallclock: int
    codec_map: tuple[tuple[int, str], ...] = ((0, "PCMU/8000"),)
    interval_length_ms: int = 1000
    protocol_version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "codec_map", tuple(tuple(c) for c in self.codec_map))
        if not self.caller_uri or not self.callee_uri:
            raise ValueError("caller and callee URIs must be non-empty")
        if self.interval_length_ms < MIN_INTERVAL_LENGTH_MS:
            raise ValueError(f"interval_length_ms must be >= {MIN_INTERVAL_LENGTH_MS}")

    def put(self, enc: Encoder) -> None:
        enc.text(self.caller_uri).text(self.callee_uri).u64(self.call_start_wallclock)
        enc.seq(self.codec_map, lambda e, c: e.u8(c[0]).text(c[1]))
        enc.u32(self.interval_length_ms).u16(self.protocol_version)

    @classmethod
    def get(cls, dec: Decoder) -> "CallHeader":
        start = dec.offset
        caller, callee, t0 = dec.text(), dec.text(), dec.u64()
        codecs = dec.seq(lambda d: (d.u8(), d.text()), 5)
        length, version = dec.u32(), dec.u16()
        try:
            return cls(caller, callee, t0, tuple(codecs), length, version)
        except ValueError as exc:
            raise FormatError(start, f"invalid call header: {exc}") from None

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "CallHeader":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class CallTrailer:
    end_wallclock: int
    reason: TerminationReason
    violation: Optional[ViolationKind] = None
    signed: bool = False

    def __post_init__(self) -> None:
        if (self.reason == TerminationReason.POLICY_VIOLATION) != (self.violation is not None):
            raise ValueError("a violation kind is carried exactly by PolicyViolation trailers")

    def put(self, enc: Encoder) -> None:
        enc.u64(self.end_wallclock).u8(self.reason)
        enc.u8(0 if self.violation is None else self.violation).u8(int(self.signed))

    @classmethod
    def get(cls, dec: Decoder) -> "CallTrailer":
        start = dec.offset
        end = dec.u64()
        reason = dec.enum(TerminationReason)
        code_at = dec.offset
        code = dec.u8()
        violation = None
        if code:
            try:
                violation = ViolationKind(code)
            except ValueError:
                raise FormatError(code_at, f"unknown violation code {code}") from None
        signed = dec.flag()
        try:
            return cls(end, reason, violation, signed)
        except ValueError as exc:
            raise FormatError(start, f"invalid trailer: {exc}") from None

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "CallTrailer":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class TrailerSeal:
    """What A signs when closing a call: the trailer plus the chain head it
    closes, so a signed trailer cannot be moved onto a shortened archive."""

    trailer: CallTrailer
    interval_count: int
    final_link: Digest

    def put(self, enc: Encoder) -> None:
        self.trailer.put(enc)
        enc.u64(self.interval_count)
        self.final_link.put(enc)

    @classmethod
    def get(cls, dec: Decoder) -> "TrailerSeal":
        return cls(CallTrailer.get(dec), dec.u64(), Digest.get(dec))

    def encode(self) -> bytes:
        enc = Encoder()
        self.put(enc)
        return enc.getvalue()

    @classmethod
    def decode(cls, data: bytes, base: int = 0) -> "TrailerSeal":
        return decode_exact(data, cls.get, base)


@dataclass(frozen=True)
class Violation:
    """A localized policy or protocol finding."""

    kind: ViolationKind
    detail: str = ""
    interval_index: Optional[int] = None
    seq: Optional[int] = None
    value: Optional[float] = None
    channel: Optional[ChannelDirection] = None
