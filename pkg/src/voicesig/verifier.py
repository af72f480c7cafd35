"""Offline forensic verification of a conversation archive.

The verifier re-derives everything from the file and the trust anchor: the
signer's certificate chain, each interval signature, the stored packets
against the signed hashes, the hash chain and interval numbering, and the
same sequence-number and QoS policy the live parties enforce.  Every finding
is tied to a chunk (header, an interval, or the trailer) and a byte offset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .archive import ConversationArchive, IntervalChunk, read_archive
from .chain import packet_digest
from .core import (
    CallHeader,
    Certificate,
    ChannelDirection,
    Digest,
    FormatError,
    TerminationReason,
    TrailerSeal,
)
from .crypto import TrustAnchor, VerifyResult, check_signature, digest, verify_envelope
from .policy import PolicyConfig, QosMonitor, SeqTracker


class Verdict(Enum):
    VALID = "Valid"
    VALID_TRUNCATED_TAIL = "ValidTruncatedTail"
    INVALID = "Invalid"

    @property
    def exit_code(self) -> int:
        return {Verdict.VALID: 0, Verdict.VALID_TRUNCATED_TAIL: 3, Verdict.INVALID: 4}[self]


class Severity(Enum):
    ERROR = "error"
    WARNING = "warning"


# Every check the verifier runs, in report order.
CHECKS = (
    "format", "certificate", "header", "signature", "index", "chain", "seqs", "hash",
    "timestamp", "window", "monotonic", "border", "qos", "drift", "trailer", "termination",
    "truncated",
)


@dataclass(frozen=True)
class Finding:
    """One verification result.

    ``location`` is ``"header"``, ``"interval"``, ``"trailer"`` or ``"file"``;
    for intervals ``position`` is the chunk's place among interval chunks and
    ``interval_index`` the index it claims (when it could be decoded).
    """

    check: str
    severity: Severity
    location: str
    detail: str
    offset: Optional[int] = None
    position: Optional[int] = None
    interval_index: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "severity": self.severity.value,
            "location": self.location,
            "position": self.position,
            "interval_index": self.interval_index,
            "offset": self.offset,
            "detail": self.detail,
        }


@dataclass
class VerificationReport:
    verdict: Verdict
    findings: list[Finding] = field(default_factory=list)
    header: Optional[CallHeader] = None
    signer_uri: Optional[str] = None
    interval_count: int = 0
    trailer_reason: Optional[TerminationReason] = None

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.ERROR]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.WARNING]

    @property
    def checks(self) -> dict[str, str]:
        """``pass``, ``warn`` or ``fail`` for each check."""
        out = {name: "pass" for name in CHECKS}
        for f in self.findings:
            if f.severity is Severity.ERROR:
                out[f.check] = "fail"
            elif out[f.check] == "pass":
                out[f.check] = "warn"
        return out

    def error_positions(self) -> set:
        """Chunks with at least one error: ``"header"``, ``"trailer"`` or an interval position."""
        return {f.position if f.location == "interval" else f.location for f in self.errors}

    @property
    def exit_code(self) -> int:
        return self.verdict.exit_code


class _Run:
    def __init__(self, archive: ConversationArchive, anchor: TrustAnchor,
                 expected_signer_uri: Optional[str], config: PolicyConfig):
        self.archive = archive
        self.anchor = anchor
        self.expected_uri = expected_signer_uri
        self.config = config
        self.findings: list[Finding] = []
        self.leaf: Optional[Certificate] = None
        self.link: Optional[Digest] = None
        self.expected_index = 0
        self.trackers = {c: SeqTracker(config) for c in ChannelDirection}
        self.qos = {c: QosMonitor(config) for c in ChannelDirection}
        self.starts: dict[ChannelDirection, list[int]] = {c: [] for c in ChannelDirection}
        self.last_end: dict[ChannelDirection, Optional[int]] = {c: None for c in ChannelDirection}
        self.max_end: Optional[int] = None

    def add(self, check: str, detail: str, location: str, severity: Severity = Severity.ERROR, **kw) -> None:
        self.findings.append(Finding(check, severity, location, detail, **kw))

    # -- start chunk -------------------------------------------------------

    def header(self) -> Optional[CallHeader]:
        a = self.archive
        if a.header_offset is None:
            self.add("format", "archive holds no start chunk", "file", offset=a.truncated_at or 0)
            return None
        if a.header_error is not None:
            self.add("format", a.header_error.reason, "header", offset=a.header_error.offset)
            return None
        header, env = a.header, a.header_envelope
        where = dict(offset=a.header_offset)
        if not env.cert_chain:
            self.add("certificate", "start envelope carries no certificate chain", "header", **where)
            return header
        self.leaf = env.cert_chain[0]
        try:
            signed_header = CallHeader.decode(env.payload_bytes)
        except FormatError as exc:
            self.add("header", f"signed header does not decode: {exc.reason}", "header", **where)
            signed_header = None
        if signed_header is not None and signed_header != header:
            self.add("header", "stored header differs from the signed header", "header", **where)
        expected = self.expected_uri or header.caller_uri
        result = verify_envelope(self.anchor, self.leaf, env, expected, header.call_start_wallclock)
        if result is VerifyResult.BAD_SIGNATURE:
            self.add("signature", "start envelope signature does not verify", "header", **where)
        elif result is not VerifyResult.VALID:
            self.add("certificate", f"signer certificate: {result.value} (expected {expected})", "header", **where)
        self.link = digest(a.header_raw)
        return header

    # -- interval chunks ---------------------------------------------------

    def interval(self, chunk: IntervalChunk, header: Optional[CallHeader]) -> None:
        pos = chunk.position
        if chunk.error is not None:
            self.add("format", chunk.error.reason, "interval", offset=chunk.error.offset,
                     position=pos, interval_index=self.expected_index)
            self.expected_index += 1
            self.link = None  # the chain cannot be followed through an undecodable chunk
            # nor can sequence continuity: its channel and seqs are unknown
            self.trackers = {c: SeqTracker(self.config) for c in ChannelDirection}
            return
        sealed = chunk.sealed
        payload = sealed.payload
        idx, ch = payload.interval_index, payload.channel
        env_offset = chunk.payload_offset + len(chunk.raw) - len(sealed.encode())
        where = dict(position=pos, interval_index=idx)

        if self.leaf is None:
            self.add("signature", "no signer certificate to check against", "interval",
                     offset=env_offset, **where)
        elif sealed.envelope.cert_chain is not None:
            self.add("signature", "interval envelope unexpectedly carries a chain", "interval",
                     offset=env_offset, **where)
        elif not check_signature(self.leaf, sealed.envelope):
            self.add("signature", "interval signature does not verify", "interval", offset=env_offset, **where)
        if idx != self.expected_index:
            self.add("index", f"interval index {idx}, expected {self.expected_index}", "interval",
                     offset=env_offset, **where)
        if self.link is not None and payload.prev_link != self.link:
            self.add("chain", "link to the previous sealed interval is broken", "interval",
                     offset=env_offset, **where)

        stored = tuple(p.seq for p in chunk.packets)
        if stored != payload.packet_seqs:
            missing = sorted(set(payload.packet_seqs) - set(stored))
            extra = sorted(set(stored) - set(payload.packet_seqs))
            self.add("seqs", f"stored packets differ from signed seqs (missing {missing[:5]}, "
                     f"unsigned {extra[:5]})", "interval", offset=chunk.payload_offset, **where)
        else:
            pkt_offset = chunk.payload_offset + 4
            for p, h in zip(chunk.packets, payload.packet_hashes):
                if packet_digest(p) != h:
                    self.add("hash", f"packet seq {p.seq} does not match its signed hash", "interval",
                             offset=pkt_offset, **where)
                pkt_offset += 4 + len(p.encode())

        self.timing(chunk, header)
        obs = self.trackers[ch].observe(payload.packet_seqs)
        if obs.violation is not None:
            check = "monotonic" if obs.violation.kind.name == "NON_MONOTONIC_SEQ" else "border"
            self.add(check, obs.violation.detail, "interval", offset=env_offset, **where)
        v = self.qos[ch].record(obs.expected, obs.received)
        if v is not None:
            self.add("qos", f"{ch.name}: {v.detail}", "interval", offset=env_offset, **where)

        starts = self.starts[ch]
        starts.append(payload.start_wallclock)
        other = self.starts[ch.other]
        k = len(starts) - 1
        if header is not None and k < len(other):
            drift = abs(starts[k] - other[k])
            if drift > self.config.drift_limit(header.interval_length_ms):
                self.add("drift", f"channel starts differ by {drift} ms", "interval", offset=env_offset, **where)

        self.link = digest(sealed.envelope.encode())
        self.expected_index += 1

    def timing(self, chunk: IntervalChunk, header: Optional[CallHeader]) -> None:
        payload = chunk.sealed.payload
        ch = payload.channel
        where = dict(position=chunk.position, interval_index=payload.interval_index, offset=chunk.payload_offset)
        skew = self.config.clock_skew_limit_ms
        start, end = payload.start_wallclock, payload.end_wallclock
        if end < start:
            self.add("window", f"interval ends ({end}) before it starts ({start})", "interval", **where)
        if header is not None and start < header.call_start_wallclock - skew:
            self.add("window", "interval starts before the call", "interval", **where)
        last = self.last_end[ch]
        if last is not None and start < last:
            self.add("window", f"{ch.name} window overlaps the previous one by {last - start} ms", "interval", **where)
        self.last_end[ch] = end
        self.max_end = end if self.max_end is None else max(self.max_end, end)
        for p in chunk.packets:
            if not start - skew <= p.capture_wallclock <= end + skew:
                self.add("timestamp", f"packet seq {p.seq} captured at {p.capture_wallclock}, "
                         f"outside [{start}, {end}] +/- {skew} ms", "interval", **where)
                break

    # -- end chunk ---------------------------------------------------------

    def trailer(self) -> None:
        a = self.archive
        if a.truncated:
            if a.trailer_offset is not None:
                self.add("format", "bytes after the end chunk", "file", offset=a.truncated_at)
            else:
                self.add("truncated", f"file ends inside a chunk at byte {a.truncated_at}", "file",
                         Severity.WARNING, offset=a.truncated_at)
        if a.trailer_offset is None:
            if a.header_offset is not None:
                self.add("trailer", "no end chunk: the call's tail is unsealed", "trailer", Severity.WARNING,
                         offset=a.truncated_at if a.truncated else None)
            return
        where = dict(offset=a.trailer_offset)
        if a.trailer_error is not None:
            self.add("format", a.trailer_error.reason, "trailer", offset=a.trailer_error.offset)
            return
        t, env = a.trailer, a.trailer_envelope
        if t.signed != (env is not None):
            self.add("trailer", "signed flag does not match the presence of a signature", "trailer", **where)
        if env is not None:
            self.sealed_trailer(t, env, where)
        elif t.reason in (TerminationReason.NORMAL_HANGUP, TerminationReason.CONNECTION_DROP):
            self.add("trailer", f"unsigned {t.reason.name} trailer: end of call not confirmed by the signer",
                     "trailer", Severity.WARNING, **where)
        if t.reason in (TerminationReason.QOS_UNDERRUN, TerminationReason.POLICY_VIOLATION):
            what = t.reason.name if t.violation is None else f"{t.reason.name} ({t.violation.name})"
            self.add("termination", f"call was terminated by policy: {what}", "trailer", **where)
        if self.max_end is not None and t.end_wallclock < self.max_end - self.config.clock_skew_limit_ms:
            self.add("timestamp", "call end precedes the last interval", "trailer", **where)

    def sealed_trailer(self, t, env, where) -> None:
        try:
            seal = TrailerSeal.decode(env.payload_bytes)
        except FormatError as exc:
            self.add("trailer", f"signed trailer does not decode: {exc.reason}", "trailer", **where)
            return
        if self.leaf is None or not check_signature(self.leaf, env):
            self.add("signature", "end-of-call signature does not verify", "trailer", **where)
        if seal.trailer != t:
            self.add("trailer", "stored trailer differs from the signed trailer", "trailer", **where)
        count = len(self.archive.intervals)
        if seal.interval_count != count:
            self.add("chain", f"signer sealed {seal.interval_count} intervals, archive holds {count}",
                     "trailer", **where)
        elif self.link is not None and seal.final_link != self.link:
            self.add("chain", "signed trailer does not seal the archived chain head", "trailer", **where)

    def run(self) -> VerificationReport:
        header = self.header()
        for chunk in self.archive.intervals:
            self.interval(chunk, header)
        self.trailer()
        if any(f.severity is Severity.ERROR for f in self.findings):
            verdict = Verdict.INVALID
        elif self.findings:
            verdict = Verdict.VALID_TRUNCATED_TAIL
        else:
            verdict = Verdict.VALID
        return VerificationReport(
            verdict=verdict,
            findings=self.findings,
            header=header,
            signer_uri=None if self.leaf is None else self.leaf.subject_uri,
            interval_count=len(self.archive.intervals),
            trailer_reason=None if self.archive.trailer is None else self.archive.trailer.reason,
        )


def verify_archive(
    archive: Union[ConversationArchive, bytes],
    anchor: TrustAnchor,
    expected_signer_uri: Optional[str] = None,
    config: PolicyConfig = PolicyConfig(),
) -> VerificationReport:
    """Verify an archive (parsed, or raw bytes).

    Raw bytes whose framing cannot be parsed raise :class:`FormatError`;
    damage inside a chunk becomes a localized ``format`` finding instead.
    """
    if not isinstance(archive, ConversationArchive):
        archive = read_archive(archive, strict=False)
    return _Run(archive, anchor, expected_signer_uri, config).run()


def render_report(report: VerificationReport, fmt: str = "human") -> str:
    if fmt == "json-lines":
        lines = [json.dumps({"finding": f.to_dict()}, sort_keys=True) for f in report.findings]
        lines.append(json.dumps({"summary": {
            "verdict": report.verdict.value,
            "exit_code": report.exit_code,
            "signer": report.signer_uri,
            "intervals": report.interval_count,
            "errors": len(report.errors),
            "warnings": len(report.warnings),
            "checks": report.checks,
        }}, sort_keys=True))
        return "\n".join(lines) + "\n"
    if fmt != "human":
        raise ValueError(f"unknown report format {fmt!r}")
    out = [f"verdict: {report.verdict.value}"]
    if report.header is not None:
        h = report.header
        out.append(f"call: {h.caller_uri} -> {h.callee_uri}, start {h.call_start_wallclock} ms, "
                   f"{h.interval_length_ms} ms intervals")
    out.append(f"signer: {report.signer_uri or 'unknown'}")
    out.append(f"intervals: {report.interval_count}")
    if report.trailer_reason is not None:
        out.append(f"end: {report.trailer_reason.name}")
    failed = [k for k, v in report.checks.items() if v != "pass"]
    out.append("checks: " + ("all passed" if not failed else ", ".join(f"{k}={report.checks[k]}" for k in failed)))
    for f in report.findings:
        loc = f.location if f.location != "interval" else f"interval #{f.position} (index {f.interval_index})"
        at = "" if f.offset is None else f" @ byte {f.offset}"
        out.append(f"  {f.severity.value}: [{f.check}] {loc}{at}: {f.detail}")
    return "\n".join(out) + "\n"
