import json

import pytest

from support import GOLDEN_SCENARIO, golden_anchor, golden_bytes
from voicesig.archive import chunk_spans, interval_payload, read_archive, start_payload, write_archive
from voicesig.chain import ChainState, build_interval, seal_interval
from voicesig.core import (
    CallTrailer,
    ChannelDirection,
    FormatError,
    MediaPacket,
    TerminationReason,
    TrailerSeal,
    ViolationKind,
)
from voicesig.crypto import SigningKey, TrustAnchor, make_root, sign
from voicesig.simnet import make_pki, scenario_header
from voicesig.verifier import CHECKS, Severity, Verdict, render_report, verify_archive

A_TO_B, B_TO_A = ChannelDirection.A_TO_B, ChannelDirection.B_TO_A
PKI = make_pki(GOLDEN_SCENARIO)
HEADER = scenario_header(GOLDEN_SCENARIO)
T0 = HEADER.call_start_wallclock
ANCHOR = TrustAnchor([PKI.root_cert])


def verify(data, **kw):
    return verify_archive(data, ANCHOR, **kw)


def failing(report):
    return {f.check for f in report.errors}


def packets(seqs, t):
    return [MediaPacket(9, s, s * 160, 0, t + 10 * k, b"\x01\x02") for k, s in enumerate(seqs)]


def plan(n=6):
    """Alternating one-second intervals, five packets each, no loss."""
    out = []
    for i in range(n):
        ch = B_TO_A if i % 2 == 0 else A_TO_B
        k = i // 2
        start = T0 + 1000 * k
        out.append([ch, list(range(5 * k, 5 * k + 5)), (start, start + 1000)])
    return out


def forge(intervals, reason=TerminationReason.NORMAL_HANGUP, violation=None, signed=True):
    """Seal arbitrary interval contents with the genuine signer key."""
    env = sign(PKI.leaf_key, HEADER.encode(), [PKI.leaf_cert])
    state = ChainState.anchored(start_payload(HEADER, env))
    sealed_all = []
    for ch, seqs, window in intervals:
        pk = packets(seqs, window[0])
        sealed, state = seal_interval(PKI.leaf_key, build_interval(state, ch, pk, window), state)
        sealed_all.append((pk, sealed))
    end = max(w[1] for _, _, w in intervals)
    trailer = CallTrailer(end, reason, violation, signed=signed)
    tenv = sign(PKI.leaf_key, TrailerSeal(trailer, state.next_interval_index, state.last_link).encode()) \
        if signed else None
    return write_archive(HEADER, env, sealed_all, trailer, tenv)


def chunk_bytes(data, position):
    spans = [s for s in chunk_spans(data) if s[0] == 2]
    return spans[position][1], spans[position][2]


# -- golden --------------------------------------------------------------------------

def test_golden_is_valid():
    report = verify_archive(golden_bytes(), golden_anchor())
    assert report.verdict is Verdict.VALID and report.exit_code == 0
    assert report.findings == []
    assert report.signer_uri == "sip:alice@example.com"
    assert report.interval_count == 5
    assert set(report.checks.values()) == {"pass"}
    assert list(report.checks) == list(CHECKS)


def test_forged_baseline_is_valid():
    assert verify(forge(plan())).verdict is Verdict.VALID


def test_foreign_root_fails_certificate():
    other, _ = make_root("ca:voicesig-sim", (0, 2**62), SigningKey.from_seed(b"elsewhere"))
    report = verify_archive(golden_bytes(), TrustAnchor([other]))
    assert report.verdict is Verdict.INVALID
    assert "certificate" in failing(report)


def test_wrong_expected_signer():
    report = verify_archive(golden_bytes(), golden_anchor(), expected_signer_uri="sip:carol@example.com")
    assert failing(report) == {"certificate"}


def test_interval_signature_flip():
    data = bytearray(golden_bytes())
    sig = read_archive(golden_bytes()).intervals[2].sealed.envelope.signature
    start, end = chunk_bytes(bytes(data), 2)
    at = data.index(sig, start, end)
    data[at + 10] ^= 1
    report = verify_archive(bytes(data), golden_anchor())
    # the next link hashes the whole envelope, signature included
    assert [(f.check, f.position) for f in report.errors] == [("signature", 2), ("chain", 3)]


def test_undecodable_chunk_does_not_cascade():
    data = bytearray(golden_bytes())
    _, end = chunk_bytes(bytes(data), 2)
    data[end - 1] ^= 1  # trailing envelope field, now out of range
    report = verify_archive(bytes(data), golden_anchor())
    assert failing(report) == {"format"}
    assert report.error_positions() == {2}


def test_packet_payload_flip_is_hash_error():
    data = bytearray(golden_bytes())
    start, _ = chunk_bytes(bytes(data), 1)
    arch = read_archive(golden_bytes())
    data[start + 4 + 4 + len(arch.intervals[1].packets[0].encode()) - 1] ^= 0x80
    report = verify_archive(bytes(data), golden_anchor())
    assert failing(report) == {"hash"}
    assert report.errors[0].position == 1


def test_removed_packet_is_seqs_error():
    arch = read_archive(golden_bytes())
    c = arch.intervals[3]
    c.raw = interval_payload(c.packets[1:], c.sealed)
    report = verify_archive(arch.to_bytes(), golden_anchor())
    assert "seqs" in failing(report)
    assert report.error_positions() == {3}


def test_swap_fails_index_and_chain():
    arch = read_archive(golden_bytes())
    arch.intervals[1], arch.intervals[2] = arch.intervals[2], arch.intervals[1]
    report = verify_archive(arch.to_bytes(), golden_anchor())
    assert {"index", "chain"} <= failing(report)
    assert {1, 2} <= report.error_positions()


def test_dropping_the_end_chunk_is_a_warning():
    arch = read_archive(golden_bytes())
    arch.trailer_offset = None
    report = verify_archive(arch.to_bytes(), golden_anchor())
    assert report.verdict is Verdict.VALID_TRUNCATED_TAIL and report.exit_code == 3
    assert [f.check for f in report.warnings] == ["trailer"]


def test_partial_chunk_is_a_warning():
    data = golden_bytes()
    _, end = chunk_bytes(data, 3)
    report = verify_archive(data[:end + 20], golden_anchor())
    assert report.verdict is Verdict.VALID_TRUNCATED_TAIL
    assert {f.check for f in report.warnings} == {"truncated", "trailer"}


def test_dropping_a_middle_interval_with_trailer_is_invalid():
    arch = read_archive(golden_bytes())
    del arch.intervals[4]
    report = verify_archive(arch.to_bytes(), golden_anchor())
    assert report.verdict is Verdict.INVALID
    assert failing(report) == {"chain"}  # the signed trailer sealed five


def test_framing_damage_raises():
    data = bytearray(golden_bytes())
    data[0] = 0
    with pytest.raises(FormatError):
        verify_archive(bytes(data), golden_anchor())


# -- semantic checks on re-signed archives -------------------------------------------

def test_unsigned_hangup_trailer_is_a_warning():
    report = verify(forge(plan(), signed=False))
    assert report.verdict is Verdict.VALID_TRUNCATED_TAIL
    assert [f.check for f in report.warnings] == ["trailer"]


def test_policy_trailer_is_invalid():
    report = verify(forge(plan(), TerminationReason.QOS_UNDERRUN))
    assert failing(report) == {"termination"}
    report = verify(forge(plan(), TerminationReason.POLICY_VIOLATION, ViolationKind.BORDER_GAP))
    assert failing(report) == {"termination"}


def test_border_gap():
    p = plan()
    p[3][1] = [s + 4 for s in p[3][1]]  # four missing between A->B intervals
    report = verify(forge(p))
    assert "border" in failing(report)


def test_regression_is_monotonic_error():
    p = plan()
    p[3][1] = [s - 3 for s in p[3][1]]
    assert "monotonic" in failing(verify(forge(p)))


def test_internal_loss_trips_qos():
    p = plan()
    p[2][1] = p[2][1][:2] + p[2][1][3:]  # 1 of 10 so far on B->A
    report = verify(forge(p))
    assert failing(report) == {"qos"}
    assert report.errors[0].position == 2


def test_drift():
    p = plan()
    for item in p:
        if item[0] is A_TO_B:
            s, e = item[2]
            item[2] = (s + 1001, e + 1001)
    assert failing(verify(forge(p))) == {"drift"}


def test_inverted_window():
    data = forge(plan())
    arch = read_archive(data)
    pl = arch.intervals[4].sealed.payload
    # the payload type refuses an inverted window, so invert it in the bytes
    raw = arch.intervals[4].raw
    enc = pl.encode()
    at = raw.index(enc)
    start_field = at + 8 + 1
    new = raw[:start_field] + raw[start_field + 8:start_field + 16] + raw[start_field:start_field + 8] \
        + raw[start_field + 16:]
    arch.intervals[4].raw = new
    report = verify(arch.to_bytes())
    assert report.verdict is Verdict.INVALID
    assert report.error_positions() == {4}


def test_overlapping_windows():
    p = plan()
    s, e = p[2][2]
    p[2][2] = (s - 500, e)
    assert "window" in failing(verify(forge(p)))


def test_packet_timestamp_far_outside_window():
    p = plan()
    data = bytearray(forge(p))
    arch = read_archive(bytes(data))
    # re-seal with a packet captured an hour late
    env = sign(PKI.leaf_key, HEADER.encode(), [PKI.leaf_cert])
    state = ChainState.anchored(start_payload(HEADER, env))
    rows = []
    for i, chunk in enumerate(arch.intervals):
        pk = chunk.packets
        if i == 1:
            q = pk[0]
            pk = [MediaPacket(q.ssrc, q.seq, q.rtp_timestamp, q.payload_type, q.capture_wallclock + 3_600_000,
                              q.payload)] + pk[1:]
        pl = chunk.sealed.payload
        sealed, state = seal_interval(
            PKI.leaf_key, build_interval(state, pl.channel, pk, (pl.start_wallclock, pl.end_wallclock)), state)
        rows.append((pk, sealed))
    trailer = arch.trailer
    tenv = sign(PKI.leaf_key, TrailerSeal(trailer, state.next_interval_index, state.last_link).encode())
    report = verify(write_archive(HEADER, env, rows, trailer, tenv))
    assert failing(report) == {"timestamp"}


def test_trailer_from_other_call_fails():
    a, b = forge(plan()), forge(plan(4))
    arch_a, arch_b = read_archive(a), read_archive(b)
    arch_a.trailer_raw = arch_b.trailer_raw
    assert "chain" in failing(verify(arch_a.to_bytes()))


# -- rendering ------------------------------------------------------------------------

def test_json_lines_is_parseable():
    arch = read_archive(golden_bytes())
    arch.intervals[1], arch.intervals[2] = arch.intervals[2], arch.intervals[1]
    report = verify_archive(arch.to_bytes(), golden_anchor())
    lines = [json.loads(x) for x in render_report(report, "json-lines").splitlines()]
    assert all("finding" in x for x in lines[:-1])
    summary = lines[-1]["summary"]
    assert summary["verdict"] == "Invalid" and summary["exit_code"] == 4
    assert summary["errors"] == len(lines) - 1
    for x in lines[:-1]:
        assert x["finding"]["severity"] in {s.value for s in Severity}
        assert isinstance(x["finding"]["offset"], int)


def test_human_report_mentions_verdict_and_locations():
    text = render_report(verify_archive(golden_bytes(), golden_anchor()))
    assert text.startswith("verdict: Valid\n")
    assert "checks: all passed" in text
    with pytest.raises(ValueError):
        render_report(verify_archive(golden_bytes(), golden_anchor()), "xml")
