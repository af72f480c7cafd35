import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from support import GOLDEN_SCENARIO, golden_anchor, golden_bytes, golden_outcome
from voicesig.archive import read_archive
from voicesig.core import ChannelDirection, MediaPacket, TerminationReason, ViolationKind
from voicesig.policy import OnViolation, PolicyConfig
from voicesig.protocol import RecorderOutcome
from voicesig.simnet import (
    BitFlip,
    ConnectionDrop,
    LinkModel,
    MutilationByA,
    MutilationByB,
    ScenarioError,
    SimScenario,
    SpliceSwap,
    TailTruncation,
    apply_post_attack,
    derive_rng,
    parse_scenario,
    read_transcript,
    replay_transcript,
    run_simulation,
    sig_loss_patterns,
    with_attack,
)
from voicesig.verifier import Verdict, verify_archive

SHORT = SimScenario(duration_ms=3000)


def channels(archive):
    arch = read_archive(archive)
    return [c.sealed.payload.channel for c in arch.intervals]


def test_same_seed_same_bytes():
    a, b = run_simulation(SHORT), run_simulation(SHORT)
    assert a.archive == b.archive
    assert a.transcript == b.transcript


def test_different_seed_different_bytes():
    assert run_simulation(SHORT).archive != run_simulation(SimScenario(seed=43, duration_ms=3000)).archive


def test_rng_streams_are_independent_by_label():
    assert derive_rng(1, "x").random() == derive_rng(1, "x").random()
    assert derive_rng(1, "x").random() != derive_rng(1, "y").random()


def test_thirty_second_call_has_one_interval_per_second_per_channel():
    out = run_simulation(SimScenario(duration_ms=30_000))
    chs = channels(out.archive)
    for ch in ChannelDirection:
        assert abs(chs.count(ch) - 30) <= 1
    assert out.recorder_outcome is RecorderOutcome.ACCEPTED


def test_golden_outcome():
    out = golden_outcome()
    assert out.archive == golden_bytes()
    assert out.reason("A") is out.reason("B") is TerminationReason.NORMAL_HANGUP
    assert not out.deadlocked and out.violations == []


def test_virtual_clock_never_goes_back():
    times = [r["t"] for r in run_simulation(SimScenario(duration_ms=3000, media=LinkModel(
        loss_prob=0.01, reorder_prob=0.1, dup_prob=0.05))).transcript if "t" in r]
    assert times == sorted(times)


def test_raw_archive_equals_post_hoc_input():
    out = run_simulation(with_attack(SHORT, TailTruncation(1)))
    assert out.archive == apply_post_attack(out.raw_archive, TailTruncation(1))


# -- transcript ---------------------------------------------------------------------

@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["A", "B"]))
def test_replay_reproduces_endpoints(seed, hangup_by):
    sc = SimScenario(seed=seed, duration_ms=2500, hangup_by=hangup_by,
                     media=LinkModel(loss_prob=0.005, reorder_prob=0.05), sig=LinkModel(loss_prob=0.05))
    out = run_simulation(sc)
    replay = replay_transcript(sc, read_transcript(out.transcript_lines()))
    assert replay.archive == out.raw_archive
    assert replay.termination == out.termination
    assert replay.violations == out.violations


def test_replay_rejects_other_seed():
    out = run_simulation(SHORT)
    with pytest.raises(ScenarioError):
        replay_transcript(SimScenario(seed=1), out.transcript)


# -- attacks -------------------------------------------------------------------------

def test_mutilation_by_b_stops_call_quickly():
    onset = 2000
    sc = SimScenario(duration_ms=8000, attack=MutilationByB(0.5, from_ms=onset))
    out = run_simulation(sc)
    assert out.reason("A") is TerminationReason.QOS_UNDERRUN
    end = out.termination["A"].end_wallclock - sc.start_wallclock
    assert end <= onset + 2 * sc.interval_length_ms + sc.policy.retransmit_timeout_ms


def test_mutilation_by_a_is_caught_by_recorder():
    out = run_simulation(SimScenario(duration_ms=6000, attack=MutilationByA(0.5, from_ms=1000)))
    assert ViolationKind.COVERAGE_TOO_LOW in out.violation_kinds("B")
    assert out.recorder_outcome is RecorderOutcome.VIOLATION


def test_connection_drop_leaves_verifiable_prefix():
    sc = SimScenario(duration_ms=8000, attack=ConnectionDrop(4000))
    out = run_simulation(sc)
    assert out.recorder_outcome is RecorderOutcome.DROPPED
    assert out.reason("B") is TerminationReason.CONNECTION_DROP
    report = verify_archive(out.archive, out.anchor)
    assert report.verdict is Verdict.VALID_TRUNCATED_TAIL


def test_notify_mode_keeps_the_call_running():
    sc = SimScenario(duration_ms=5000, policy=PolicyConfig(on_violation=OnViolation.NOTIFY),
                     attack=MutilationByB(0.5, from_ms=1000))
    out = run_simulation(sc)
    assert ViolationKind.QOS_UNDERRUN in out.violation_kinds("A")
    assert out.reason("A") is TerminationReason.NORMAL_HANGUP


@pytest.mark.parametrize("attack", [
    TailTruncation(99), SpliceSwap(0, 0), SpliceSwap(0, 9), BitFlip(99, 0), BitFlip(1, 10**6), BitFlip(1, 0, 8),
    ConnectionDrop(10),
])
def test_post_attack_range_errors(attack):
    with pytest.raises(ScenarioError):
        apply_post_attack(golden_bytes(), attack)


def test_splice_swaps_exact_records():
    out = apply_post_attack(golden_bytes(), SpliceSwap(3, 1))
    a, b = read_archive(golden_bytes()), read_archive(out)
    assert [c.raw for c in b.intervals] == [a.intervals[i].raw for i in (0, 3, 2, 1, 4)]
    assert len(out) == len(golden_bytes())


# -- scenario files -------------------------------------------------------------------

def test_parse_scenario_file():
    sc = parse_scenario("""
        seed = 7
        duration_ms = 4000   # four seconds
        media.loss_prob = 0.02
        media.loss_pattern = periodic
        sig.loss_prob = 0.1
        hangup_by = B
        drop_sig = 1, 4

        [policy]
        loss_threshold = 0.05

        [attack]
        type = mutilation-by-b
        report_fraction = 0.25
        from_ms = 1000
    """.replace("\n        ", "\n"))
    assert (sc.seed, sc.duration_ms, sc.hangup_by, sc.drop_sig) == (7, 4000, "B", frozenset({1, 4}))
    assert sc.media.loss_pattern == "periodic" and sc.media.loss_prob == 0.02
    assert sc.media.latency_ms == 20
    assert sc.sig.loss_prob == 0.1
    assert sc.policy.loss_threshold == 0.05
    assert sc.attack == MutilationByB(0.25, 1000)


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "media.bogus = 1",
    "[network]\nx = 1",
    "seed = -1",
    "media.loss_prob = 2",
    "hangup_by = C",
    "[attack]\ntype = teleport",
    "[attack]\ntype = splice-swap\ni = 1",
    "[policy]\nloss_threshold = x",
    "duration_ms",
])
def test_bad_scenarios(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_sig_loss_patterns_count():
    pats = sig_loss_patterns(5)
    assert len(pats) == 1 + 5 + 10
    assert len(set(pats)) == len(pats)


def test_dropped_signalling_message_is_recovered():
    sc = SimScenario(duration_ms=3000, drop_sig=frozenset({0, 3}))
    out = run_simulation(sc)
    assert not out.deadlocked
    assert verify_archive(out.archive, out.anchor).verdict is Verdict.VALID


def test_golden_scenario_is_small():
    # keep the frozen fixture cheap to regenerate and to sweep
    assert len(golden_bytes()) < 5000
    assert GOLDEN_SCENARIO.duration_ms < 4000


# -- invariants ---------------------------------------------------------------------

def benign_scenario(rng, pattern):
    return SimScenario(
        seed=rng.randrange(2**32),
        duration_ms=rng.randint(3000, 12_000),
        media=LinkModel(loss_prob=rng.uniform(0, 0.005), reorder_prob=rng.choice([0.0, 0.02]),
                        dup_prob=rng.choice([0.0, 0.01]), loss_pattern=pattern),
        sig=LinkModel(loss_prob=rng.uniform(0, 0.05)),
        hangup_by=rng.choice("AB"),
    )


def realized_loss(out, until):
    """Worst per-channel loss over the last ten intervals, recounted from the transcript."""
    sc = out.scenario
    worst = 0.0
    for ch, sender in ((ChannelDirection.A_TO_B, "A"), (ChannelDirection.B_TO_A, "B")):
        sent, got = {}, set()
        for r in out.transcript:
            if r.get("kind") != "media" or r["channel"] != ch or r["t"] > until:
                continue
            p = MediaPacket.decode(bytes.fromhex(r["packet"]))
            if r["to"] == sender:
                sent[p.seq] = p.capture_wallclock
            else:
                got.add(p.seq)
        lo = max(sc.start_wallclock, until - 10 * sc.interval_length_ms)
        window = [s for s, t in sent.items() if lo <= t <= until - sc.policy.latency_slack_ms]
        if window:
            worst = max(worst, sum(s not in got for s in window) / len(window))
    return worst


def test_no_false_positives_at_steady_low_loss():
    rng = random.Random(584)
    for _ in range(100):
        sc = benign_scenario(rng, "periodic")
        out = run_simulation(sc)
        assert verify_archive(out.archive, out.anchor).verdict is Verdict.VALID, (sc, out.violations)


def test_random_low_loss_is_only_flagged_when_real_loss_exceeds_threshold():
    # Bernoulli loss averaging 0.5% still puts six losses into some 500-packet
    # windows; such a verdict is correct, so check it against a recount.
    rng = random.Random(585)
    valid = 0
    for _ in range(100):
        sc = benign_scenario(rng, "bernoulli")
        out = run_simulation(sc)
        report = verify_archive(out.archive, out.anchor)
        if report.verdict is Verdict.VALID:
            valid += 1
            continue
        assert {f.check for f in report.errors} <= {"qos", "termination"}, report.findings
        trip = min(t.end_wallclock for t in out.termination.values() if t is not None)
        assert realized_loss(out, trip) > sc.policy.loss_threshold, (sc, out.violations)
    assert valid >= 90


def test_splice_3_4_breaks_links_at_both():
    report = verify_archive(apply_post_attack(golden_bytes(), SpliceSwap(3, 4)), golden_anchor())
    assert report.verdict is Verdict.INVALID
    chain = {f.position for f in report.errors if f.check == "chain"}
    assert {3, 4} <= chain


def test_flipped_stored_seq_is_a_seq_mismatch():
    arch = read_archive(golden_bytes())
    # byte 4 of the first stored packet record of interval 2 is its seq (after the u32 length prefix and ssrc)
    chunk_index = 1 + 2
    offset = 5 + 4 + 4 + 4
    data = apply_post_attack(golden_bytes(), BitFlip(chunk_index, offset, 0))
    report = verify_archive(data, golden_anchor())
    assert "seqs" in {f.check for f in report.errors}
    assert report.error_positions() == {2}
    assert arch.intervals[2].packets
