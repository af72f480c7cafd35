"""Deterministic discrete-event simulation of a signed call.

One virtual-time loop connects a :class:`~voicesig.protocol.Signer` and a
:class:`~voicesig.protocol.Recorder` over lossy links.  Every random choice
comes from a ``random.Random`` stream derived from the scenario seed and a
label, so adding an attacker never perturbs the honest traffic.
"""

from __future__ import annotations

import configparser
import hashlib
import heapq
import io
import itertools
import json
import random
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional, Union

from .archive import CHUNK_HEADER_SIZE, ChunkType, chunk_spans
from .core import (
    CallHeader,
    CallTrailer,
    Certificate,
    ChannelDirection,
    MediaPacket,
    TerminationReason,
    Violation,
)
from .crypto import SigningKey, TrustAnchor, issue_certificate, make_root
from .policy import PolicyConfig, load_policy
from .protocol import events as ev
from .protocol.machine import Machine, Phase
from .protocol.messages import decode_sig_msg, encode_sig_msg
from .protocol.recorder import Recorder, RecorderOutcome
from .protocol.signer import Signer

A_TO_B = ChannelDirection.A_TO_B
B_TO_A = ChannelDirection.B_TO_A

DEFAULT_START = 1_700_000_000_000
YEAR_MS = 365 * 24 * 3600 * 1000


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MutilationByB:
    """B reports only part of the A->B packets it received."""

    report_fraction: float = 0.5
    from_ms: int = 0
    to_ms: Optional[int] = None


@dataclass(frozen=True)
class MutilationByA:
    """A signs only part of the B->A packets it received."""

    sign_fraction: float = 0.5
    from_ms: int = 0
    to_ms: Optional[int] = None


@dataclass(frozen=True)
class SecondStream:
    """An injector replays every delivered A->B packet with new audio."""

    offset_ms: int = 50


@dataclass(frozen=True)
class TailTruncation:
    cut_last_n_chunks: int = 1


@dataclass(frozen=True)
class SpliceSwap:
    i: int
    j: int


@dataclass(frozen=True)
class BitFlip:
    chunk: int
    offset: int
    bit: int = 0


@dataclass(frozen=True)
class ConnectionDrop:
    at_ms: int


AttackScript = Union[MutilationByB, MutilationByA, SecondStream, TailTruncation, SpliceSwap, BitFlip, ConnectionDrop]
POST_HOC = (TailTruncation, SpliceSwap, BitFlip)

ATTACKS = {
    "mutilation-by-b": MutilationByB,
    "mutilation-by-a": MutilationByA,
    "second-stream": SecondStream,
    "tail-truncation": TailTruncation,
    "splice-swap": SpliceSwap,
    "bit-flip": BitFlip,
    "connection-drop": ConnectionDrop,
}


def attack_name(attack: AttackScript) -> str:
    return next(k for k, v in ATTACKS.items() if isinstance(attack, v))


def _keep_fraction(rng: random.Random, items: list, fraction: float) -> list:
    keep = round(len(items) * fraction)
    chosen = sorted(rng.sample(range(len(items)), keep))
    return [items[i] for i in chosen]


# ---------------------------------------------------------------------------
# Post-hoc archive edits
# ---------------------------------------------------------------------------

def _chunk_bounds(data: bytes) -> list[tuple[ChunkType, int, int]]:
    """``(type, record_start, record_end)`` of every complete chunk."""
    return [(t, s - CHUNK_HEADER_SIZE, e) for t, s, e in chunk_spans(data)]


def apply_post_attack(data: bytes, attack: AttackScript) -> bytes:
    """Edit archive bytes the way a key-less attacker could.

    Interval indices for ``SpliceSwap`` count interval chunks only; the chunk
    index for ``BitFlip`` counts every chunk with the start chunk as 0 and
    its offset is relative to that chunk's record header.
    """
    try:
        bounds = _chunk_bounds(data)
    except ValueError as exc:
        raise ScenarioError(f"cannot split archive into chunks: {exc}") from None
    if isinstance(attack, TailTruncation):
        n = attack.cut_last_n_chunks
        if not 0 <= n <= len(bounds):
            raise ScenarioError(f"cannot cut {n} of {len(bounds)} chunks")
        end = bounds[-n][1] if n else len(data)
        return data[:end]
    if isinstance(attack, SpliceSwap):
        intervals = [b for b in bounds if b[0] == ChunkType.INTERVAL]
        i, j = sorted((attack.i, attack.j))
        if i == j or i < 0 or j >= len(intervals):
            raise ScenarioError(f"splice indices {attack.i},{attack.j} out of range 0..{len(intervals) - 1}")
        (_, s1, e1), (_, s2, e2) = intervals[i], intervals[j]
        return data[:s1] + data[s2:e2] + data[e1:s2] + data[s1:e1] + data[e2:]
    if isinstance(attack, BitFlip):
        if not 0 <= attack.chunk < len(bounds):
            raise ScenarioError(f"chunk {attack.chunk} out of range 0..{len(bounds) - 1}")
        _, start, end = bounds[attack.chunk]
        if not 0 <= attack.offset < end - start or not 0 <= attack.bit < 8:
            raise ScenarioError(f"offset {attack.offset} outside chunk of {end - start} bytes")
        out = bytearray(data)
        out[start + attack.offset] ^= 1 << attack.bit
        return bytes(out)
    raise ScenarioError(f"{type(attack).__name__} is not a post-hoc edit")


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

LOSS_PATTERNS = ("bernoulli", "periodic")


@dataclass(frozen=True)
class LinkModel:
    """Per-stream network behaviour, applied to each direction independently.

    ``loss_pattern="periodic"`` drops exactly every ``round(1/loss_prob)``-th
    datagram (with a seeded phase) instead of drawing each loss independently.
    It models a steady loss rate without sampling noise.
    """

    loss_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    latency_ms: int = 20
    jitter_ms: int = 10
    loss_pattern: str = "bernoulli"

    def __post_init__(self) -> None:
        for name in ("loss_prob", "dup_prob", "reorder_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ScenarioError(f"{name} must lie in [0, 1]")
        if self.loss_pattern not in LOSS_PATTERNS:
            raise ScenarioError(f"loss_pattern must be one of {', '.join(LOSS_PATTERNS)}")
        if self.latency_ms < 0 or not 0 <= self.jitter_ms <= self.latency_ms:
            raise ScenarioError("need latency_ms >= jitter_ms >= 0")


@dataclass(frozen=True)
class SimScenario:
    seed: int = 42
    duration_ms: int = 10_000
    packet_rate_hz: int = 50
    payload_bytes: int = 160
    interval_length_ms: int = 1000
    media: LinkModel = LinkModel(loss_prob=0.002)
    sig: LinkModel = LinkModel()
    policy: PolicyConfig = PolicyConfig()
    attack: Optional[AttackScript] = None
    hangup_by: str = "A"
    start_wallclock: int = DEFAULT_START
    caller_uri: str = "sip:alice@example.com"
    callee_uri: str = "sip:bob@example.com"
    drop_sig: frozenset = frozenset()
    event_budget: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        if self.packet_rate_hz <= 0 or self.duration_ms <= 0:
            raise ScenarioError("rate and duration must be positive")
        if not 1 <= self.payload_bytes <= 1400:
            raise ScenarioError("payload_bytes must be 1..1400")
        if self.interval_length_ms < 100:
            raise ScenarioError("interval_length_ms must be >= 100")
        if self.hangup_by not in ("A", "B"):
            raise ScenarioError("hangup_by must be A or B")
        object.__setattr__(self, "drop_sig", frozenset(self.drop_sig))
        a = self.attack
        if isinstance(a, (MutilationByA, MutilationByB)):
            frac = a.report_fraction if isinstance(a, MutilationByB) else a.sign_fraction
            if not 0.0 <= frac <= 1.0 or not 0 <= a.from_ms <= self.duration_ms:
                raise ScenarioError("mutilation parameters outside the call")
        if isinstance(a, ConnectionDrop) and not 0 <= a.at_ms <= self.duration_ms:
            raise ScenarioError("connection drop outside the call")
        if isinstance(a, SecondStream) and not 0 < a.offset_ms <= self.duration_ms:
            raise ScenarioError("second stream offset must be positive and within the call")

    @property
    def budget(self) -> int:
        if self.event_budget is not None:
            return self.event_budget
        per_second = 4 * self.packet_rate_hz + 200
        return 50_000 + per_second * (self.duration_ms // 1000 + 60)


_SCENARIO_KEYS = {f.name for f in fields(SimScenario)} - {"media", "sig", "policy", "attack", "drop_sig"}
_LINK_KEYS = {f.name for f in fields(LinkModel)}


def _number(raw: str):
    try:
        return int(raw, 0)
    except ValueError:
        try:
            return float(raw)
        except ValueError:
            raise ScenarioError(f"not a number: {raw!r}") from None


def parse_attack(kind: str, params: dict[str, str]) -> AttackScript:
    cls = ATTACKS.get(kind.strip().lower().replace("_", "-"))
    if cls is None:
        raise ScenarioError(f"unknown attack type {kind!r}; choose from {', '.join(ATTACKS)}")
    names = {f.name for f in fields(cls)}
    unknown = set(params) - names
    if unknown:
        raise ScenarioError(f"unknown {kind} parameter(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**{k: _number(v) for k, v in params.items()})
    except TypeError as exc:
        raise ScenarioError(f"{kind}: {exc}") from None


def parse_scenario(text: str) -> SimScenario:
    """Parse a scenario file.

    Top-level ``key = value`` lines set scenario fields; ``media.*`` and
    ``sig.*`` keys set link parameters.  Optional ``[policy]`` and ``[attack]``
    sections carry the policy keys and the attack (``type = ...`` plus its
    parameters).
    """
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[scenario]\n" + text)
    except configparser.Error as exc:
        raise ScenarioError(f"malformed scenario file: {exc}") from None
    unknown_sections = set(parser.sections()) - {"scenario", "policy", "attack"}
    if unknown_sections:
        raise ScenarioError(f"unknown section(s): {', '.join(sorted(unknown_sections))}")
    kwargs: dict = {}
    links: dict[str, dict] = {"media": {}, "sig": {}}
    for key, raw in parser["scenario"].items():
        if "." in key:
            link, _, name = key.partition(".")
            if link not in links or name not in _LINK_KEYS:
                raise ScenarioError(f"unknown key {key!r}")
            links[link][name] = raw if name == "loss_pattern" else _number(raw)
        elif key == "drop_sig":
            kwargs[key] = frozenset(int(x) for x in raw.replace(",", " ").split())
        elif key in ("hangup_by", "caller_uri", "callee_uri"):
            kwargs[key] = raw
        elif key in _SCENARIO_KEYS:
            kwargs[key] = _number(raw)
        else:
            raise ScenarioError(f"unknown key {key!r}")
    if links["media"]:
        kwargs["media"] = LinkModel(**{**LinkModel(loss_prob=0.002).__dict__, **links["media"]})
    if links["sig"]:
        kwargs["sig"] = LinkModel(**links["sig"])
    try:
        if parser.has_section("policy"):
            kwargs["policy"] = load_policy("\n".join(f"{k}={v}" for k, v in parser["policy"].items()))
        if parser.has_section("attack"):
            params = dict(parser["attack"].items())
            kind = params.pop("type", None)
            if kind is None:
                raise ScenarioError("[attack] needs a type")
            kwargs["attack"] = parse_attack(kind, params)
        return SimScenario(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None



# ---------------------------------------------------------------------------
# Deterministic PKI and randomness
# ---------------------------------------------------------------------------

def derive_rng(seed: int, label: str) -> random.Random:
    h = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


@dataclass(frozen=True)
class SimPki:
    root_cert: Certificate
    root_key: SigningKey
    leaf_cert: Certificate
    leaf_key: SigningKey

    @property
    def anchor(self) -> TrustAnchor:
        return TrustAnchor([self.root_cert])


def make_pki(scenario: SimScenario) -> SimPki:
    seed = scenario.seed.to_bytes(8, "big")
    validity = (scenario.start_wallclock - YEAR_MS, scenario.start_wallclock + YEAR_MS)
    root_cert, root_key = make_root("ca:voicesig-sim", validity, SigningKey.from_seed(b"root" + seed))
    leaf_key = SigningKey.from_seed(b"leaf" + seed)
    leaf_cert, _ = issue_certificate(root_key, root_cert, scenario.caller_uri, validity, leaf_key)
    return SimPki(root_cert, root_key, leaf_cert, leaf_key)


def scenario_header(scenario: SimScenario) -> CallHeader:
    return CallHeader(
        scenario.caller_uri,
        scenario.callee_uri,
        scenario.start_wallclock,
        interval_length_ms=scenario.interval_length_ms,
    )


# ---------------------------------------------------------------------------
# Outcome
# ---------------------------------------------------------------------------

@dataclass
class SimOutcome:
    scenario: SimScenario
    archive: bytes
    raw_archive: bytes
    root_cert: Certificate
    termination: dict[str, Optional[CallTrailer]]
    violations: list[tuple[str, Violation]]
    transcript: list[dict]
    recorder_outcome: RecorderOutcome
    deadlocked: bool
    events: int
    sig_messages: int
    end_time: int
    stragglers: int = 0

    @property
    def anchor(self) -> TrustAnchor:
        return TrustAnchor([self.root_cert])

    def reason(self, party: str) -> Optional[TerminationReason]:
        t = self.termination.get(party)
        return None if t is None else t.reason

    def violation_kinds(self, party: Optional[str] = None) -> list:
        return [v.kind for p, v in self.violations if party in (None, p)]

    def transcript_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.transcript)


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------

def _packet_json(p: MediaPacket) -> str:
    return p.encode().hex()


class _Sim:
    def __init__(self, scenario: SimScenario):
        self.sc = scenario
        self.t0 = scenario.start_wallclock
        self.pki = make_pki(scenario)
        self.attack_rng = derive_rng(scenario.seed, "attacker")
        self.heap: list = []
        self.counter = 0
        self.transcript: list[dict] = [{"t": self.t0, "kind": "scenario", "seed": scenario.seed}]
        self.violations: list[tuple[str, Violation]] = []
        self.termination: dict[str, Optional[CallTrailer]] = {"A": None, "B": None}
        self.timers = {"A": {}, "B": {}}
        self.sig_sent = 0
        self.events = 0
        self.link_rng = {
            (kind, ch): derive_rng(scenario.seed, f"link:{kind}:{ch.name}")
            for kind in ("media", "sig") for ch in ChannelDirection
        }
        self.link_count = {k: 0 for k in self.link_rng}
        self.link_phase = {k: derive_rng(scenario.seed, f"phase:{k[0]}:{k[1].name}").randrange(1 << 16)
                           for k in self.link_rng}
        self.media_rng = {ch: derive_rng(scenario.seed, f"media:{ch.name}") for ch in ChannelDirection}
        self.next_seq = {ch: self.media_rng[ch].randrange(0, 1 << 16) for ch in ChannelDirection}
        self.ssrc = {ch: self.media_rng[ch].getrandbits(32) for ch in ChannelDirection}
        self.rtp_base = {ch: self.media_rng[ch].getrandbits(32) for ch in ChannelDirection}
        self.packet_no = {ch: 0 for ch in ChannelDirection}
        self.hung_up = False
        self.dropped = False

        attack = scenario.attack
        report_filter = btoa_filter = None
        if isinstance(attack, MutilationByB):
            report_filter = self._mutilate_b
        if isinstance(attack, MutilationByA):
            btoa_filter = self._mutilate_a
        self.header = scenario_header(scenario)
        self.sink = io.BytesIO()
        self.parties: dict[str, Machine] = {
            "A": Signer(self.pki.leaf_key, [self.pki.leaf_cert], self.header, scenario.policy, btoa_filter),
            "B": Recorder(self.pki.anchor, scenario.policy, None, self.sink, report_filter,
                          scenario.interval_length_ms),
        }

    # -- attacker hooks ----------------------------------------------------

    def _attack_active(self, now: int) -> bool:
        a = self.sc.attack
        rel = now - self.t0
        return rel >= a.from_ms and (a.to_ms is None or rel <= a.to_ms)

    def _mutilate_b(self, seqs: list[int], now: int) -> list[int]:
        if not self._attack_active(now):
            return seqs
        return _keep_fraction(self.attack_rng, seqs, self.sc.attack.report_fraction)

    def _mutilate_a(self, packets: list[MediaPacket], now: int) -> list[MediaPacket]:
        if not self._attack_active(now):
            return packets
        return _keep_fraction(self.attack_rng, packets, self.sc.attack.sign_fraction)

    # -- scheduling --------------------------------------------------------

    def schedule(self, t: int, kind: str, *data) -> None:
        self.counter += 1
        heapq.heappush(self.heap, (t, self.counter, kind, data))

    def cut(self, now: int) -> bool:
        return self.dropped or (isinstance(self.sc.attack, ConnectionDrop)
                                and now >= self.t0 + self.sc.attack.at_ms)

    def transmit(self, now: int, kind: str, ch: ChannelDirection, item) -> None:
        """Push one datagram through the link model."""
        model = self.sc.media if kind == "media" else self.sc.sig
        rng = self.link_rng[(kind, ch)]
        # draw every number even when unused so one choice never shifts another
        lost = rng.random() < model.loss_prob
        if model.loss_pattern == "periodic":
            n = self.link_count[(kind, ch)]
            self.link_count[(kind, ch)] += 1
            period = round(1 / model.loss_prob) if model.loss_prob > 0 else 0
            lost = period > 0 and (n + self.link_phase[(kind, ch)]) % period == 0
        dup = rng.random() < model.dup_prob
        reorder = rng.random() < model.reorder_prob
        delays = [model.latency_ms + rng.randint(-model.jitter_ms, model.jitter_ms) for _ in range(2)]
        extra = rng.randint(1, 3) * max(1, 1000 // self.sc.packet_rate_hz)
        if lost or self.cut(now):
            return
        first = delays[0] + (extra if reorder else 0)
        self.schedule(now + first, "deliver", kind, ch, item)
        if dup:
            self.schedule(now + delays[1] + extra, "deliver", kind, ch, item)

    def feed(self, party: str, event) -> None:
        machine = self.parties[party]
        if machine.phase is Phase.CLOSED:
            return
        self.record(party, event)
        self.apply(party, machine.handle(event))

    def record(self, party: str, event) -> None:
        rec: dict = {"t": event.now, "to": party}
        if isinstance(event, ev.MediaArrived):
            rec.update(kind="media", channel=int(event.channel), packet=_packet_json(event.packet))
        elif isinstance(event, ev.SigMsgArrived):
            rec.update(kind="sig", message=encode_sig_msg(event.message).hex())
        elif isinstance(event, ev.TimerFired):
            rec.update(kind="timer", timer=event.timer_id)
        elif isinstance(event, ev.LocalHangup):
            rec.update(kind="hangup")
        else:
            rec.update(kind="tick")
        self.transcript.append(rec)

    def apply(self, party: str, actions: Iterable) -> None:
        now = self.parties[party].now
        ch_out = A_TO_B if party == "A" else B_TO_A
        for action in actions:
            if isinstance(action, ev.SendSigMsg):
                data = encode_sig_msg(action.message)
                index = self.sig_sent
                self.sig_sent += 1
                if index in self.sc.drop_sig:
                    continue
                self.transmit(now, "sig", ch_out, data)
            elif isinstance(action, (ev.StartTimer, ev.ResumeTimer)):
                gen = self.timers[party].get(action.timer_id, 0) + 1
                self.timers[party][action.timer_id] = gen
                self.schedule(max(now, action.deadline), "timer", party, action.timer_id, gen)
            elif isinstance(action, ev.SuspendTimer):
                self.timers[party][action.timer_id] = self.timers[party].get(action.timer_id, 0) + 1
            elif isinstance(action, ev.TerminateCall):
                if self.termination[party] is None:
                    self.termination[party] = action.trailer
            elif isinstance(action, ev.RaiseViolation):
                self.violations.append((party, action.violation))

    def sending(self, party: str, now: int) -> bool:
        machine = self.parties[party]
        return not self.hung_up and machine.phase in (Phase.NEGOTIATING, Phase.ACTIVE) \
            and self.termination[party] is None

    def send_media(self, ch: ChannelDirection, now: int) -> None:
        party = "A" if ch == A_TO_B else "B"
        if not self.sending(party, now):
            return
        rng = self.media_rng[ch]
        n = self.packet_no[ch]
        samples = 8000 // self.sc.packet_rate_hz
        packet = MediaPacket(
            ssrc=self.ssrc[ch],
            seq=self.next_seq[ch],
            rtp_timestamp=(self.rtp_base[ch] + n * samples) % 2**32,
            payload_type=0,
            capture_wallclock=now,
            payload=rng.randbytes(self.sc.payload_bytes),
        )
        self.next_seq[ch] += 1
        self.packet_no[ch] += 1
        self.feed(party, ev.MediaArrived(now, packet, ch))
        self.transmit(now, "media", ch, packet)
        self.schedule(self.media_time(ch, n + 1), "media", ch)

    def media_time(self, ch: ChannelDirection, n: int) -> int:
        offset = 0 if ch == A_TO_B else 7
        return self.t0 + offset + (n * 1000) // self.sc.packet_rate_hz

    def deliver(self, now: int, kind: str, ch: ChannelDirection, item) -> None:
        party = "B" if ch == A_TO_B else "A"
        if kind == "media":
            self.feed(party, ev.MediaArrived(now, item, ch))
            if isinstance(self.sc.attack, SecondStream) and ch == A_TO_B:
                forged = replace(item, payload=self.attack_rng.randbytes(len(item.payload)))
                self.schedule(now + self.sc.attack.offset_ms, "inject", forged)
        else:
            self.feed(party, ev.SigMsgArrived(now, decode_sig_msg(item)))

    def run(self) -> SimOutcome:
        sc = self.sc
        signer, recorder = self.parties["A"], self.parties["B"]
        self.apply("B", recorder.start(self.t0))
        self.transcript.append({"t": self.t0, "to": "B", "kind": "start"})
        self.apply("A", signer.start(self.t0))
        self.transcript.append({"t": self.t0, "to": "A", "kind": "start"})
        for ch in ChannelDirection:
            self.schedule(self.media_time(ch, 0), "media", ch)
        self.schedule(self.t0 + sc.duration_ms, "hangup")
        deadlocked = False
        now = self.t0
        while self.heap:
            if self.events >= sc.budget:
                deadlocked = True
                break
            t, _, kind, data = heapq.heappop(self.heap)
            assert t >= now, "virtual clock went backwards"
            now = t
            self.events += 1
            if kind == "media":
                self.send_media(data[0], now)
            elif kind == "deliver":
                if not self.cut(now):
                    self.deliver(now, *data)
            elif kind == "inject":
                if not self.cut(now):
                    self.feed("B", ev.MediaArrived(now, data[0], A_TO_B))
            elif kind == "timer":
                party, timer_id, gen = data
                if self.timers[party].get(timer_id, 0) == gen:
                    self.feed(party, ev.TimerFired(now, timer_id))
            elif kind == "hangup":
                self.hung_up = True
                self.feed(sc.hangup_by, ev.LocalHangup(now))
        if any(m.phase is not Phase.CLOSED for m in self.parties.values()):
            deadlocked = True
        raw = self.sink.getvalue()
        archive = raw
        if isinstance(sc.attack, POST_HOC):
            archive = apply_post_attack(raw, sc.attack)
        return SimOutcome(
            scenario=sc,
            archive=archive,
            raw_archive=raw,
            root_cert=self.pki.root_cert,
            termination=dict(self.termination),
            violations=self.violations,
            transcript=self.transcript,
            recorder_outcome=recorder.outcome,
            deadlocked=deadlocked,
            events=self.events,
            sig_messages=self.sig_sent,
            end_time=now,
            stragglers=recorder.stragglers,
        )


def run_simulation(scenario: SimScenario) -> SimOutcome:
    """Run one call to completion (or until the event budget runs out)."""
    return _Sim(scenario).run()


# ---------------------------------------------------------------------------
# Transcript replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayResult:
    archive: bytes
    termination: dict[str, Optional[CallTrailer]] = field(default_factory=dict)
    violations: list[tuple[str, Violation]] = field(default_factory=list)


def replay_transcript(scenario: SimScenario, records: Iterable[dict]) -> ReplayResult:
    """Feed recorded machine inputs to fresh machines.

    The network is not re-simulated; only the endpoints run again, so the
    result must match the original outcome exactly.
    """
    pki = make_pki(scenario)
    header = scenario_header(scenario)
    sink = io.BytesIO()
    attack_rng = derive_rng(scenario.seed, "attacker")
    sim = _Sim.__new__(_Sim)
    sim.sc, sim.t0, sim.attack_rng = scenario, scenario.start_wallclock, attack_rng
    a = scenario.attack
    parties: dict[str, Machine] = {
        "A": Signer(pki.leaf_key, [pki.leaf_cert], header, scenario.policy,
                    sim._mutilate_a if isinstance(a, MutilationByA) else None),
        "B": Recorder(pki.anchor, scenario.policy, None, sink,
                      sim._mutilate_b if isinstance(a, MutilationByB) else None,
                      scenario.interval_length_ms),
    }
    result = ReplayResult(b"", {"A": None, "B": None})

    def collect(party: str, actions) -> None:
        for action in actions:
            if isinstance(action, ev.TerminateCall) and result.termination[party] is None:
                result.termination[party] = action.trailer
            elif isinstance(action, ev.RaiseViolation):
                result.violations.append((party, action.violation))

    for rec in records:
        kind = rec["kind"]
        if kind == "scenario":
            if rec["seed"] != scenario.seed:
                raise ScenarioError("transcript was recorded with a different seed")
            continue
        party, now = rec["to"], rec["t"]
        machine = parties[party]
        if kind == "start":
            collect(party, machine.start(now))
            continue
        if kind == "media":
            event = ev.MediaArrived(now, MediaPacket.decode(bytes.fromhex(rec["packet"])),
                                    ChannelDirection(rec["channel"]))
        elif kind == "sig":
            event = ev.SigMsgArrived(now, decode_sig_msg(bytes.fromhex(rec["message"])))
        elif kind == "timer":
            event = ev.TimerFired(now, rec["timer"])
        elif kind == "hangup":
            event = ev.LocalHangup(now)
        else:
            event = ev.ClockTick(now)
        collect(party, machine.handle(event))
    result.archive = sink.getvalue()
    return result


def read_transcript(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def sig_loss_patterns(n: int, max_losses: int = 2) -> list[frozenset]:
    """Every set of at most ``max_losses`` message indices below ``n``."""
    out = []
    for k in range(max_losses + 1):
        out.extend(frozenset(c) for c in itertools.combinations(range(n), k))
    return out


def with_attack(scenario: SimScenario, attack: Optional[AttackScript]) -> SimScenario:
    return replace(scenario, attack=attack)
