"""Security checks shared by the live machines and the offline verifier.

Every check is a pure function returning ``None`` when the input passes and a
:class:`~voicesig.core.Violation` otherwise. Thresholds compare with a strict
``>``: a value exactly at a limit passes.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

from .core import (
    IntervalPayload,
    MediaPacket,
    Violation,
    ViolationKind,
)


class OnViolation(Enum):
    IGNORE = "ignore"
    NOTIFY = "notify"
    STOP_SIGNING = "stop-signing"
    TERMINATE_CALL = "terminate"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    loss_threshold: float = 0.01
    replay_window_size: int = 64
    clock_skew_limit_ms: int = 2000
    border_gap_limit: int = 3
    drift_limit_ms: Optional[int] = None  # None: one interval length
    on_violation: OnViolation = OnViolation.TERMINATE_CALL
    qos_window_intervals: int = 10
    retransmit_timeout_ms: int = 200
    latency_slack_ms: int = 200
    drop_timeout_ms: Optional[int] = None  # None: three interval lengths
    terminate_on_duplicate: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.loss_threshold < 1:
            raise ConfigError("loss_threshold must lie strictly between 0 and 1")
        if self.replay_window_size < 1:
            raise ConfigError("replay_window_size must be >= 1")
        if self.qos_window_intervals < 1:
            raise ConfigError("qos_window_intervals must be >= 1")
        for name in ("clock_skew_limit_ms", "border_gap_limit", "retransmit_timeout_ms", "latency_slack_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def drift_limit(self, interval_length_ms: int) -> int:
        return interval_length_ms if self.drift_limit_ms is None else self.drift_limit_ms

    def drop_timeout(self, interval_length_ms: int) -> int:
        return 3 * interval_length_ms if self.drop_timeout_ms is None else self.drop_timeout_ms

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "PolicyConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.strip().replace("-", "_")
            if name not in fields:
                raise ConfigError(f"unknown policy key {key!r}")
            kwargs[name] = _coerce(name, raw.strip())
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else ("" if v is None else str(v).lower())
        return out


def _coerce(name: str, raw: str):
    try:
        if name == "loss_threshold":
            return float(raw)
        if name == "on_violation":
            return OnViolation(raw.lower())
        if name == "terminate_on_duplicate":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if name in ("drift_limit_ms", "drop_timeout_ms") and raw in ("", "none"):
            return None
        return int(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_policy(text: str) -> PolicyConfig:
    return PolicyConfig.from_mapping(parse_key_values(text))


# ---------------------------------------------------------------------------
# Replay window
# ---------------------------------------------------------------------------

class ReplayResult(Enum):
    ACCEPT = "Accept"
    DUPLICATE = "Duplicate"
    TOO_OLD = "TooOld"


def unwrap_seq(seq16: int, highest: Optional[int]) -> int:
    """Extend a 16-bit RTP sequence number to the value closest to ``highest``."""
    if highest is None:
        return seq16
    base = highest - (highest & 0xFFFF)
    candidates = (base - 0x10000 + seq16, base + seq16, base + 0x10000 + seq16)
    return min((c for c in candidates if c >= 0), key=lambda c: abs(c - highest))


class ReplayWindow:
    """Sliding acceptance window that also sorts packets before release.

    Accepted packets are held until every lower sequence number has been
    released or has slid out of the window, so :meth:`push` and :meth:`flush`
    emit strictly increasing sequence numbers. A packet that arrives after a
    higher one has been released is rejected as too old.
    """

    def __init__(self, size: int = 64):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.size = size
        self.highest: Optional[int] = None
        self.mask = 0  # bit i set: highest - i already seen
        self.released: Optional[int] = None
        self.held: dict[int, MediaPacket] = {}
        self.duplicates = 0
        self.too_old = 0

    def check(self, seq: int) -> ReplayResult:
        if self.highest is not None:
            delta = self.highest - seq
            if delta >= self.size:
                return ReplayResult.TOO_OLD
            if delta >= 0 and self.mask >> delta & 1:
                return ReplayResult.DUPLICATE
        if self.released is not None and seq <= self.released:
            return ReplayResult.TOO_OLD
        return ReplayResult.ACCEPT

    def _mark(self, seq: int) -> None:
        if self.highest is None:
            self.highest, self.mask = seq, 1
        elif seq > self.highest:
            shift = seq - self.highest
            self.mask = ((self.mask << shift) | 1) & ((1 << self.size) - 1) if shift < self.size else 1
            self.highest = seq
        else:
            self.mask |= 1 << (self.highest - seq)

    def accept(self, seq: int) -> ReplayResult:
        result = self.check(seq)
        if result is ReplayResult.ACCEPT:
            self._mark(seq)
        elif result is ReplayResult.DUPLICATE:
            self.duplicates += 1
        else:
            self.too_old += 1
        return result

    def push(self, packet: MediaPacket) -> tuple[ReplayResult, list[MediaPacket]]:
        result = self.accept(packet.seq)
        if result is not ReplayResult.ACCEPT:
            return result, []
        self.held[packet.seq] = packet
        return result, self._release()

    def _release(self) -> list[MediaPacket]:
        out = []
        floor = self.highest - self.size  # seqs at or below this left the window
        for seq in sorted(self.held):
            if self.released is None or seq == self.released + 1 or seq <= floor:
                out.append(self.held.pop(seq))
                self.released = seq
            else:
                break
        return out

    def flush(self) -> list[MediaPacket]:
        """Release everything held, giving up on the gaps below it."""
        out = [self.held.pop(s) for s in sorted(self.held)]
        if out:
            self.released = out[-1].seq
        return out


def replay_check(window: ReplayWindow, seq: int) -> ReplayResult:
    return window.accept(seq)


# ---------------------------------------------------------------------------
# Point checks
# ---------------------------------------------------------------------------

def qos_check(
    expected_count: float,
    received_count: float,
    config: PolicyConfig,
    kind: ViolationKind = ViolationKind.QOS_UNDERRUN,
    **where,
) -> Optional[Violation]:
    if received_count < 0 or expected_count < received_count:
        raise ValueError("need expected >= received >= 0")
    if expected_count <= 0:
        return None
    # exact arithmetic: 5 of 500 lost is exactly 1%, which does not exceed 1%
    loss = Fraction(expected_count - received_count) / Fraction(expected_count)
    if loss > Fraction(str(config.loss_threshold)):
        return Violation(kind, f"loss {float(loss):.4f} above {config.loss_threshold}", value=float(loss), **where)
    return None


def timestamp_check(packet: MediaPacket, now_ms: int, config: PolicyConfig, **where) -> Optional[Violation]:
    skew = abs(packet.capture_wallclock - now_ms)
    if skew > config.clock_skew_limit_ms:
        return Violation(
            ViolationKind.TIMESTAMP_SKEW,
            f"packet {packet.seq} skew {skew} ms",
            seq=packet.seq,
            value=skew,
            **where,
        )
    return None


def border_gap(last_seq: Optional[int], first_seq: Optional[int], config: PolicyConfig, **where) -> Optional[Violation]:
    if last_seq is None or first_seq is None:
        return None
    gap = first_seq - last_seq - 1
    if gap > config.border_gap_limit:
        return Violation(
            ViolationKind.BORDER_GAP,
            f"{gap} packets missing between seq {last_seq} and {first_seq}",
            seq=first_seq,
            value=gap,
            **where,
        )
    return None


def border_check(prev: IntervalPayload, nxt: IntervalPayload, config: PolicyConfig) -> Optional[Violation]:
    if not prev.packet_seqs or not nxt.packet_seqs:
        return None
    return border_gap(
        prev.packet_seqs[-1],
        nxt.packet_seqs[0],
        config,
        interval_index=nxt.interval_index,
        channel=nxt.channel,
    )


def drift_check(
    a_to_b: Optional[IntervalPayload],
    b_to_a: Optional[IntervalPayload],
    config: PolicyConfig,
    interval_length_ms: int = 1000,
) -> Optional[Violation]:
    if a_to_b is None or b_to_a is None:
        return None
    drift = abs(a_to_b.start_wallclock - b_to_a.start_wallclock)
    if drift > config.drift_limit(interval_length_ms):
        later = max(a_to_b, b_to_a, key=lambda p: p.interval_index)
        return Violation(
            ViolationKind.CHANNEL_DRIFT,
            f"channel starts differ by {drift} ms",
            interval_index=later.interval_index,
            value=drift,
        )
    return None


# ---------------------------------------------------------------------------
# Stateful monitors built from the point checks
# ---------------------------------------------------------------------------

class QosMonitor:
    """Loss ratio over a sliding window of intervals.

    A window that is not yet full is judged against a full window's worth of
    packets (its mean per-interval count times the window length), so the
    first intervals of a call are not held to an unmeasurably fine ratio.
    """

    def __init__(self, config: PolicyConfig, kind: ViolationKind = ViolationKind.QOS_UNDERRUN):
        self.config = config
        self.kind = kind
        self.window: deque[tuple[int, int]] = deque(maxlen=config.qos_window_intervals)
        self.history: list[tuple[int, int]] = []

    def record(self, expected: int, received: int, **where) -> Optional[Violation]:
        self.window.append((expected, received))
        self.history.append((expected, received))
        total = sum(e for e, _ in self.window)
        lost = total - sum(r for _, r in self.window)
        capacity = max(Fraction(total), Fraction(total * self.window.maxlen, len(self.window)))
        return qos_check(capacity, capacity - lost, self.config, self.kind, **where)


@dataclass
class SeqObservation:
    expected: int
    received: int
    violation: Optional[Violation]


class SeqTracker:
    """Per-channel view of successive signed sequence lists.

    Measures loss from gaps, enforces strict monotonicity across intervals and
    checks interval borders against the last non-empty interval.
    """

    def __init__(self, config: PolicyConfig):
        self.config = config
        self.last_seq: Optional[int] = None

    def observe(self, seqs: Sequence[int], **where) -> SeqObservation:
        if any(b <= a for a, b in zip(seqs, seqs[1:])) or (
            seqs and self.last_seq is not None and seqs[0] <= self.last_seq
        ):
            return SeqObservation(0, 0, Violation(
                ViolationKind.NON_MONOTONIC_SEQ, "sequence numbers do not increase", **where
            ))
        if not seqs:
            return SeqObservation(0, 0, None)
        base = seqs[0] - 1 if self.last_seq is None else self.last_seq
        violation = border_gap(self.last_seq, seqs[0], self.config, **where)
        self.last_seq = seqs[-1]
        return SeqObservation(seqs[-1] - base, len(seqs), violation)
