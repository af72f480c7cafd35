from __future__ import annotations

from enum import Enum
from typing import Optional

from ..core import CallTrailer, TerminationReason, Violation, ViolationKind
from ..policy import OnViolation, PolicyConfig
from . import events as ev


class Phase(Enum):
    NEGOTIATING = "negotiating"
    ACTIVE = "active"
    TERMINATING = "terminating"
    CLOSED = "closed"


def trailer_for(now: int, violation: Violation, signed: bool) -> CallTrailer:
    if violation.kind == ViolationKind.QOS_UNDERRUN:
        return CallTrailer(now, TerminationReason.QOS_UNDERRUN, signed=signed)
    return CallTrailer(now, TerminationReason.POLICY_VIOLATION, violation.kind, signed=signed)


class Machine:
    """Event loop plumbing shared by the signer and the recorder."""

    def __init__(self, config: PolicyConfig, interval_length_ms: int):
        self.config = config
        self.interval_length = interval_length_ms
        self.phase = Phase.NEGOTIATING
        self.now = 0
        self.last_heard = 0
        self.violations: list[Violation] = []
        self.trailer: Optional[CallTrailer] = None
        self.stopped = False
        self._out: list = []

    @property
    def drop_timeout(self) -> int:
        return self.config.drop_timeout(self.interval_length)

    def emit(self, *actions) -> None:
        self._out.extend(actions)

    def handle(self, event: ev.ProtocolEvent) -> list:
        """Process one event; returns the resulting actions in order."""
        self._out = []
        self.now = event.now
        if self.phase is Phase.CLOSED:
            return []
        if isinstance(event, ev.MediaArrived):
            self.on_media(event)
        elif isinstance(event, ev.SigMsgArrived):
            self.last_heard = self.now
            self.on_message(event.message)
        elif isinstance(event, ev.TimerFired):
            self.on_timer(event.timer_id)
        elif isinstance(event, ev.LocalHangup):
            self.on_hangup()
        elif isinstance(event, ev.ClockTick):
            self.check_watchdog()
        return self._out

    def heard(self) -> None:
        self.last_heard = self.now

    def peer_alive(self) -> bool:
        """Heard from the peer within the last interval.

        A late signature from a peer that is otherwise silent is a connection
        problem for the watchdog, not a QoS under-run.
        """
        return self.now - self.last_heard < self.interval_length

    def check_watchdog(self) -> None:
        if self.phase is Phase.CLOSED:
            return
        if self.now - self.last_heard >= self.drop_timeout:
            self.connection_dropped()
        else:
            self.emit(ev.StartTimer(ev.WATCHDOG, self.last_heard + self.drop_timeout))

    def violate(self, violation: Violation) -> bool:
        """Apply the configured reaction; True means abandon the current step."""
        self.violations.append(violation)
        mode = self.config.on_violation
        if mode is OnViolation.IGNORE:
            return False
        self.emit(ev.RaiseViolation(violation))
        if mode is OnViolation.NOTIFY:
            return False
        if mode is OnViolation.STOP_SIGNING:
            self.stopped = True
            return True
        if self.phase not in (Phase.TERMINATING, Phase.CLOSED):
            self.policy_terminate(violation)
        return True

    # overridden by the concrete machines
    def on_media(self, event: ev.MediaArrived) -> None:
        raise NotImplementedError

    def on_message(self, msg) -> None:
        raise NotImplementedError

    def on_timer(self, timer_id: str) -> None:
        raise NotImplementedError

    def on_hangup(self) -> None:
        raise NotImplementedError

    def policy_terminate(self, violation: Violation) -> None:
        raise NotImplementedError

    def connection_dropped(self) -> None:
        raise NotImplementedError
