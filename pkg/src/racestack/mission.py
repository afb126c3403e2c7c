"""Autonomous-system state machine and mission-mode latch."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field


class AsState(enum.Enum):
    OFF = "off"
    READY = "ready"
    DRIVING = "driving"
    EMERGENCY = "emergency"
    FINISHED = "finished"


class MissionMode(enum.IntEnum):
    DETECTION_DRIVE = 0
    TRACKING_DRIVE = 1


class MissionEvent(enum.Enum):
    ASMS_ON = "asms_on"
    SYSTEM_CHECKS_PASSED = "system_checks_passed"
    GO_SIGNAL = "go_signal"
    ESTOP = "estop"
    SUBSYSTEM_FAILURE = "subsystem_failure"
    LOCALIZATION_LOST = "localization_lost"
    LAP_LOOP_DETECTED = "lap_loop_detected"
    MISSION_COMPLETE = "mission_complete"
    RESET = "reset"


def transition(s: AsState, e: MissionEvent) -> AsState:
    """Total transition function; pairs not listed below are self-loops.

    Leaving ``OFF`` needs the checks to pass once the master switch is on;
    ``ASMS_ON`` on its own is acknowledged without a state change.
    """
    if e in (MissionEvent.ESTOP, MissionEvent.SUBSYSTEM_FAILURE) and s is not AsState.OFF:
        return AsState.EMERGENCY
    if s is AsState.OFF and e is MissionEvent.SYSTEM_CHECKS_PASSED:
        return AsState.READY
    if s is AsState.READY and e is MissionEvent.GO_SIGNAL:
        return AsState.DRIVING
    if s is AsState.DRIVING and e is MissionEvent.MISSION_COMPLETE:
        return AsState.FINISHED
    if s is AsState.EMERGENCY and e is MissionEvent.RESET:
        return AsState.OFF
    return s


def mode_update(mode: MissionMode, loop_detected: bool) -> MissionMode:
    if loop_detected:
        return MissionMode.TRACKING_DRIVE
    return mode


@dataclass
class StateMachine:
    """Sequential owner of the AS state; keeps a timestamped transition log.

    ``SYSTEM_CHECKS_PASSED`` only moves ``OFF`` to ``READY`` after ``ASMS_ON``
    has been seen, which is how the combined condition is enforced.
    """

    state: AsState = AsState.OFF
    mode: MissionMode = MissionMode.DETECTION_DRIVE
    asms_on: bool = False
    log: list = field(default_factory=list)

    def handle(self, event: MissionEvent, t: float = 0.0) -> AsState:
        if event is MissionEvent.ASMS_ON:
            self.asms_on = True
        if event is MissionEvent.SYSTEM_CHECKS_PASSED and not self.asms_on:
            new = self.state
        else:
            new = transition(self.state, event)
        if event is MissionEvent.RESET and self.state is AsState.EMERGENCY:
            self.asms_on = False
            self.mode = MissionMode.DETECTION_DRIVE
        if event is MissionEvent.LAP_LOOP_DETECTED and self.state is AsState.DRIVING:
            self.mode = mode_update(self.mode, True)
        self.log.append((float(t), self.state, event, new))
        self.state = new
        return new

    def log_lines(self) -> list[str]:
        return [f"{t:.3f} {a.value} {e.value} {b.value}" for t, a, e, b in self.log]
