"""Finite-state task executor for scooping/feeding sessions.

The transition table ships as package data so the arrow set can be amended
without code changes.  Dispatch is deterministic: the only context-dependent
edge is Resume, whose target is the estimation state of the phase that was
interrupted, and that phase is itself a pure fold over the session history,
so replaying a history always reproduces the recorded states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

RESUME_SENTINEL = "@resume"


class FsmState(str, Enum):
    IDLE = "Idle"
    BOWL_LOCATION_ESTIMATION = "BowlLocationEstimation"
    SCOOPING = "Scooping"
    SCOOP_FEEDBACK_WAIT = "ScoopFeedbackWait"
    MOUTH_LOCATION_ESTIMATION = "MouthLocationEstimation"
    FEEDING = "Feeding"
    FEED_FEEDBACK_WAIT = "FeedFeedbackWait"
    CORRECTIVE_ACTION = "CorrectiveAction"
    HALTED = "Halted"


class Trigger(str, Enum):
    START_SCOOPING = "Start_Scooping"
    START_FEEDING = "Start_Feeding"
    ANOMALOUS = "Anomalous"
    YP = "Yp"
    YN = "Yn"
    STOP = "Stop"
    RESUME = "Resume"
    FEEDBACK_SUCCESS = "Feedback_Success"
    FEEDBACK_FAILURE = "Feedback_Failure"
    MOTION_COMPLETE = "MotionComplete"


# States in which the robot is moving and the arm must retract on a fault.
MOTION_STATES = frozenset(
    {
        FsmState.BOWL_LOCATION_ESTIMATION,
        FsmState.SCOOPING,
        FsmState.MOUTH_LOCATION_ESTIMATION,
        FsmState.FEEDING,
    }
)
# Motion states whose observation stream feeds the anomaly detector.
MONITORED_STATES = frozenset({FsmState.SCOOPING, FsmState.FEEDING})
FEEDBACK_TRIGGERS = frozenset({Trigger.FEEDBACK_SUCCESS, Trigger.FEEDBACK_FAILURE})


@dataclass(frozen=True)
class StartMotion:
    phase: FsmState


@dataclass(frozen=True)
class RetractArm:
    pass


@dataclass(frozen=True)
class RecordLabel:
    label: str  # "Success" or "Failure"


@dataclass(frozen=True)
class HistoryEntry:
    timestamp: float
    trigger: Trigger
    from_state: FsmState
    to_state: FsmState


class RejectedTriggerError(Exception):
    """Trigger not valid in the current state; the session is unchanged."""

    def __init__(self, state: FsmState, trigger: Trigger):
        self.state = state
        self.trigger = trigger
        super().__init__(f"invalid trigger for state: {trigger.value} in {state.value}")


class ReplayMismatchError(Exception):
    """History does not fold back to its recorded states."""

    def __init__(self, index: int, detail: str):
        self.index = index
        self.detail = detail
        super().__init__(f"replay mismatch at index {index}: {detail}")


class FsmDefinition:
    """Validated transition table plus the Resume target map."""

    def __init__(self, initial_state, transitions, resume_targets):
        self.initial_state = FsmState(initial_state)
        self.transitions: dict[tuple[FsmState, Trigger], FsmState | str] = {}
        for (state, trigger), target in transitions.items():
            key = (FsmState(state), Trigger(trigger))
            if key in self.transitions:
                raise ValueError(
                    f"transitions: duplicate edge for ({key[0].value}, {key[1].value})"
                )
            self.transitions[key] = (
                target if target == RESUME_SENTINEL else FsmState(target)
            )
        self.resume_targets = {
            FsmState(k): FsmState(v) for k, v in resume_targets.items()
        }
        self._validate()

    def _validate(self) -> None:
        outgoing = {state: 0 for state in FsmState}
        for (state, _), target in self.transitions.items():
            outgoing[state] += 1
            if target == RESUME_SENTINEL and not self.resume_targets:
                raise ValueError("transitions: resume edge present but no resume_targets")
        for state in FsmState:
            if state is FsmState.HALTED:
                continue
            if outgoing[state] == 0:
                raise ValueError(f"transitions: state {state.value} has no outgoing edge")
        for motion in (FsmState.SCOOPING, FsmState.FEEDING):
            for trigger in (Trigger.ANOMALOUS, Trigger.STOP):
                if self.transitions.get((motion, trigger)) is not FsmState.CORRECTIVE_ACTION:
                    raise ValueError(
                        f"transitions: ({motion.value}, {trigger.value}) must lead to "
                        f"{FsmState.CORRECTIVE_ACTION.value}"
                    )
        for phase, target in self.resume_targets.items():
            if phase not in MOTION_STATES:
                raise ValueError(f"resume_targets: {phase.value} is not a motion state")
            if target not in MOTION_STATES:
                raise ValueError(f"resume_targets: target {target.value} is not a motion state")

    def target(self, state: FsmState, trigger: Trigger, interrupted_phase: FsmState | None):
        """Next state, or None when the trigger is invalid here."""
        raw = self.transitions.get((state, trigger))
        if raw is None:
            return None
        if raw == RESUME_SENTINEL:
            if interrupted_phase is None:
                return None
            return self.resume_targets.get(interrupted_phase)
        return raw

    def valid_triggers(self, state: FsmState, interrupted_phase: FsmState | None):
        """Triggers dispatch would accept in this state, sorted by name."""
        accepted = [
            trigger
            for trigger in Trigger
            if self.target(state, trigger, interrupted_phase) is not None
        ]
        return sorted(accepted, key=lambda t: t.value)

    @classmethod
    def from_dict(cls, doc: dict) -> "FsmDefinition":
        if doc.get("version") != 1:
            raise ValueError(f"version: unsupported value {doc.get('version')!r}")
        states = set(doc["states"])
        if states != {s.value for s in FsmState}:
            raise ValueError("states: does not match the expected state set")
        triggers = set(doc["triggers"])
        if triggers != {t.value for t in Trigger}:
            raise ValueError("triggers: does not match the expected trigger set")
        transitions = {}
        for edge in doc["transitions"]:
            transitions[(edge["from"], edge["trigger"])] = edge["to"]
        if len(transitions) != len(doc["transitions"]):
            raise ValueError("transitions: duplicate (from, trigger) edge")
        return cls(doc["initial_state"], transitions, doc.get("resume_targets", {}))

    @classmethod
    def load_default(cls) -> "FsmDefinition":
        text = resources.files("feedmon.data").joinpath("fsm_transitions.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass
class SessionState:
    """One live session's mutable FSM context.

    ``interrupted_phase`` remembers the motion state that Stop/Anomalous cut
    short; Resume re-enters that phase's estimation state with a fresh pose.
    """

    session_id: str
    current_state: FsmState = FsmState.IDLE
    history: list[HistoryEntry] = field(default_factory=list)
    rejections: list[tuple[float, Trigger, FsmState]] = field(default_factory=list)
    detector_flag: bool = False
    interrupted_phase: FsmState | None = None

    def last_timestamp(self) -> float:
        return self.history[-1].timestamp if self.history else float("-inf")


def dispatch(
    fsm: FsmDefinition,
    session: SessionState,
    trigger: Trigger,
    timestamp: float | None = None,
):
    """Apply one trigger; returns the emitted actions.

    Raises RejectedTriggerError on an invalid trigger (the session is
    unchanged apart from the rejection log) and ValueError on a timestamp
    that does not advance.
    """
    trigger = Trigger(trigger)
    if timestamp is None:
        last = session.last_timestamp()
        timestamp = 0.0 if last == float("-inf") else last + 1.0
    if timestamp <= session.last_timestamp():
        raise ValueError(
            f"timestamp {timestamp} does not advance past {session.last_timestamp()}"
        )
    source = session.current_state
    target = fsm.target(source, trigger, session.interrupted_phase)
    if target is None:
        session.rejections.append((timestamp, trigger, source))
        raise RejectedTriggerError(source, trigger)

    if source in MOTION_STATES and target is FsmState.CORRECTIVE_ACTION:
        session.interrupted_phase = source
    if target is FsmState.IDLE:
        session.interrupted_phase = None
        session.detector_flag = False
    if trigger is Trigger.ANOMALOUS:
        session.detector_flag = True

    session.history.append(HistoryEntry(timestamp, trigger, source, target))
    session.current_state = target

    actions: list = []
    # The Stop self-loop in CorrectiveAction is an idempotent acknowledgement;
    # the arm is already retracting, so no second retract is issued.
    if target is FsmState.CORRECTIVE_ACTION and source is not FsmState.CORRECTIVE_ACTION:
        actions.append(RetractArm())
    if target in MOTION_STATES:
        actions.append(StartMotion(target))
    if trigger in FEEDBACK_TRIGGERS:
        label = "Success" if trigger is Trigger.FEEDBACK_SUCCESS else "Failure"
        actions.append(RecordLabel(label))
    return actions


def replay(fsm: FsmDefinition, history) -> FsmState:
    """Fold dispatch over a recorded history and return the final state.

    Raises ReplayMismatchError at the first entry whose source, edge, or
    target disagrees with the table.
    """
    state = fsm.initial_state
    interrupted: FsmState | None = None
    last_timestamp = float("-inf")
    for index, entry in enumerate(history):
        if entry.from_state is not state:
            raise ReplayMismatchError(
                index,
                f"entry starts at {entry.from_state.value} but replay is in {state.value}",
            )
        if entry.timestamp <= last_timestamp:
            raise ReplayMismatchError(index, "timestamp does not advance")
        target = fsm.target(state, entry.trigger, interrupted)
        if target is None:
            raise ReplayMismatchError(
                index,
                f"trigger {entry.trigger.value} is invalid in {state.value}",
            )
        if target is not entry.to_state:
            raise ReplayMismatchError(
                index,
                f"table gives {target.value} but history records {entry.to_state.value}",
            )
        if state in MOTION_STATES and target is FsmState.CORRECTIVE_ACTION:
            interrupted = state
        if target is FsmState.IDLE:
            interrupted = None
        state = target
        last_timestamp = entry.timestamp
    return state
