"""Session runtime: binds the state machine, simulator, and detector.

A session is single-threaded: operator events, detector flags, and
motion-complete timers are all consumed by one loop, so dispatch never runs
concurrently for the same session.  Estimation phases are timed waits with no
observation stream; Scooping and Feeding stream simulator samples through a
streaming detector, and the first latched alarm injects the Anomalous
trigger.  The terminal Feedback event closes the record with the operator's
label.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .fsm import (
    MONITORED_STATES,
    FsmDefinition,
    FsmState,
    HistoryEntry,
    RecordLabel,
    RejectedTriggerError,
    SessionState,
    Trigger,
    dispatch,
)
from .detector import OnlineDetector
from .sequences import (
    AnomalyInjection,
    MultimodalSequence,
    SequenceLabel,
    Task,
    TaskProfile,
    dump_corpus,
    generate_nominal,
    inject_anomaly,
)

RECORD_FORMAT = "feedmon-record"
RECORD_FORMAT_VERSION = 1

# Task each monitored motion state simulates.
PHASE_TASKS = {FsmState.SCOOPING: Task.SCOOPING, FsmState.FEEDING: Task.FEEDING}


@dataclass(frozen=True)
class TelemetryFrame:
    """One monitored motion step as shown on the operator console."""

    session_id: str
    timestep: int
    fsm_state: FsmState
    samples: dict[str, float]
    progress: tuple[float, ...]
    log_likelihood: float | None
    svm_margin: float | None
    flagged: bool


@dataclass(frozen=True)
class DispatchOutcome:
    """Acknowledgement (or rejection) of one operator event."""

    accepted: bool
    state: FsmState
    actions: tuple
    reason: str | None
    valid_triggers: tuple[Trigger, ...]


@dataclass(frozen=True)
class OperatorEvent:
    trigger: Trigger
    done: Callable[[DispatchOutcome], None] | None = None


class ScriptedEvents:
    """Deterministic event source for headless runs.

    ``waiting`` is consumed whenever the session pauses for operator input;
    ``interrupts`` maps (monitored phase ordinal, step index) to a trigger
    delivered mid-motion.  The source reads as closed once both run out.
    """

    def __init__(
        self,
        waiting: Iterable[Trigger] = (),
        interrupts: dict[tuple[int, int], Trigger] | None = None,
    ):
        self._waiting = deque(Trigger(t) for t in waiting)
        self._interrupts = {k: Trigger(v) for k, v in (interrupts or {}).items()}

    @property
    def closed(self) -> bool:
        return not self._waiting and not self._interrupts

    def next_event(self) -> OperatorEvent | None:
        if not self._waiting:
            return None
        return OperatorEvent(self._waiting.popleft())

    def poll_event(self, phase_ordinal: int | None, step: int) -> OperatorEvent | None:
        if phase_ordinal is None:
            return None
        trigger = self._interrupts.pop((phase_ordinal, step), None)
        return OperatorEvent(trigger) if trigger is not None else None


@dataclass(frozen=True)
class PhaseOutcome:
    """What one monitored motion phase actually observed.

    ``samples`` holds only the streamed rows, so an aborted motion records a
    truncated series.  ``stopped_at`` is the number of steps streamed before
    the abort (None when the motion ran to completion) and
    ``injected_onset`` is the ground-truth onset of the planned injection,
    whether or not the stream reached it.
    """

    phase: FsmState
    task: Task
    channels: tuple[str, ...]
    sample_rate_hz: float
    samples: np.ndarray
    injection: AnomalyInjection | None
    injected_onset: int | None
    flagged: bool
    first_detection_step: int | None
    stopped_at: int | None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def n_observed(self) -> int:
        return int(self.samples.shape[0])


@dataclass
class ExecutionRecord:
    """One closed session: label, transition history, and observed phases."""

    session_id: str
    task: Task
    label: str | None
    completed: bool
    history: list[HistoryEntry] = field(default_factory=list)
    phases: list[PhaseOutcome] = field(default_factory=list)


@dataclass(frozen=True)
class SessionConfig:
    """Simulator-side knobs for one session.

    ``injection`` (when set) is applied to the monitored phase whose ordinal
    equals ``anomalous_phase``; all other motion runs are nominal.
    """

    session_id: str
    task: Task
    seed: int = 0
    injection: AnomalyInjection | None = None
    anomalous_phase: int = 0
    estimation_steps: int = 10
    retract_steps: int = 2
    duration_s: float | None = None
    profile: TaskProfile | None = None
    # Wall-clock pause per simulated step; zero runs flat out for tests.
    step_delay_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.estimation_steps < 1:
            raise ValueError("estimation_steps must be at least 1")
        if self.retract_steps < 1:
            raise ValueError("retract_steps must be at least 1")
        if self.step_delay_s < 0:
            raise ValueError("step_delay_s must not be negative")


class SessionRunner:
    """Drives one session from Idle to a closed ExecutionRecord."""

    def __init__(
        self,
        fsm: FsmDefinition,
        config: SessionConfig,
        detector=None,
        *,
        frame_sink: Callable[[TelemetryFrame], None] | None = None,
        state_sink: Callable[[HistoryEntry], None] | None = None,
    ):
        self.fsm = fsm
        self.config = config
        # One model per task: a mixed session only scores phases whose task
        # has a model; a bare detector applies to both tasks.
        if detector is None:
            self.detectors: dict[Task, object] = {}
        elif isinstance(detector, dict):
            self.detectors = {Task(k): v for k, v in detector.items()}
        else:
            self.detectors = {task: detector for task in Task}
        for model in self.detectors.values():
            model._check_fitted()
        self.session = SessionState(config.session_id)
        self._frame_sink = frame_sink
        self._state_sink = state_sink
        self._clock = 0
        self._monitored_ordinal = 0
        self._label: str | None = None
        self._closing = False
        self._phases: list[PhaseOutcome] = []

    # ------------------------------------------------------------- plumbing

    def _tick(self) -> int:
        value = self._clock
        self._clock += 1
        return value

    def handle_event(self, event: OperatorEvent) -> DispatchOutcome:
        """Dispatch one operator event and acknowledge it."""
        try:
            actions = dispatch(self.fsm, self.session, event.trigger, self._tick())
        except RejectedTriggerError as err:
            outcome = DispatchOutcome(
                False, self.session.current_state, (), str(err), self._valid_triggers()
            )
        else:
            for action in actions:
                if isinstance(action, RecordLabel):
                    self._label = action.label
            outcome = DispatchOutcome(
                True, self.session.current_state, tuple(actions), None,
                self._valid_triggers(),
            )
            if self._state_sink is not None:
                self._state_sink(self.session.history[-1])
        if event.done is not None:
            event.done(outcome)
        return outcome

    def _valid_triggers(self) -> tuple[Trigger, ...]:
        return tuple(
            self.fsm.valid_triggers(
                self.session.current_state, self.session.interrupted_phase
            )
        )

    def _auto(self, trigger: Trigger) -> None:
        """Internally generated trigger (timer completion, detector flag)."""
        actions = dispatch(self.fsm, self.session, trigger, self._tick())
        for action in actions:
            if isinstance(action, RecordLabel):
                self._label = action.label
        if self._state_sink is not None:
            self._state_sink(self.session.history[-1])

    # ------------------------------------------------------------- phases

    def _timed_wait(self, steps: int, completes_with: Trigger) -> None:
        """Estimation or retract wait: time passes, no observation stream."""
        state = self.session.current_state
        for _ in range(steps):
            event = self._events.poll_event(None, self._clock)
            if event is not None:
                self.handle_event(event)
                if self.session.current_state is not state:
                    return
            elif self._events.closed and not self._closing:
                if state is FsmState.CORRECTIVE_ACTION:
                    # Already retracting; finish and halt.
                    self._closing = True
                else:
                    self._closing = True
                    self._auto(Trigger.STOP)
                    return
            self._tick()
            if self.config.step_delay_s:
                time.sleep(self.config.step_delay_s)
        self._auto(completes_with)

    def _phase_seeds(self, ordinal: int) -> tuple[int, int]:
        root = np.random.SeedSequence((self.config.seed, ordinal))
        gen, inject = root.generate_state(2)
        return int(gen), int(inject)

    def _planned_sequence(self, phase: FsmState, ordinal: int) -> MultimodalSequence:
        task = PHASE_TASKS[phase]
        gen_seed, inject_seed = self._phase_seeds(ordinal)
        profile = self.config.profile if task is self.config.task else None
        planned = generate_nominal(
            task, self.config.duration_s, gen_seed, profile=profile
        )
        injection = self.config.injection
        if injection is not None and ordinal == self.config.anomalous_phase:
            planned = inject_anomaly(planned, injection, inject_seed, profile=profile)
        return planned

    def _run_monitored(self, phase: FsmState) -> None:
        ordinal = self._monitored_ordinal
        self._monitored_ordinal += 1
        planned = self._planned_sequence(phase, ordinal)
        online = None
        model = self.detectors.get(planned.task)
        if model is not None:
            expected = model.hmm_.channels_
            if planned.channels != expected:
                raise ValueError(
                    f"simulator channels {planned.channels} do not match the "
                    f"detector's layout {expected}"
                )
            online = OnlineDetector(model)

        observed = 0
        stopped_at: int | None = None
        for t in range(planned.n_steps):
            event = self._events.poll_event(ordinal, t)
            if event is not None:
                self.handle_event(event)
                if self.session.current_state is not phase:
                    stopped_at = observed
                    break
            elif self._events.closed and not self._closing:
                self._closing = True
                self._auto(Trigger.STOP)
                stopped_at = observed
                break

            timestep = self._tick()
            result = online.step(planned.samples[t]) if online is not None else None
            observed = t + 1
            if self._frame_sink is not None:
                self._frame_sink(self._frame(phase, timestep, planned, t, result))
            if result is not None and result.alarm:
                self._auto(Trigger.ANOMALOUS)
                stopped_at = observed
                break
            if self.config.step_delay_s:
                time.sleep(self.config.step_delay_s)
        else:
            self._auto(Trigger.MOTION_COMPLETE)

        self._phases.append(
            PhaseOutcome(
                phase=phase,
                task=planned.task,
                channels=planned.channels,
                sample_rate_hz=planned.sample_rate_hz,
                samples=planned.samples[:observed],
                injection=(
                    self.config.injection
                    if planned.label is SequenceLabel.ANOMALOUS
                    else None
                ),
                injected_onset=planned.anomaly_onset,
                flagged=bool(online.alarm) if online is not None else False,
                first_detection_step=online.alarm_step if online is not None else None,
                stopped_at=stopped_at,
            )
        )

    def _frame(self, phase, timestep, planned, t, result) -> TelemetryFrame:
        samples = {
            name: float(planned.samples[t, i])
            for i, name in enumerate(planned.channels)
        }
        if result is None:
            return TelemetryFrame(
                self.session.session_id, timestep, phase, samples,
                (), None, None, False,
            )
        return TelemetryFrame(
            self.session.session_id,
            timestep,
            phase,
            samples,
            tuple(float(p) for p in result.features.progress),
            float(result.features.log_likelihood),
            float(result.score),
            bool(result.alarm),
        )

    # ------------------------------------------------------------- main loop

    def run(self, events) -> ExecutionRecord:
        self._events = events
        while True:
            if self._label is not None:
                break
            state = self.session.current_state
            if self._closing and state in (FsmState.HALTED, FsmState.IDLE):
                break
            if state in (
                FsmState.BOWL_LOCATION_ESTIMATION,
                FsmState.MOUTH_LOCATION_ESTIMATION,
            ):
                self._timed_wait(self.config.estimation_steps, Trigger.MOTION_COMPLETE)
            elif state in MONITORED_STATES:
                self._run_monitored(state)
            elif state is FsmState.CORRECTIVE_ACTION:
                self._timed_wait(self.config.retract_steps, Trigger.MOTION_COMPLETE)
            else:
                event = events.next_event()
                if event is None:
                    self._closing = True
                    break
                self.handle_event(event)
        return ExecutionRecord(
            session_id=self.session.session_id,
            task=self.config.task,
            label=self._label,
            completed=self._label is not None,
            history=list(self.session.history),
            phases=list(self._phases),
        )


def run_session(
    fsm: FsmDefinition,
    config: SessionConfig,
    detector,
    events,
    *,
    frame_sink=None,
    state_sink=None,
) -> tuple[SessionState, ExecutionRecord]:
    """Run one session to completion; returns the final state and record."""
    runner = SessionRunner(
        fsm, config, detector, frame_sink=frame_sink, state_sink=state_sink
    )
    record = runner.run(events)
    return runner.session, record


# --- record serialization (line-delimited JSON) ----------------------------


def record_to_dict(record: ExecutionRecord) -> dict:
    return {
        "format": RECORD_FORMAT,
        "version": RECORD_FORMAT_VERSION,
        "session_id": record.session_id,
        "task": record.task.value,
        "label": record.label,
        "completed": record.completed,
        "history": [
            {
                "timestamp": entry.timestamp,
                "trigger": entry.trigger.value,
                "from": entry.from_state.value,
                "to": entry.to_state.value,
            }
            for entry in record.history
        ],
        "phases": [
            {
                "phase": p.phase.value,
                "task": p.task.value,
                "channels": list(p.channels),
                "sample_rate_hz": p.sample_rate_hz,
                "samples": [list(map(float, row)) for row in p.samples],
                "injection": (
                    {
                        "kind": p.injection.kind.value,
                        "onset_phase": p.injection.onset_phase,
                        "magnitude": p.injection.magnitude,
                    }
                    if p.injection is not None
                    else None
                ),
                "injected_onset": p.injected_onset,
                "flagged": p.flagged,
                "first_detection_step": p.first_detection_step,
                "stopped_at": p.stopped_at,
            }
            for p in record.phases
        ],
    }


def record_from_dict(doc: dict) -> ExecutionRecord:
    if doc.get("format") != RECORD_FORMAT:
        raise ValueError(
            f"format: expected {RECORD_FORMAT!r}, got {doc.get('format')!r}"
        )
    if doc.get("version") != RECORD_FORMAT_VERSION:
        raise ValueError(f"version: unsupported value {doc.get('version')!r}")
    if doc.get("label") not in (None, "Success", "Failure"):
        raise ValueError(f"label: unsupported value {doc.get('label')!r}")
    history = [
        HistoryEntry(
            timestamp=float(e["timestamp"]),
            trigger=Trigger(e["trigger"]),
            from_state=FsmState(e["from"]),
            to_state=FsmState(e["to"]),
        )
        for e in doc["history"]
    ]
    phases = []
    for p in doc["phases"]:
        injection = p.get("injection")
        samples = np.asarray(p["samples"], dtype=np.float64)
        if samples.size == 0:
            samples = samples.reshape(0, len(p["channels"]))
        phases.append(
            PhaseOutcome(
                phase=FsmState(p["phase"]),
                task=Task(p["task"]),
                channels=tuple(p["channels"]),
                sample_rate_hz=float(p["sample_rate_hz"]),
                samples=samples,
                injection=AnomalyInjection(**injection) if injection else None,
                injected_onset=p.get("injected_onset"),
                flagged=bool(p["flagged"]),
                first_detection_step=p.get("first_detection_step"),
                stopped_at=p.get("stopped_at"),
            )
        )
    return ExecutionRecord(
        session_id=doc["session_id"],
        task=Task(doc["task"]),
        label=doc["label"],
        completed=bool(doc["completed"]),
        history=history,
        phases=phases,
    )


def phase_sequences(record: ExecutionRecord) -> list[MultimodalSequence]:
    """Labeled training sequences for one closed record.

    The operator's verdict decides the labels: on Success every phase exports
    as Nominal; on Failure the phase that was cut short (or, failing that,
    the last one) exports as Anomalous with the best available onset, in
    order of trust: injection ground truth, first detector flag, the abort
    step, then 0.  Phases too short to train on (under 2 steps) are skipped,
    as are unlabeled records.
    """
    if record.label not in ("Success", "Failure"):
        return []
    anomalous_index = None
    if record.label == "Failure" and record.phases:
        aborted = [
            i
            for i, p in enumerate(record.phases)
            if p.flagged or p.stopped_at is not None
        ]
        anomalous_index = aborted[-1] if aborted else len(record.phases) - 1

    sequences = []
    for i, phase in enumerate(record.phases):
        if phase.n_observed < 2:
            continue
        if i == anomalous_index:
            onset = 0
            if phase.injected_onset is not None:
                onset = phase.injected_onset
            elif phase.first_detection_step is not None:
                onset = phase.first_detection_step
            elif phase.stopped_at is not None:
                onset = phase.stopped_at - 1
            onset = int(min(max(onset, 0), phase.n_observed - 1))
            sequences.append(
                MultimodalSequence(
                    task=phase.task,
                    sample_rate_hz=phase.sample_rate_hz,
                    channels=phase.channels,
                    samples=phase.samples,
                    label=SequenceLabel.ANOMALOUS,
                    anomaly_onset=onset,
                    anomaly_kind=phase.injection.kind if phase.injection else None,
                )
            )
        else:
            sequences.append(
                MultimodalSequence(
                    task=phase.task,
                    sample_rate_hz=phase.sample_rate_hz,
                    channels=phase.channels,
                    samples=phase.samples,
                    label=SequenceLabel.NOMINAL,
                )
            )
    return sequences


class RecordStore:
    """Append-only line-delimited record log with a single writer."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.path = self.directory / "records.jsonl"
        self._lock = threading.Lock()

    def append(self, record: ExecutionRecord) -> None:
        line = json.dumps(record_to_dict(record), sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def records(self) -> list[ExecutionRecord]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as handle:
            return [record_from_dict(json.loads(line)) for line in handle if line.strip()]

    def summaries(self, task: Task | None = None, label: str | None = None) -> list[dict]:
        rows = []
        for record in self._filtered(task, label):
            rows.append(
                {
                    "session_id": record.session_id,
                    "task": record.task.value,
                    "label": record.label,
                    "completed": record.completed,
                    "n_phases": len(record.phases),
                    "flagged": any(p.flagged for p in record.phases),
                }
            )
        return rows

    def export_corpus(self, task: Task | None = None, label: str | None = None) -> str:
        """Training corpus for the filtered records, in simulator format.

        Byte-stable for a fixed store: records export in append order and
        serialization is key-sorted.
        """
        sequences = []
        for record in self._filtered(task, label):
            sequences.extend(phase_sequences(record))
        return dump_corpus(sequences)

    def _filtered(self, task, label) -> list[ExecutionRecord]:
        task = Task(task) if task is not None else None
        records = []
        for record in self.records():
            if task is not None and record.task is not task:
                continue
            if label is not None and record.label != label:
                continue
            records.append(record)
        return records
