"""Network API for the operator console.

Sessions run in one worker thread each; HTTP command handlers hand the
trigger to that thread through the session's event queue and wait for the
acknowledgement, so dispatch stays single-writer per session.  Telemetry is
an append-only per-session message log that websocket subscribers replay and
then follow, which keeps fan-out read-only and ordering exact.
"""

import asyncio
import itertools
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue
from typing import Optional

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from . import __version__
from .detector import load_detector
from .fsm import (
    FsmDefinition,
    FsmState,
    HistoryEntry,
    RecordLabel,
    RetractArm,
    StartMotion,
    Trigger,
)
from .runner import (
    OperatorEvent,
    RecordStore,
    SessionConfig,
    SessionRunner,
    TelemetryFrame,
)
from .sequences import AnomalyInjection, AnomalyKind, Task

API_VERSION = 1

# Console verbs; Start picks the trigger matching the session's task and
# SelectTask is the session-creation verb, not a dispatchable trigger.
VERB_TRIGGERS = {
    "Stop": Trigger.STOP,
    "Resume": Trigger.RESUME,
    "FeedbackYp": Trigger.YP,
    "FeedbackYn": Trigger.YN,
    "FeedbackSuccess": Trigger.FEEDBACK_SUCCESS,
    "FeedbackFailure": Trigger.FEEDBACK_FAILURE,
}
START_TRIGGERS = {
    Task.SCOOPING: Trigger.START_SCOOPING,
    Task.FEEDING: Trigger.START_FEEDING,
}
VERBS = (
    "SelectTask",
    "Start",
    "Stop",
    "Resume",
    "FeedbackYp",
    "FeedbackYn",
    "FeedbackSuccess",
    "FeedbackFailure",
)

COMMAND_TIMEOUT_S = 10.0


def verbs_for(triggers, task: Task) -> list[str]:
    """Console verbs enabled for a trigger set, in declaration order."""
    triggers = set(triggers)
    verbs = []
    for verb in VERBS:
        if verb == "SelectTask":
            continue
        if verb == "Start":
            if START_TRIGGERS[task] in triggers:
                verbs.append(verb)
        elif VERB_TRIGGERS[verb] in triggers:
            verbs.append(verb)
    return verbs


def api_schema(fsm: FsmDefinition) -> dict:
    """Machine-readable console contract: verbs, states, button enabling.

    The Resume rows read as enabled in CorrectiveAction and Halted because
    those states are only reachable with an interrupted phase on record.
    """
    button_enable = {}
    for state in FsmState:
        enabled = []
        for verb in VERBS:
            if verb == "SelectTask":
                continue
            if verb == "Start":
                ok = any(
                    (state, trigger) in fsm.transitions
                    for trigger in START_TRIGGERS.values()
                )
            else:
                ok = (state, VERB_TRIGGERS[verb]) in fsm.transitions
            if ok:
                enabled.append(verb)
        button_enable[state.value] = enabled
    return {
        "version": API_VERSION,
        "states": [s.value for s in FsmState],
        "tasks": [t.value for t in Task],
        "verbs": list(VERBS),
        "global_verbs": ["SelectTask"],
        "verb_triggers": {
            **{verb: trigger.value for verb, trigger in VERB_TRIGGERS.items()},
            "Start": {t.value: trig.value for t, trig in START_TRIGGERS.items()},
        },
        "button_enable": button_enable,
        "endpoints": {
            "health": {"method": "GET", "path": "/api/health"},
            "schema": {"method": "GET", "path": "/api/schema"},
            "create_session": {"method": "POST", "path": "/api/sessions"},
            "list_sessions": {"method": "GET", "path": "/api/sessions"},
            "get_session": {"method": "GET", "path": "/api/sessions/{session_id}"},
            "command": {"method": "POST", "path": "/api/sessions/{session_id}/commands"},
            "telemetry": {"method": "WS", "path": "/api/sessions/{session_id}/telemetry"},
            "list_records": {"method": "GET", "path": "/api/records"},
            "export_corpus": {"method": "GET", "path": "/api/records/export"},
            "upload_model": {"method": "POST", "path": "/api/models/{task}"},
            "list_models": {"method": "GET", "path": "/api/models"},
        },
        "telemetry": {
            "message_types": ["state", "frame", "closed", "error"],
            "frame_fields": [
                "version",
                "type",
                "session_id",
                "timestep",
                "fsm_state",
                "samples",
                "progress",
                "log_likelihood",
                "svm_margin",
                "flagged",
            ],
            "state_fields": [
                "version",
                "type",
                "session_id",
                "timestamp",
                "trigger",
                "from",
                "to",
                "state",
                "valid_verbs",
            ],
        },
        "rejection": {"status": 409, "fields": ["version", "reason", "state"]},
    }


# --------------------------------------------------------------- requests


class AnomalySpec(BaseModel):
    kind: AnomalyKind
    onset_phase: float = Field(ge=0.0, le=1.0)
    magnitude: float = Field(default=2.0, ge=0.0)


class CreateSessionRequest(BaseModel):
    version: int = API_VERSION
    task: Task
    seed: int = 0
    duration_s: Optional[float] = Field(default=None, gt=0.0)
    anomaly: Optional[AnomalySpec] = None
    anomalous_phase: int = Field(default=0, ge=0)


class CommandRequest(BaseModel):
    version: int = API_VERSION
    verb: str

    def trigger_for(self, task: Task) -> Trigger:
        if self.verb == "Start":
            return START_TRIGGERS[task]
        try:
            return VERB_TRIGGERS[self.verb]
        except KeyError:
            raise HTTPException(
                status_code=400,
                detail={
                    "version": API_VERSION,
                    "reason": (
                        "unknown verb"
                        if self.verb != "SelectTask"
                        else "SelectTask creates a session; POST /api/sessions"
                    ),
                    "verb": self.verb,
                },
            ) from None


# --------------------------------------------------------------- plumbing


class QueueEvents:
    """Thread-safe event source feeding one session's worker loop."""

    _SENTINEL = object()

    def __init__(self):
        self._queue: Queue = Queue()
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed and self._queue.empty()

    def close(self) -> None:
        self._closed = True
        self._queue.put(self._SENTINEL)

    def put(self, event: OperatorEvent) -> None:
        self._queue.put(event)

    def next_event(self) -> Optional[OperatorEvent]:
        while True:
            try:
                item = self._queue.get(timeout=0.05)
            except Empty:
                if self._closed:
                    return None
                continue
            if item is self._SENTINEL:
                return None
            return item

    def poll_event(self, phase_ordinal, step) -> Optional[OperatorEvent]:
        try:
            item = self._queue.get_nowait()
        except Empty:
            return None
        if item is self._SENTINEL:
            return None
        return item


class _Reply:
    def __init__(self):
        self._ready = threading.Event()
        self.outcome = None

    def done(self, outcome) -> None:
        self.outcome = outcome
        self._ready.set()

    def wait(self, timeout: float):
        if not self._ready.wait(timeout):
            return None
        return self.outcome


def _action_payload(action) -> dict:
    if isinstance(action, StartMotion):
        return {"action": "StartMotion", "phase": action.phase.value}
    if isinstance(action, RetractArm):
        return {"action": "RetractArm"}
    if isinstance(action, RecordLabel):
        return {"action": "RecordLabel", "label": action.label}
    return {"action": type(action).__name__}


class SessionHandle:
    """One live (or finished) session: worker thread, queue, message log."""

    def __init__(self, runner: SessionRunner, events: QueueEvents):
        self.runner = runner
        self.events = events
        self.messages: list[dict] = []
        self.condition = threading.Condition()
        self.closed = False
        self.record = None
        self.error: Optional[str] = None
        self.thread: Optional[threading.Thread] = None

    @property
    def session_id(self) -> str:
        return self.runner.config.session_id

    def emit(self, message: dict) -> None:
        with self.condition:
            self.messages.append(message)
            self.condition.notify_all()

    def finish(self) -> None:
        with self.condition:
            self.closed = True
            self.condition.notify_all()

    def frame_message(self, frame: TelemetryFrame) -> dict:
        return {
            "version": API_VERSION,
            "type": "frame",
            "session_id": frame.session_id,
            "timestep": frame.timestep,
            "fsm_state": frame.fsm_state.value,
            "samples": frame.samples,
            "progress": list(frame.progress),
            "log_likelihood": frame.log_likelihood,
            "svm_margin": frame.svm_margin,
            "flagged": frame.flagged,
        }

    def state_message(self, entry: HistoryEntry) -> dict:
        session = self.runner.session
        return {
            "version": API_VERSION,
            "type": "state",
            "session_id": self.session_id,
            "timestamp": entry.timestamp,
            "trigger": entry.trigger.value,
            "from": entry.from_state.value,
            "to": entry.to_state.value,
            "state": entry.to_state.value,
            "valid_verbs": verbs_for(
                self.runner.fsm.valid_triggers(
                    session.current_state, session.interrupted_phase
                ),
                self.runner.config.task,
            ),
        }

    def detail(self) -> dict:
        session = self.runner.session
        return {
            "version": API_VERSION,
            "session_id": self.session_id,
            "task": self.runner.config.task.value,
            "state": session.current_state.value,
            "closed": self.closed,
            "label": self.record.label if self.record else None,
            "detector_flag": session.detector_flag,
            "error": self.error,
            "valid_verbs": verbs_for(
                self.runner.fsm.valid_triggers(
                    session.current_state, session.interrupted_phase
                ),
                self.runner.config.task,
            ),
            "history": [
                {
                    "timestamp": e.timestamp,
                    "trigger": e.trigger.value,
                    "from": e.from_state.value,
                    "to": e.to_state.value,
                }
                for e in session.history
            ],
            "rejections": [
                {"timestamp": ts, "trigger": trig.value, "state": state.value}
                for ts, trig, state in session.rejections
            ],
        }

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "task": self.runner.config.task.value,
            "state": self.runner.session.current_state.value,
            "closed": self.closed,
            "label": self.record.label if self.record else None,
        }


@dataclass
class ServiceConfig:
    """Server-side wiring: storage, transition table, models, pacing."""

    record_dir: Path
    fsm: FsmDefinition = field(default_factory=FsmDefinition.load_default)
    models: dict = field(default_factory=dict)
    max_live_sessions: int = 1
    estimation_steps: int = 10
    retract_steps: int = 2
    step_delay_s: float = 0.0
    default_duration_s: Optional[float] = None

    def __post_init__(self):
        self.record_dir = Path(self.record_dir)
        self.models = {Task(k): v for k, v in self.models.items()}
        if self.max_live_sessions < 1:
            raise ValueError("max_live_sessions must be at least 1")


class SessionManager:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.store = RecordStore(config.record_dir)
        self.models = dict(config.models)
        self.sessions: dict[str, SessionHandle] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def live_count(self) -> int:
        return sum(1 for handle in self.sessions.values() if not handle.closed)

    def create(self, request: CreateSessionRequest) -> SessionHandle:
        with self._lock:
            if self.live_count() >= self.config.max_live_sessions:
                raise HTTPException(
                    status_code=409,
                    detail={
                        "version": API_VERSION,
                        "reason": "live session limit reached",
                        "limit": self.config.max_live_sessions,
                    },
                )
            session_id = f"session-{next(self._ids):04d}"
            injection = None
            if request.anomaly is not None:
                injection = AnomalyInjection(
                    kind=request.anomaly.kind,
                    onset_phase=request.anomaly.onset_phase,
                    magnitude=request.anomaly.magnitude,
                )
            config = SessionConfig(
                session_id=session_id,
                task=request.task,
                seed=request.seed,
                injection=injection,
                anomalous_phase=request.anomalous_phase,
                estimation_steps=self.config.estimation_steps,
                retract_steps=self.config.retract_steps,
                duration_s=request.duration_s or self.config.default_duration_s,
                step_delay_s=self.config.step_delay_s,
            )
            events = QueueEvents()
            holder: list[SessionHandle] = []
            runner = SessionRunner(
                self.config.fsm,
                config,
                dict(self.models),
                frame_sink=lambda frame: holder[0].emit(
                    holder[0].frame_message(frame)
                ),
                state_sink=lambda entry: holder[0].emit(
                    holder[0].state_message(entry)
                ),
            )
            handle = SessionHandle(runner, events)
            holder.append(handle)
            thread = threading.Thread(
                target=self._work, args=(handle,), name=session_id, daemon=True
            )
            handle.thread = thread
            self.sessions[session_id] = handle
            thread.start()
            return handle

    def _work(self, handle: SessionHandle) -> None:
        try:
            record = handle.runner.run(handle.events)
        except Exception as err:  # pragma: no cover - defensive
            handle.error = str(err)
            handle.emit(
                {
                    "version": API_VERSION,
                    "type": "error",
                    "session_id": handle.session_id,
                    "reason": str(err),
                }
            )
        else:
            handle.record = record
            self.store.append(record)
        finally:
            handle.finish()

    def get(self, session_id: str) -> SessionHandle:
        handle = self.sessions.get(session_id)
        if handle is None:
            raise HTTPException(
                status_code=404,
                detail={"version": API_VERSION, "reason": "unknown session"},
            )
        return handle

    def shutdown(self) -> None:
        for handle in self.sessions.values():
            if not handle.closed:
                handle.events.close()
        for handle in self.sessions.values():
            if handle.thread is not None:
                handle.thread.join(timeout=5.0)


# --------------------------------------------------------------- the app


def create_app(config: ServiceConfig) -> FastAPI:
    manager = SessionManager(config)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        manager.shutdown()

    app = FastAPI(title="feedmon", version=__version__, lifespan=lifespan)
    app.state.manager = manager
    schema = api_schema(config.fsm)

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request, exc):
        errors = [
            {"loc": [str(part) for part in err.get("loc", ())], "msg": err.get("msg", "")}
            for err in exc.errors()
        ]
        return JSONResponse(
            status_code=400,
            content={
                "version": API_VERSION,
                "reason": "invalid request",
                "errors": errors,
            },
        )

    @app.get("/api/health")
    def health():
        return {
            "version": API_VERSION,
            "status": "ok",
            "package_version": __version__,
        }

    @app.get("/api/schema")
    def get_schema():
        return schema

    @app.post("/api/sessions", status_code=201)
    def create_session(request: CreateSessionRequest):
        handle = manager.create(request)
        body = handle.summary()
        body["version"] = API_VERSION
        body["valid_verbs"] = verbs_for(
            config.fsm.valid_triggers(FsmState.IDLE, None), request.task
        )
        return body

    @app.get("/api/sessions")
    def list_sessions():
        return {
            "version": API_VERSION,
            "sessions": [h.summary() for h in manager.sessions.values()],
        }

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str):
        return manager.get(session_id).detail()

    @app.post("/api/sessions/{session_id}/commands")
    def post_command(session_id: str, command: CommandRequest):
        handle = manager.get(session_id)
        trigger = command.trigger_for(handle.runner.config.task)
        if handle.closed:
            raise HTTPException(
                status_code=409,
                detail={
                    "version": API_VERSION,
                    "reason": "session closed",
                    "state": handle.runner.session.current_state.value,
                },
            )
        reply = _Reply()
        handle.events.put(OperatorEvent(trigger, reply.done))
        outcome = reply.wait(COMMAND_TIMEOUT_S)
        if outcome is None:
            raise HTTPException(
                status_code=409,
                detail={
                    "version": API_VERSION,
                    "reason": "session closed before the command was handled",
                    "state": handle.runner.session.current_state.value,
                },
            )
        if not outcome.accepted:
            raise HTTPException(
                status_code=409,
                detail={
                    "version": API_VERSION,
                    "reason": outcome.reason,
                    "state": outcome.state.value,
                },
            )
        return {
            "version": API_VERSION,
            "accepted": True,
            "session_id": session_id,
            "verb": command.verb,
            "trigger": trigger.value,
            "state": outcome.state.value,
            "actions": [_action_payload(a) for a in outcome.actions],
            "valid_verbs": verbs_for(outcome.valid_triggers, handle.runner.config.task),
        }

    @app.websocket("/api/sessions/{session_id}/telemetry")
    async def telemetry(websocket: WebSocket, session_id: str):
        await websocket.accept()
        handle = manager.sessions.get(session_id)
        if handle is None:
            await websocket.send_json(
                {
                    "version": API_VERSION,
                    "type": "error",
                    "reason": "unknown session",
                }
            )
            await websocket.close(code=1008)
            return
        # The protocol is push-only; the watcher exists so a subscriber that
        # goes away mid-session tears the loop down instead of leaking it.
        watcher = asyncio.ensure_future(websocket.receive())
        sent = 0
        try:
            while True:
                if watcher.done():
                    return
                with handle.condition:
                    pending = handle.messages[sent:]
                    closed = handle.closed
                for message in pending:
                    await websocket.send_json(message)
                sent += len(pending)
                if closed and sent == len(handle.messages):
                    await websocket.send_json(
                        {
                            "version": API_VERSION,
                            "type": "closed",
                            "session_id": session_id,
                            "label": handle.record.label if handle.record else None,
                        }
                    )
                    await websocket.close()
                    return
                if not pending:
                    await asyncio.sleep(0.01)
        except WebSocketDisconnect:
            return
        finally:
            watcher.cancel()

    def _parse_filters(task: Optional[str], label: Optional[str]):
        parsed_task = None
        if task is not None:
            try:
                parsed_task = Task(task)
            except ValueError:
                raise HTTPException(
                    status_code=400,
                    detail={
                        "version": API_VERSION,
                        "reason": f"unknown task {task!r}",
                    },
                ) from None
        if label is not None and label not in ("Success", "Failure"):
            raise HTTPException(
                status_code=400,
                detail={
                    "version": API_VERSION,
                    "reason": f"unknown label {label!r}",
                },
            )
        return parsed_task, label

    @app.get("/api/records")
    def list_records(task: Optional[str] = None, label: Optional[str] = None):
        parsed_task, parsed_label = _parse_filters(task, label)
        return {
            "version": API_VERSION,
            "records": manager.store.summaries(parsed_task, parsed_label),
        }

    @app.get("/api/records/export")
    def export_records(task: Optional[str] = None, label: Optional[str] = None):
        parsed_task, parsed_label = _parse_filters(task, label)
        return PlainTextResponse(manager.store.export_corpus(parsed_task, parsed_label))

    @app.post("/api/models/{task}")
    def upload_model(task: str, document: dict):
        parsed_task, _ = _parse_filters(task, None)
        try:
            detector = load_detector(document)
        except (ValueError, KeyError, TypeError) as err:
            raise HTTPException(
                status_code=400,
                detail={"version": API_VERSION, "reason": f"invalid model: {err}"},
            ) from None
        manager.models[parsed_task] = detector
        return {
            "version": API_VERSION,
            "task": parsed_task.value,
            "method": document.get("method"),
            "n_states": detector.n_states,
        }

    @app.get("/api/models")
    def list_models():
        return {
            "version": API_VERSION,
            "models": {
                task.value: (
                    {
                        "n_states": manager.models[task].n_states,
                        "type": type(manager.models[task]).__name__,
                    }
                    if task in manager.models
                    else None
                )
                for task in Task
            },
        }

    return app
