#!/usr/bin/env python3
"""In-vehicle SOAR Agent.

While the vehicle travels the agent buffers log windows and, in fl_params
mode, scores them with its local federated model. When it plugs into a
charging point it runs one session:

    HELLO -> AUTH_OK -> uploads (each ACKed) -> downloads (each ACKed) -> DISCONNECT

Component status transitions (``apply_response``)::

    action              new status     note
    DeactivateComponent deactivated
    IsolateComponent    isolated       deactivated stays deactivated
    ApplyPatch          patched        patch version only moves up
    UpdateFirmware      patched        same as ApplyPatch
    RollbackUpdate      rolled_back    deactivated stays deactivated
    NotifyCentral       unchanged
"""

from __future__ import annotations

import zlib
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

import numpy as np

from config import (
    ActionKind,
    AlertSource,
    ComponentStatus,
    PolicyConfig,
    PolicyMode,
    Severity,
    enum_label,
)
from edge import classify_attack, dominant_component
from errors import (
    CorruptionError,
    InvalidArgumentError,
    SessionAborted,
    StateError,
    UnknownComponentError,
)
from learn import (
    Dataset,
    ModelParams,
    extract_features,
    ffnn_predict_proba,
    ffnn_train,
)
from logging_utils import Logger
from netlink import LinkConfig
from records import (
    TRACE_DTYPE,
    Alert,
    LogRecord,
    ResponseAction,
    Window,
    as_trace,
    empty_trace,
)
from security import SecurityValidator
from utils import substream
from wire import (
    AckStatus,
    FrameChannel,
    Hello,
    Message,
    MessageKind,
    decode,
    encode,
    pack_ack,
    pack_alert,
    pack_hello,
    pack_log_batch,
    pack_params,
    unpack_ack,
    unpack_action,
    unpack_model_update,
)


class LogBuffer:
    """FIFO of log chunks bounded by a total record count.

    Every recorded record ends up buffered, acknowledged or evicted:
    ``recorded == size + acked + evicted``.
    """

    def __init__(self, capacity: int, chunk_records: int) -> None:
        self.capacity = capacity
        self.chunk_records = chunk_records
        self.chunks: Deque[np.ndarray] = deque()
        self.size = 0
        self.recorded = 0
        self.evicted = 0
        self.acked = 0
        self._open: List[LogRecord] = []

    def append_chunk(self, trace: np.ndarray) -> None:
        if len(trace) == 0:
            return
        self._open = []
        self.chunks.append(trace)
        self.size += len(trace)
        self.recorded += len(trace)
        self._evict()

    def append_record(self, record: LogRecord) -> None:
        """Single records fill an open chunk that closes at chunk_records."""
        self.recorded += 1
        self.size += 1
        if not self._open:
            self.chunks.append(empty_trace(0))
        self._open.append(record)
        self.chunks[-1] = as_trace(self._open)
        if len(self._open) >= self.chunk_records:
            self._open = []
        self._evict()

    def _evict(self) -> None:
        while self.size > self.capacity:
            excess = self.size - self.capacity
            oldest = self.chunks[0]
            if len(oldest) <= excess:
                self.chunks.popleft()
                dropped = len(oldest)
                if not self.chunks:
                    self._open = []
            else:
                self.chunks[0] = oldest[excess:]
                dropped = excess
                if len(self.chunks) == 1 and self._open:
                    self._open = self._open[excess:]
            self.size -= dropped
            self.evicted += dropped

    def snapshot(self) -> List[np.ndarray]:
        return list(self.chunks)

    def ack_front(self, chunk: np.ndarray) -> None:
        """Drop the oldest chunk once its upload is acknowledged."""
        if self.chunks and self.chunks[0] is chunk:
            self.chunks.popleft()
            self.size -= len(chunk)
            self.acked += len(chunk)
            if not self.chunks:
                self._open = []

    def records(self) -> np.ndarray:
        if not self.chunks:
            return empty_trace(0)
        return np.concatenate(list(self.chunks), dtype=TRACE_DTYPE)


class SessionStatus(Enum):
    OK = "ok"
    AUTH_FAILED = "auth_failed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class TranscriptEntry:
    time_ms: float
    direction: str
    kind: MessageKind
    size: int
    digest: int


@dataclass
class SessionReport:
    vehicle_id: int
    edge_id: int
    mode: PolicyMode
    start_ms: float
    end_ms: float = 0.0
    status: SessionStatus = SessionStatus.OK
    reason: str = ""
    bytes_up: int = 0
    bytes_down: int = 0
    uploads_acked: int = 0
    transcript: List[TranscriptEntry] = field(default_factory=list)
    alert_at_ms: Optional[float] = None
    response_acked_ms: Optional[float] = None

    @property
    def elapsed_ms(self) -> float:
        return self.end_ms - self.start_ms

    @property
    def response_ms(self) -> Optional[float]:
        """First alert-bearing upload at the edge to the first response ACK."""
        if self.alert_at_ms is None or self.response_acked_ms is None:
            return None
        return self.response_acked_ms - self.alert_at_ms

    def kinds(self, direction: str) -> List[MessageKind]:
        return [e.kind for e in self.transcript if e.direction == direction]


@dataclass
class AgentState:
    vehicle_id: int
    oem_id: int
    token: bytes
    policy: PolicyConfig
    component_status: Dict[int, ComponentStatus]
    pending_logs: LogBuffer
    pending_alerts: "OrderedDict[Tuple[int, int], Alert]"
    local_params: Optional[ModelParams] = None
    patch_versions: Dict[int, int] = field(default_factory=dict)
    feature_shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alerts_evicted: int = 0


class SoarAgent:
    """State machine of one vehicle's SOAR Agent."""

    def __init__(
        self,
        vehicle_id: int,
        oem_id: int,
        token: bytes,
        component_count: int,
        policy: Optional[PolicyConfig] = None,
        local_params: Optional[ModelParams] = None,
        feature_shift: Optional[np.ndarray] = None,
    ) -> None:
        if component_count < 1:
            raise InvalidArgumentError("component_count must be >= 1")
        policy = policy or PolicyConfig()
        components = range(component_count)
        self.state = AgentState(
            vehicle_id=vehicle_id,
            oem_id=oem_id,
            token=SecurityValidator.validate_auth_token(token),
            policy=policy,
            component_status=dict.fromkeys(components, ComponentStatus.ACTIVE),
            pending_logs=LogBuffer(policy.max_buffer, policy.window_records),
            pending_alerts=OrderedDict(),
            local_params=local_params,
            patch_versions=dict.fromkeys(components, 0),
            feature_shift=(
                np.zeros(0) if feature_shift is None else np.asarray(feature_shift)
            ),
        )
        self._train_rows: Deque[np.ndarray] = deque(
            maxlen=max(1, policy.max_buffer // policy.window_records)
        )
        self._train_labels: Deque[int] = deque(maxlen=self._train_rows.maxlen)
        self.sessions = 0

    @property
    def node(self) -> str:
        return f"vehicle-{self.state.vehicle_id}"

    @property
    def policy(self) -> PolicyConfig:
        return self.state.policy

    # traveling

    def record(self, record: LogRecord) -> "SoarAgent":
        self.state.pending_logs.append_record(record)
        return self

    def record_window(
        self, window: Window, features: Optional[np.ndarray] = None
    ) -> "SoarAgent":
        """Buffer a whole window; it also becomes local training data.

        ``features`` overrides the extracted feature row (fleet runs pass the
        OEM-shifted rows they generated).
        """
        trace = as_trace(window)
        self.state.pending_logs.append_chunk(trace)
        vector = extract_features(trace)
        if features is None:
            row = self._shifted(vector.values)
        else:
            row = np.asarray(features, dtype=np.float64)
        self._train_rows.append(row)
        self._train_labels.append(vector.label)
        return self

    def _shifted(self, row: np.ndarray) -> np.ndarray:
        if self.state.feature_shift.size:
            return row + self.state.feature_shift
        return row

    def local_infer(self, window: Window) -> Optional[Alert]:
        """Score a window with the local model; alert when p >= threshold."""
        if self.policy.mode != PolicyMode.FL_PARAMS:
            raise StateError("local inference requires fl_params mode")
        if self.state.local_params is None:
            raise StateError("no local model installed")
        trace = as_trace(window)
        raw = extract_features(trace).values
        row = self._shifted(raw)[None, :]
        score = float(ffnn_predict_proba(self.state.local_params, row)[0])
        if score < self.policy.alert_threshold:
            return None

        alert = Alert.scored(
            self.state.vehicle_id,
            dominant_component(trace),
            classify_attack(raw),
            min(max(score, 0.0), 1.0),
            AlertSource.AGENT_FL,
        )
        self._queue_alert(alert)
        if self.policy.local_isolation and alert.severity == Severity.HIGH:
            self.apply_response(
                ResponseAction(
                    ActionKind.ISOLATE_COMPONENT, alert.component_id, "local"
                )
            )
        return alert

    def _queue_alert(self, alert: Alert) -> None:
        """Pending alerts are kept once per (component, kind), highest score."""
        alerts = self.state.pending_alerts
        key = (alert.component_id, int(alert.kind))
        current = alerts.get(key)
        if current is None or alert.score > current.score:
            alerts[key] = alert
        while len(alerts) > self.policy.max_alerts:
            alerts.popitem(last=False)
            self.state.alerts_evicted += 1

    # responses

    def apply_response(self, action: ResponseAction) -> "SoarAgent":
        status = self.state.component_status
        if action.component_id not in status:
            raise UnknownComponentError(
                f"vehicle {self.state.vehicle_id} has no component "
                f"{action.component_id}"
            )
        current = status[action.component_id]
        kind = action.kind
        if kind == ActionKind.DEACTIVATE_COMPONENT:
            status[action.component_id] = ComponentStatus.DEACTIVATED
        elif kind == ActionKind.ISOLATE_COMPONENT:
            if current != ComponentStatus.DEACTIVATED:
                status[action.component_id] = ComponentStatus.ISOLATED
        elif kind in (ActionKind.APPLY_PATCH, ActionKind.UPDATE_FIRMWARE):
            status[action.component_id] = ComponentStatus.PATCHED
            versions = self.state.patch_versions
            versions[action.component_id] = max(
                versions.get(action.component_id, 0), action.patch_version
            )
        elif kind == ActionKind.ROLLBACK_UPDATE:
            if current != ComponentStatus.DEACTIVATED:
                status[action.component_id] = ComponentStatus.ROLLED_BACK
        return self

    def install_params(self, params: ModelParams) -> bool:
        """Atomic swap of the local model; never moves to an older version."""
        current = self.state.local_params
        if current is not None and params.version < current.version:
            return False
        self.state.local_params = params
        return True

    # charging session

    def _uploads(self, seed: int) -> List[Tuple[MessageKind, bytes, object]]:
        """Upload bodies in order, each with the buffer item its ACK releases."""
        uploads: List[Tuple[MessageKind, bytes, object]] = []
        state = self.state
        if self.policy.mode == PolicyMode.ML_LOGS:
            for chunk in state.pending_logs.snapshot():
                body = pack_log_batch(state.vehicle_id, state.oem_id, chunk)
                uploads.append((MessageKind.LOG_BATCH, body, chunk))
            return uploads

        if state.local_params is not None and self._train_rows:
            train_rng = substream(seed, "local-train", state.vehicle_id, self.sessions)
            train_seed = int(train_rng.integers(2**63))
            trained = ffnn_train(
                state.local_params,
                self._training_set(),
                self.policy.local_epochs,
                self.policy.learning_rate,
                train_seed,
                batch_size=self.policy.batch_size,
                pos_weight=self.policy.pos_weight,
            )
            uploads.append((MessageKind.FL_PARAMS, pack_params(trained), trained))
        for key, alert in state.pending_alerts.items():
            uploads.append((MessageKind.ALERT, pack_alert(alert), key))
        return uploads

    def _training_set(self) -> Dataset:
        return Dataset(
            np.stack(list(self._train_rows)), np.array(list(self._train_labels))
        )

    def charge_session(
        self,
        edge,
        link: LinkConfig,
        clock_ms: float = 0.0,
        seed: int = 0,
        corruption_prob: float = 0.0,
    ) -> SessionReport:
        """Run one session with an edge endpoint over a link.

        ``edge`` is anything with ``handle(frame, now_ms) -> [frames]``.
        Uploaded buffers are released only on ACK; on abort they stay.
        """
        state = self.state
        self.sessions += 1
        rng = substream(seed, "session", state.vehicle_id, self.sessions)
        report = SessionReport(
            state.vehicle_id, getattr(edge, "edge_id", 0), self.policy.mode, clock_ms
        )
        run = _SessionRun(self, edge, FrameChannel(link, rng, corruption_prob), report)

        uploads = self._uploads(seed)
        hello = Hello(
            state.vehicle_id, state.oem_id, state.token, self.policy.mode, len(uploads)
        )
        try:
            replies = run.send(Message(MessageKind.HELLO, 0, pack_hello(hello)))
            first = run.receive(replies.pop(0))
            if first.kind != MessageKind.AUTH_OK:
                status, reason = unpack_ack(first.body)
                Logger.security_event(
                    "AUTH_FAILED", f"{self.node}: {status.name} {reason}"
                )
                report.status = SessionStatus.AUTH_FAILED
                report.reason = reason or status.name
                report.end_ms = run.now
                return report
            run.session_id = first.session_id
            run.pending.extend(replies)

            for kind, body, item in uploads:
                replies = run.send(Message(kind, run.session_id, body))
                if kind != MessageKind.FL_PARAMS and report.alert_at_ms is None:
                    report.alert_at_ms = run.now
                status, reason = unpack_ack(run.receive(replies.pop(0)).body)
                if status == AckStatus.OK:
                    report.uploads_acked += 1
                    self._release(item)
                else:
                    Logger.warn(
                        f"{self.node}: upload rejected ({status.name} {reason})"
                    )
                run.pending.extend(replies)

            for frame in run.take_pending():
                msg = run.receive(frame)
                status, reason = self._apply_download(msg)
                ack = pack_ack(status, reason)
                run.send(Message(MessageKind.ACK, run.session_id, ack))
                first_response = report.response_acked_ms is None
                if msg.kind == MessageKind.RESPONSE_ACTION and first_response:
                    report.response_acked_ms = run.now

            run.send(Message(MessageKind.DISCONNECT))
        except SessionAborted as e:
            Logger.security_event("SESSION_ABORTED", f"{self.node}: {e.reason}")
            report.status = SessionStatus.ABORTED
            report.reason = e.reason
            close = getattr(edge, "close_session", None)
            if close is not None:
                close(run.now)
        report.end_ms = run.now
        Logger.sim(
            run.now,
            self.node,
            f"session {report.status.value}: {report.bytes_up} B up, "
            f"{report.bytes_down} B down, {report.elapsed_ms:.3f} ms",
        )
        return report

    def _release(self, item: Optional[object]) -> None:
        if isinstance(item, np.ndarray):
            self.state.pending_logs.ack_front(item)
        elif isinstance(item, ModelParams):
            self._adopt(item)
        elif isinstance(item, tuple):
            self.state.pending_alerts.pop(item, None)

    def _adopt(self, trained: ModelParams) -> None:
        """Locally trained weights become the model once the edge holds them."""
        self.state.local_params = trained
        self._train_rows.clear()
        self._train_labels.clear()

    def _apply_download(self, msg: Message) -> Tuple[AckStatus, str]:
        if msg.kind == MessageKind.RESPONSE_ACTION:
            action = unpack_action(msg.body)
            try:
                self.apply_response(action)
            except UnknownComponentError as e:
                return AckStatus.UNKNOWN_COMPONENT, str(e)
            Logger.debug(
                f"{self.node}: {enum_label(action.kind)} on component "
                f"{action.component_id} ({action.rationale})"
            )
            return AckStatus.OK, ""
        if msg.kind == MessageKind.MODEL_UPDATE:
            model = unpack_model_update(msg.body)
            if isinstance(model, ModelParams):
                self.install_params(model)
            return AckStatus.OK, ""
        return AckStatus.REJECTED, f"unexpected {msg.kind.name}"


class _SessionRun:
    """Clock, transcript and retransmission for one charging session."""

    def __init__(
        self, agent: SoarAgent, edge, channel: FrameChannel, report: SessionReport
    ) -> None:
        self.agent = agent
        self.edge = edge
        self.channel = channel
        self.report = report
        self.now = report.start_ms
        self.session_id = 0
        self.pending: List[bytes] = []

    def _log(self, direction: str, frame: bytes) -> None:
        self.report.transcript.append(
            TranscriptEntry(
                self.now,
                direction,
                MessageKind(frame[3]),
                len(frame),
                zlib.crc32(frame),
            )
        )
        if direction == "up":
            self.report.bytes_up += len(frame)
        else:
            self.report.bytes_down += len(frame)

    def send(self, msg: Message) -> List[bytes]:
        """Vehicle to edge; one retransmit when the edge sees corruption."""
        frame = encode(msg)
        for attempt in (1, 2):
            delay, received = self.channel.transfer(frame)
            self.now += delay
            self._log("up", frame)
            try:
                return list(self.edge.handle(received, self.now))
            except CorruptionError:
                Logger.security_event(
                    "FRAME_CORRUPTED", f"{self.agent.node} upload attempt {attempt}"
                )
        raise SessionAborted(f"{msg.kind.name} corrupted twice in transit")

    def receive(self, frame: bytes) -> Message:
        """Edge to vehicle; one retransmit on corruption."""
        for attempt in (1, 2):
            delay, received = self.channel.transfer(frame)
            self.now += delay
            self._log("down", frame)
            try:
                return decode(received)
            except CorruptionError:
                Logger.security_event(
                    "FRAME_CORRUPTED", f"{self.agent.node} download attempt {attempt}"
                )
        raise SessionAborted(f"{MessageKind(frame[3]).name} corrupted twice in transit")

    def take_pending(self) -> List[bytes]:
        frames, self.pending = self.pending, []
        return frames
