#!/usr/bin/env python3
"""Edge-SOAR at a charging point.

The edge authenticates the vehicle on HELLO, assesses uploaded log windows
with the centrally trained model and a DoS signature screen, maps alerts to
response actions with a first-match rule set, relays uploads to the Central
SOAR and hands queued responses and model updates to the vehicle before it
disconnects.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from config import (
    ActionKind,
    AlertKind,
    AlertSource,
    EdgeConfig,
    Severity,
    enum_label,
)
from errors import CorruptionError, InvalidArgumentError, ProtocolError
from learn import (
    CentralModel,
    ModelParams,
    extract_features,
    predict_central_batch,
)
from logging_utils import Logger
from netlink import CENTRAL_LINK, PRESETS, LinkConfig
from records import Alert, ResponseAction, Window, as_trace, severity_for
from security import SecurityValidator
from utils import substream, write_csv
from wire import (
    AckStatus,
    FrameChannel,
    Message,
    MessageKind,
    Model,
    decode,
    encode,
    pack_ack,
    pack_action,
    pack_alert,
    pack_model_update,
    unpack_ack,
    unpack_alert,
    unpack_hello,
    unpack_log_batch,
    unpack_params,
)

__all__ = [
    "Alert",
    "ResponseAction",
    "severity_for",
    "Rule",
    "RuleSet",
    "DEFAULT_RULES",
    "EdgeSoar",
    "apply_rules",
    "assess_logs",
    "classify_attack",
    "load_rules",
    "screen_signatures",
    "split_windows",
]

# signature screen: longest back-to-back run as a share of the window
DOS_BURST_SHARE = 0.05

# classification cut-offs on the window features
FUZZ_ID_DISPERSION = 0.12
HIGH_BYTE_SHARE = 0.02
COUNTER_BREAK_SHARE = 0.1

RULES_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "rules.yaml")


@dataclass(frozen=True)
class Rule:
    rule_id: str
    kind: AlertKind
    min_severity: Severity
    actions: Tuple[ActionKind, ...]

    def matches(self, alert: Alert) -> bool:
        return alert.kind == self.kind and alert.severity >= self.min_severity


@dataclass(frozen=True)
class RuleSet:
    """Ordered rules; the first match wins, otherwise the fallback applies."""
    rules: Tuple[Rule, ...]
    fallback: Tuple[ActionKind, ...] = (ActionKind.NOTIFY_CENTRAL,)
    fallback_id: str = "fallback"

    def match(self, alert: Alert) -> Optional[Rule]:
        for rule in self.rules:
            if rule.matches(alert):
                return rule
        return None


def _enum_member(enum_type, name: str):
    try:
        return enum_type[str(name).strip().upper()]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown {enum_type.__name__} value: {name!r}"
        ) from None


def parse_rules(document: dict) -> RuleSet:
    rules = []
    for entry in document.get("rules") or []:
        actions = tuple(_enum_member(ActionKind, a) for a in entry.get("actions", []))
        if not actions:
            raise InvalidArgumentError(f"rule {entry.get('id')!r} has no actions")
        rules.append(
            Rule(
                rule_id=str(entry["id"]),
                kind=_enum_member(AlertKind, entry["kind"]),
                min_severity=_enum_member(Severity, entry.get("min_severity", "low")),
                actions=actions,
            )
        )
    fallback = document.get("fallback") or {}
    fallback_actions = tuple(
        _enum_member(ActionKind, a) for a in fallback.get("actions", ["notify_central"])
    )
    return RuleSet(tuple(rules), fallback_actions, str(fallback.get("id", "fallback")))


def load_rules(path: Optional[str] = None) -> RuleSet:
    """Rule set from a YAML file; the shipped rules.yaml by default."""
    validated = SecurityValidator.validate_file_path(path or RULES_FILE)
    with open(validated, encoding="utf-8") as handle:
        rules = parse_rules(yaml.safe_load(handle) or {})
    Logger.debug(f"loaded {len(rules.rules)} edge rules from {validated}")
    return rules


DEFAULT_RULES = load_rules()


def apply_rules(alert: Alert, rules: RuleSet = DEFAULT_RULES) -> List[ResponseAction]:
    """Actions of the first matching rule, else the fallback."""
    rule = rules.match(alert)
    if rule is None:
        kinds, rule_id = rules.fallback, rules.fallback_id
    else:
        kinds, rule_id = rule.actions, rule.rule_id
    return [ResponseAction(kind, alert.component_id, rule_id) for kind in kinds]


def classify_attack(features: np.ndarray) -> AlertKind:
    """Attribute a positive window to an attack kind by its signature."""
    if features[5] >= DOS_BURST_SHARE:
        return AlertKind.DOS
    if features[15] >= FUZZ_ID_DISPERSION and features[14] >= HIGH_BYTE_SHARE:
        return AlertKind.FUZZING
    if features[14] >= HIGH_BYTE_SHARE:
        return AlertKind.TAMPER
    if features[9] >= COUNTER_BREAK_SHARE:
        return AlertKind.SPOOFING
    return AlertKind.ANOMALY


def split_windows(trace: np.ndarray, window_records: int) -> List[np.ndarray]:
    """Split an uploaded batch into roughly window_records-sized windows."""
    if len(trace) == 0:
        return []
    parts = max(1, int(round(len(trace) / window_records)))
    return [w for w in np.array_split(trace, parts) if len(w)]


def dominant_component(window: np.ndarray) -> int:
    return int(np.bincount(window["component_id"].astype(np.int64)).argmax())


def assess_logs(
    trace: Window,
    model: Optional[CentralModel],
    vehicle_id: int = 0,
    threshold: float = 0.5,
    window_records: int = 128,
) -> List[Alert]:
    """One alert per window the model scores at or above threshold."""
    if model is None:
        return []
    windows = split_windows(as_trace(trace), window_records)
    if not windows:
        return []
    features = np.stack([extract_features(w).values for w in windows])
    scores = predict_central_batch(model, features)
    return [
        Alert.scored(
            vehicle_id,
            dominant_component(window),
            classify_attack(row),
            float(score),
            AlertSource.EDGE_ML,
        )
        for window, row, score in zip(windows, features, scores)
        if score >= threshold
    ]


def screen_signatures(
    trace: Window, vehicle_id: int = 0, window_records: int = 128
) -> List[Alert]:
    """Rule-based DoS screen, independent of any model."""
    alerts = []
    for window in split_windows(as_trace(trace), window_records):
        features = extract_features(window).values
        if features[5] >= DOS_BURST_SHARE:
            alerts.append(
                Alert.scored(
                    vehicle_id,
                    dominant_component(window),
                    AlertKind.DOS,
                    1.0,
                    AlertSource.RULE,
                )
            )
    return alerts


@dataclass(frozen=True)
class RelayResult:
    delivered: bool
    elapsed_ms: float
    attempts: int


@dataclass(frozen=True)
class HistoryEntry:
    time_ms: float
    vehicle_id: int
    kind: AlertKind
    severity: Severity
    rule_id: str
    action: ActionKind


HISTORY_COLUMNS = ("time", "vehicle", "kind", "severity", "rule_id", "action")
MODEL_KINDS = ("central", "params")


def _model_kind(model: Model) -> str:
    return "central" if isinstance(model, CentralModel) else "params"


@dataclass
class _Session:
    session_id: int
    vehicle_id: int
    oem_id: int
    uploads_expected: int
    uploads_seen: int = 0
    alerts: List[Alert] = field(default_factory=list)


class EdgeSoar:
    """One charging point; serves one vehicle session at a time."""

    def __init__(
        self,
        edge_id: int,
        credentials: Mapping[int, bytes],
        config: Optional[EdgeConfig] = None,
        rules: Optional[RuleSet] = None,
        model: Optional[CentralModel] = None,
        central=None,
        central_link: Optional[LinkConfig] = None,
        seed: int = 0,
        relay_corruption: float = 0.0,
    ) -> None:
        self.edge_id = edge_id
        self.credentials = credentials
        self.config = config or EdgeConfig()
        self.rules = rules or DEFAULT_RULES
        self.model = model
        self.central = central
        self.central_channel = FrameChannel(
            central_link or PRESETS[CENTRAL_LINK],
            substream(seed, "relay", edge_id),
            relay_corruption,
        )
        self.history: List[HistoryEntry] = []
        self.outbox: Dict[Tuple[int, str], Model] = {}
        self.session: Optional[_Session] = None
        self.sessions_served = 0
        self.relayed = 0
        self.relay_dropped = 0
        self.relay_ms = 0.0

    @property
    def node(self) -> str:
        return f"edge-{self.edge_id}"

    # models

    def install_model(self, model: CentralModel) -> bool:
        """Swap the assessment model; older versions never replace newer."""
        if self.model is not None and model.version < self.model.version:
            Logger.debug(
                f"{self.node}: ignoring model v{model.version} "
                f"(installed v{self.model.version})"
            )
            return False
        self.model = model
        return True

    def distribute_model(self, model: Model, vehicle_id: int) -> bool:
        """Queue a model for the vehicle's next download phase.

        One slot per vehicle and model kind; the newest version wins.
        """
        key = (vehicle_id, _model_kind(model))
        queued = self.outbox.get(key)
        if queued is not None and model.version < queued.version:
            return False
        self.outbox[key] = model
        return True

    # relay

    def relay_to_central(self, message: Message, now_ms: float = 0.0) -> RelayResult:
        """Forward a frame upward; one retransmit on corruption, then drop."""
        if self.central is None:
            Logger.debug(f"{self.node}: no central attached, {message.kind.name} kept")
            return RelayResult(False, 0.0, 0)
        frame = encode(message)
        elapsed = 0.0
        for attempt in (1, 2):
            delay, received = self.central_channel.transfer(frame)
            elapsed += delay
            try:
                delivered = decode(received)
            except CorruptionError:
                Logger.security_event(
                    "FRAME_CORRUPTED",
                    f"{self.node} -> central {message.kind.name} attempt {attempt}",
                )
                continue
            self.relay_ms += elapsed
            self.relayed += 1
            self.central.receive(delivered, now_ms + elapsed)
            return RelayResult(True, elapsed, attempt)

        self.relay_dropped += 1
        self.relay_ms += elapsed
        Logger.security_event(
            "RELAY_DROPPED", f"{self.node} dropped {message.kind.name} after 2 attempts"
        )
        Logger.error(f"{self.node}: relay of {message.kind.name} to central failed")
        return RelayResult(False, elapsed, 2)

    # session handling

    def handle(self, frame: bytes, now_ms: float) -> List[bytes]:
        """Process one frame from a vehicle; returns reply frames in order.

        Raises CorruptionError when the frame fails its checksum so the sender
        can retransmit.
        """
        msg = decode(frame)
        if msg.kind == MessageKind.HELLO:
            return self._hello(msg, now_ms)
        if msg.kind == MessageKind.DISCONNECT:
            self.close_session(now_ms)
            return []

        session = self.session
        if session is None or msg.session_id != session.session_id:
            return [self._ack(msg.session_id, AckStatus.REJECTED, "no such session")]

        if msg.kind == MessageKind.ACK:
            status, reason = unpack_ack(msg.body)
            if status != AckStatus.OK:
                Logger.security_event(
                    "RESPONSE_REJECTED",
                    f"vehicle {session.vehicle_id}: {status.name} {reason}",
                )
            return []
        if msg.kind not in (
            MessageKind.LOG_BATCH,
            MessageKind.FL_PARAMS,
            MessageKind.ALERT,
        ):
            return [self._ack(msg.session_id, AckStatus.REJECTED, "unexpected kind")]

        try:
            self._upload(session, msg, now_ms)
        except ProtocolError as e:
            replies = [self._ack(msg.session_id, AckStatus.REJECTED, str(e))]
        else:
            replies = [self._ack(msg.session_id)]
        # rejected uploads count toward the download trigger too
        session.uploads_seen += 1
        if session.uploads_seen == session.uploads_expected:
            replies.extend(self._downloads(session, now_ms))
        return replies

    def _ack(
        self, session_id: int, status: AckStatus = AckStatus.OK, reason: str = ""
    ) -> bytes:
        return encode(Message(MessageKind.ACK, session_id, pack_ack(status, reason)))

    def _hello(self, msg: Message, now_ms: float) -> List[bytes]:
        hello = unpack_hello(msg.body)
        expected = self.credentials.get(hello.vehicle_id)
        known = expected is not None
        if not known or not SecurityValidator.tokens_match(hello.token, expected):
            Logger.security_event(
                "AUTH_FAILED", f"{self.node}: vehicle {hello.vehicle_id} rejected"
            )
            return [self._ack(0, AckStatus.AUTH_FAILED, "authentication failed")]
        if self.session is not None:
            return [self._ack(0, AckStatus.REJECTED, "charging point busy")]

        self.sessions_served += 1
        session = _Session(
            session_id=(self.edge_id << 32) | self.sessions_served,
            vehicle_id=hello.vehicle_id,
            oem_id=hello.oem_id,
            uploads_expected=hello.upload_count,
        )
        self.session = session
        Logger.sim(
            now_ms,
            self.node,
            f"session {session.session_id} vehicle {hello.vehicle_id} "
            f"({enum_label(hello.mode)}, {hello.upload_count} uploads)",
        )
        replies = [encode(Message(MessageKind.AUTH_OK, session.session_id))]
        if session.uploads_expected == 0:
            replies.extend(self._downloads(session, now_ms))
        return replies

    def _upload(self, session: _Session, msg: Message, now_ms: float) -> None:
        if msg.kind == MessageKind.LOG_BATCH:
            batch = unpack_log_batch(msg.body)
            session.alerts.extend(
                assess_logs(
                    batch.trace,
                    self.model,
                    session.vehicle_id,
                    self.config.alert_threshold,
                    self.config.window_records,
                )
            )
            if self.config.signature_screening:
                session.alerts.extend(
                    screen_signatures(
                        batch.trace, session.vehicle_id, self.config.window_records
                    )
                )
        elif msg.kind == MessageKind.FL_PARAMS:
            params: ModelParams = unpack_params(msg.body)
            if params.oem_id != session.oem_id:
                raise ProtocolError("parameters belong to another OEM")
        else:
            session.alerts.append(unpack_alert(msg.body))
            # agent alerts reach the central through the rules below
            return
        self.relay_to_central(msg, now_ms)

    def _downloads(self, session: _Session, now_ms: float) -> List[bytes]:
        """Responses for this session's alerts, then queued central items."""
        actions: List[ResponseAction] = []
        seen = set()
        for alert in session.alerts:
            for action in apply_rules(alert, self.rules):
                self.history.append(
                    HistoryEntry(
                        now_ms,
                        alert.vehicle_id,
                        alert.kind,
                        alert.severity,
                        action.rationale,
                        action.kind,
                    )
                )
                if action.kind == ActionKind.NOTIFY_CENTRAL:
                    body = pack_alert(alert)
                    self.relay_to_central(
                        Message(MessageKind.ALERT, session.session_id, body), now_ms
                    )
                    continue
                key = (action.kind, action.component_id)
                if key not in seen:
                    seen.add(key)
                    actions.append(action)

        models: List[Model] = []
        if self.central is not None:
            for item in self.central.drain_mailbox(session.vehicle_id):
                if isinstance(item, ResponseAction):
                    actions.append(item)
                else:
                    self.distribute_model(item, session.vehicle_id)
        for kind in MODEL_KINDS:
            queued = self.outbox.pop((session.vehicle_id, kind), None)
            if queued is not None:
                models.append(queued)

        sid = session.session_id
        frames = [
            encode(Message(MessageKind.RESPONSE_ACTION, sid, pack_action(a)))
            for a in actions
        ]
        frames.extend(
            encode(Message(MessageKind.MODEL_UPDATE, sid, pack_model_update(m)))
            for m in models
        )
        if session.alerts:
            Logger.sim(
                now_ms,
                self.node,
                f"{len(session.alerts)} alerts -> {len(actions)} actions "
                f"for vehicle {session.vehicle_id}",
            )
        return frames

    def close_session(self, now_ms: float) -> None:
        if self.session is not None:
            Logger.sim(now_ms, self.node, f"session {self.session.session_id} closed")
        self.session = None

    # reporting

    def history_rows(self) -> List[Sequence[object]]:
        return [
            (
                entry.time_ms,
                entry.vehicle_id,
                enum_label(entry.kind),
                enum_label(entry.severity),
                entry.rule_id,
                enum_label(entry.action),
            )
            for entry in self.history
        ]

    def export_history(self, path: str) -> str:
        return write_csv(path, HISTORY_COLUMNS, self.history_rows())
