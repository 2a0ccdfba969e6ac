#!/usr/bin/env python3
"""Record types shared by the vehicle, edge and central tiers.

Log traces are numpy structured arrays with the big-endian layout below, so a
trace is its own wire encoding (23 bytes per record). ``LogRecord`` is the
per-record view used when single events are handled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from config import ActionKind, AlertKind, AlertSource, AttackKind, Severity
from errors import InvalidArgumentError

TRACE_DTYPE = np.dtype(
    [
        ("timestamp_us", ">u8"),
        ("component_id", ">u2"),
        ("message_id", ">u4"),
        ("payload", "u1", (8,)),
        ("attack_tag", "u1"),
    ]
)
RECORD_BYTES = TRACE_DTYPE.itemsize
PAYLOAD_BYTES = 8

MEDIUM_SEVERITY_SCORE = 0.7
HIGH_SEVERITY_SCORE = 0.9


@dataclass(frozen=True)
class LogRecord:
    """One in-vehicle log event."""
    timestamp_us: int
    component_id: int
    message_id: int
    payload: bytes
    attack_tag: AttackKind = AttackKind.NONE

    def __post_init__(self) -> None:
        if len(self.payload) != PAYLOAD_BYTES:
            raise InvalidArgumentError("log record payload must be 8 bytes")

    @property
    def benign(self) -> bool:
        return self.attack_tag == AttackKind.NONE


Window = Union[np.ndarray, Sequence[LogRecord]]


def empty_trace(size: int = 0) -> np.ndarray:
    return np.zeros(size, dtype=TRACE_DTYPE)


def as_trace(window: Window) -> np.ndarray:
    """Structured-array form of a window (no copy if it already is one)."""
    if isinstance(window, np.ndarray):
        if window.dtype != TRACE_DTYPE:
            raise InvalidArgumentError("trace array has an unexpected dtype")
        return window
    trace = empty_trace(len(window))
    for i, record in enumerate(window):
        trace[i] = (
            record.timestamp_us,
            record.component_id,
            record.message_id,
            np.frombuffer(record.payload, dtype=np.uint8),
            int(record.attack_tag),
        )
    return trace


def records_of(trace: np.ndarray) -> List[LogRecord]:
    return [
        LogRecord(
            timestamp_us=int(row["timestamp_us"]),
            component_id=int(row["component_id"]),
            message_id=int(row["message_id"]),
            payload=row["payload"].tobytes(),
            attack_tag=AttackKind(int(row["attack_tag"])),
        )
        for row in trace
    ]


def severity_for(score: float) -> Severity:
    """Score bands: < 0.7 low, < 0.9 medium, otherwise high."""
    if score >= HIGH_SEVERITY_SCORE:
        return Severity.HIGH
    if score >= MEDIUM_SEVERITY_SCORE:
        return Severity.MEDIUM
    return Severity.LOW


@dataclass(frozen=True)
class Alert:
    vehicle_id: int
    component_id: int
    kind: AlertKind
    severity: Severity
    score: float
    source: AlertSource

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgumentError("alert score must lie in [0, 1]")

    @classmethod
    def scored(
        cls,
        vehicle_id: int,
        component_id: int,
        kind: AlertKind,
        score: float,
        source: AlertSource,
    ) -> "Alert":
        return cls(vehicle_id, component_id, kind, severity_for(score), score, source)


@dataclass(frozen=True)
class ResponseAction:
    kind: ActionKind
    component_id: int
    rationale: str
    patch_version: int = 0
