#!/usr/bin/env python3
"""Frame codec for the agent, edge and central tiers.

Frame layout (all integers big-endian)::

    offset  size  field
    0       2     magic 0x45 0x56 ("EV")
    2       1     version (1)
    3       1     kind
    4       4     payload length
    8       n     payload
    8+n     4     CRC-32 of the payload

The payload is ``session_id`` (u64) followed by the kind-specific body, except
for DISCONNECT whose payload is the body alone; an empty DISCONNECT is the
12-byte frame ``45 56 01 09 00000000 00000000``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

import numpy as np

from config import ActionKind, AlertKind, AlertSource, PolicyMode, Severity
from errors import (
    CorruptionError,
    EncodeError,
    InvalidArgumentError,
    ProtocolError,
    UnsupportedKindError,
)
from learn import CentralModel, ModelParams, Stump, weight_count
from netlink import LinkConfig, transfer_time
from records import RECORD_BYTES, TRACE_DTYPE, Alert, ResponseAction, as_trace
from security import AUTH_TOKEN_BYTES

MAGIC = b"\x45\x56"
VERSION = 1
HEADER = struct.Struct(">2sBBI")
CRC = struct.Struct(">I")
SESSION = struct.Struct(">Q")
FRAME_OVERHEAD = HEADER.size + CRC.size
MAX_PAYLOAD_BYTES = 2**32 - 1


class MessageKind(IntEnum):
    HELLO = 0x01
    AUTH_OK = 0x02
    LOG_BATCH = 0x03
    FL_PARAMS = 0x04
    MODEL_UPDATE = 0x05
    ALERT = 0x06
    RESPONSE_ACTION = 0x07
    ACK = 0x08
    DISCONNECT = 0x09


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    session_id: int = 0
    body: bytes = b""
    version: int = VERSION


def _has_session(kind: MessageKind) -> bool:
    return kind != MessageKind.DISCONNECT


def frame_size(kind: MessageKind, body_len: int) -> int:
    """Exact encoded size of a frame carrying a body of body_len bytes."""
    session = SESSION.size if _has_session(kind) else 0
    return FRAME_OVERHEAD + session + body_len


def encode(msg: Message) -> bytes:
    if msg.version != VERSION:
        raise EncodeError(f"unsupported version {msg.version}")
    if not 0 <= msg.session_id < 2**64:
        raise EncodeError("session id must fit in 64 bits")
    if _has_session(msg.kind):
        payload = SESSION.pack(msg.session_id) + msg.body
    elif msg.session_id:
        raise EncodeError("DISCONNECT carries no session id")
    else:
        payload = msg.body
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise EncodeError(f"payload of {len(payload)} bytes exceeds frame limit")
    header = HEADER.pack(MAGIC, msg.version, int(msg.kind), len(payload))
    return header + payload + CRC.pack(zlib.crc32(payload))


def decode(data: bytes) -> Message:
    if len(data) < FRAME_OVERHEAD:
        raise ProtocolError(f"truncated frame ({len(data)} bytes)")
    magic, version, kind_code, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if len(data) != FRAME_OVERHEAD + length:
        raise ProtocolError(
            f"length field says {length} payload bytes, frame holds "
            f"{len(data) - FRAME_OVERHEAD}"
        )
    payload = bytes(data[HEADER.size : HEADER.size + length])
    (crc,) = CRC.unpack_from(data, HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise CorruptionError("payload checksum mismatch")
    try:
        kind = MessageKind(kind_code)
    except ValueError:
        raise UnsupportedKindError(f"unknown message kind 0x{kind_code:02x}") from None

    if not _has_session(kind):
        return Message(kind, 0, payload, version)
    if length < SESSION.size:
        raise ProtocolError(f"{kind.name} payload lacks a session id")
    (session_id,) = SESSION.unpack_from(payload)
    return Message(kind, session_id, payload[SESSION.size :], version)


def _need(body: bytes, size: int, what: str) -> None:
    if len(body) < size:
        raise ProtocolError(f"{what} body truncated")


# HELLO

_HELLO = struct.Struct(f">II{AUTH_TOKEN_BYTES}sBH")


@dataclass(frozen=True)
class Hello:
    vehicle_id: int
    oem_id: int
    token: bytes
    mode: PolicyMode
    upload_count: int


def pack_hello(hello: Hello) -> bytes:
    if len(hello.token) != AUTH_TOKEN_BYTES:
        raise EncodeError(f"auth token must be {AUTH_TOKEN_BYTES} bytes")
    return _HELLO.pack(
        hello.vehicle_id, hello.oem_id, hello.token, int(hello.mode), hello.upload_count
    )


def unpack_hello(body: bytes) -> Hello:
    if len(body) != _HELLO.size:
        raise ProtocolError("HELLO body has the wrong size")
    vehicle_id, oem_id, token, mode, uploads = _HELLO.unpack(body)
    try:
        return Hello(vehicle_id, oem_id, token, PolicyMode(mode), uploads)
    except ValueError:
        raise ProtocolError(f"unknown policy mode {mode}") from None


# ACK


class AckStatus(IntEnum):
    OK = 0
    REJECTED = 1
    AUTH_FAILED = 2
    UNKNOWN_COMPONENT = 3


def pack_ack(status: AckStatus = AckStatus.OK, reason: str = "") -> bytes:
    if status == AckStatus.OK and not reason:
        return b""
    return bytes([int(status)]) + reason.encode("utf-8")


def unpack_ack(body: bytes) -> Tuple[AckStatus, str]:
    if not body:
        return AckStatus.OK, ""
    try:
        return AckStatus(body[0]), body[1:].decode("utf-8")
    except (ValueError, UnicodeDecodeError):
        raise ProtocolError("malformed ACK body") from None


# LOG_BATCH

_LOG_HEADER = struct.Struct(">III")


@dataclass(frozen=True)
class LogBatch:
    vehicle_id: int
    oem_id: int
    trace: np.ndarray


def log_batch_body_size(record_count: int) -> int:
    return _LOG_HEADER.size + record_count * RECORD_BYTES


def pack_log_batch(vehicle_id: int, oem_id: int, trace) -> bytes:
    trace = as_trace(trace)
    return _LOG_HEADER.pack(vehicle_id, oem_id, len(trace)) + trace.tobytes()


def unpack_log_batch(body: bytes) -> LogBatch:
    _need(body, _LOG_HEADER.size, "LOG_BATCH")
    vehicle_id, oem_id, count = _LOG_HEADER.unpack_from(body)
    if len(body) != log_batch_body_size(count):
        raise ProtocolError(f"LOG_BATCH announces {count} records, size disagrees")
    trace = np.frombuffer(body, dtype=TRACE_DTYPE, offset=_LOG_HEADER.size).copy()
    return LogBatch(vehicle_id, oem_id, trace)


# FL_PARAMS and MODEL_UPDATE

_PARAMS_TAIL = struct.Struct(">QIII")
_WEIGHT = np.dtype(">f4")


def params_body_size(layer_sizes) -> int:
    return 1 + 2 * len(layer_sizes) + _PARAMS_TAIL.size + 4 * weight_count(layer_sizes)


def pack_params(params: ModelParams) -> bytes:
    layers = params.layer_sizes
    head = struct.pack(f">B{len(layers)}H", len(layers), *layers)
    tail = _PARAMS_TAIL.pack(
        params.sample_count, params.oem_id, params.version, params.weights.size
    )
    return head + tail + params.weights.astype(_WEIGHT).tobytes()


def unpack_params(body: bytes) -> ModelParams:
    _need(body, 1, "params")
    n_layers = body[0]
    offset = 1 + 2 * n_layers
    _need(body, offset + _PARAMS_TAIL.size, "params")
    layers = struct.unpack_from(f">{n_layers}H", body, 1)
    sample_count, oem_id, version, count = _PARAMS_TAIL.unpack_from(body, offset)
    offset += _PARAMS_TAIL.size
    if count != weight_count(layers) or len(body) != offset + 4 * count:
        raise ProtocolError("params body size does not match its layer sizes")
    weights = np.frombuffer(body, dtype=_WEIGHT, count=count, offset=offset)
    return ModelParams(
        layers, weights.astype(np.float32), sample_count, oem_id=oem_id, version=version
    )


class ModelType(IntEnum):
    FFNN = 0
    STUMPS = 1


_STUMPS_HEAD = struct.Struct(">IIdd")
_STUMP = struct.Struct(">Bddd")


def pack_stumps(model: CentralModel) -> bytes:
    head = _STUMPS_HEAD.pack(
        model.version, model.rounds, model.learning_rate, model.base_score
    )
    return head + b"".join(
        _STUMP.pack(s.feature, s.threshold, s.left, s.right) for s in model.stumps
    )


def unpack_stumps(body: bytes) -> CentralModel:
    _need(body, _STUMPS_HEAD.size, "stump model")
    version, rounds, learning_rate, base = _STUMPS_HEAD.unpack_from(body)
    if len(body) != _STUMPS_HEAD.size + rounds * _STUMP.size:
        raise ProtocolError("stump model body size does not match its rounds")
    stumps = tuple(
        Stump(*_STUMP.unpack_from(body, _STUMPS_HEAD.size + i * _STUMP.size))
        for i in range(rounds)
    )
    return CentralModel(stumps, learning_rate, rounds, base, version)


Model = Union[ModelParams, CentralModel]


def pack_model_update(model: Model) -> bytes:
    if isinstance(model, ModelParams):
        return bytes([ModelType.FFNN]) + pack_params(model)
    return bytes([ModelType.STUMPS]) + pack_stumps(model)


def unpack_model_update(body: bytes) -> Model:
    _need(body, 1, "MODEL_UPDATE")
    if body[0] == ModelType.FFNN:
        return unpack_params(body[1:])
    if body[0] == ModelType.STUMPS:
        return unpack_stumps(body[1:])
    raise ProtocolError(f"unknown model type {body[0]}")


# ALERT and RESPONSE_ACTION

_ALERT = struct.Struct(">IHBBdB")
_ACTION = struct.Struct(">BHIH")


def pack_alert(alert: Alert) -> bytes:
    return _ALERT.pack(
        alert.vehicle_id,
        alert.component_id,
        int(alert.kind),
        int(alert.severity),
        alert.score,
        int(alert.source),
    )


def unpack_alert(body: bytes) -> Alert:
    if len(body) != _ALERT.size:
        raise ProtocolError("ALERT body has the wrong size")
    vehicle, component, kind, severity, score, source = _ALERT.unpack(body)
    try:
        return Alert(
            vehicle,
            component,
            AlertKind(kind),
            Severity(severity),
            score,
            AlertSource(source),
        )
    except ValueError as e:
        raise ProtocolError(f"malformed ALERT body: {e}") from None


def pack_action(action: ResponseAction) -> bytes:
    rationale = action.rationale.encode("utf-8")
    head = _ACTION.pack(
        int(action.kind), action.component_id, action.patch_version, len(rationale)
    )
    return head + rationale


def unpack_action(body: bytes) -> ResponseAction:
    _need(body, _ACTION.size, "RESPONSE_ACTION")
    kind, component, patch_version, size = _ACTION.unpack_from(body)
    if len(body) != _ACTION.size + size:
        raise ProtocolError("RESPONSE_ACTION rationale length mismatch")
    try:
        return ResponseAction(
            ActionKind(kind),
            component,
            body[_ACTION.size :].decode("utf-8"),
            patch_version,
        )
    except (ValueError, UnicodeDecodeError):
        raise ProtocolError("malformed RESPONSE_ACTION body") from None


def corrupt_frame(frame: bytes, rng: np.random.Generator) -> bytes:
    """Flip one bit after the header so the checksum no longer matches."""
    position = int(rng.integers(HEADER.size, len(frame)))
    damaged = bytearray(frame)
    damaged[position] ^= 1 << int(rng.integers(8))
    return bytes(damaged)


class FrameChannel:
    """Serial delivery of frames over one link.

    Every frame costs one ``netlink.transfer_time`` draw; with probability
    ``corruption_prob`` it arrives with a flipped bit.
    """

    def __init__(
        self,
        link: LinkConfig,
        rng: np.random.Generator,
        corruption_prob: float = 0.0,
    ) -> None:
        if not 0.0 <= corruption_prob <= 1.0:
            raise InvalidArgumentError("corruption_prob must lie in [0, 1]")
        self.link = link
        self.rng = rng
        self.corruption_prob = corruption_prob
        self.frames_sent = 0
        self.bytes_sent = 0

    def transfer(self, frame: bytes) -> Tuple[float, bytes]:
        """Delivery time in ms and the bytes as received."""
        elapsed = transfer_time(self.link, len(frame), self.rng).total_ms
        self.frames_sent += 1
        self.bytes_sent += len(frame)
        if self.corruption_prob and self.rng.random() < self.corruption_prob:
            return elapsed, corrupt_frame(frame, self.rng)
        return elapsed, frame
