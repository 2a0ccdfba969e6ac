"""Tests for the frame codec and message bodies."""

from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest

from config import ActionKind, AlertKind, AlertSource, PolicyMode, Severity
from errors import (
    CorruptionError,
    EncodeError,
    InvalidArgumentError,
    ProtocolError,
    UnsupportedKindError,
)
from learn import Dataset, init_params, train_central, weight_count
from netlink import deterministic, get_preset
from records import RECORD_BYTES, Alert, ResponseAction, empty_trace
from security import vehicle_token
from utils import substream
from wire import (
    FRAME_OVERHEAD,
    AckStatus,
    FrameChannel,
    Hello,
    Message,
    MessageKind,
    corrupt_frame,
    decode,
    encode,
    frame_size,
    log_batch_body_size,
    pack_ack,
    pack_action,
    pack_alert,
    pack_hello,
    pack_log_batch,
    pack_model_update,
    pack_params,
    params_body_size,
    unpack_ack,
    unpack_action,
    unpack_alert,
    unpack_hello,
    unpack_log_batch,
    unpack_model_update,
    unpack_params,
)


def _raw_frame(kind: int, payload: bytes, magic=b'EV', version=1) -> bytes:
    header = struct.pack('>2sBBI', magic, version, kind, len(payload))
    return header + payload + struct.pack('>I', zlib.crc32(payload))


@pytest.mark.unit
def test_empty_disconnect_is_twelve_bytes() -> None:
    frame = encode(Message(MessageKind.DISCONNECT))
    assert frame == bytes.fromhex('455601090000000000000000')
    assert decode(frame) == Message(MessageKind.DISCONNECT)


@pytest.mark.unit
def test_frame_layout() -> None:
    """Header, session id, body, then the CRC-32 of session id plus body."""
    frame = encode(Message(MessageKind.ACK, session_id=7, body=b'\x01ok'))
    assert frame[:4] == b'\x45\x56\x01\x08'
    assert struct.unpack('>I', frame[4:8])[0] == 8 + 3
    assert struct.unpack('>Q', frame[8:16])[0] == 7
    assert frame[16:19] == b'\x01ok'
    assert struct.unpack('>I', frame[-4:])[0] == zlib.crc32(frame[8:-4])
    assert len(frame) == frame_size(MessageKind.ACK, 3)


@pytest.mark.unit
def test_decode_restores_session_and_body() -> None:
    msg = Message(MessageKind.ALERT, session_id=2**63 + 5, body=b'abc')
    assert decode(encode(msg)) == msg


@pytest.mark.unit
def test_fl_params_frame_size_for_default_network() -> None:
    """The 16-64-32-1 network travels in a 12853-byte frame."""
    params = init_params((16, 64, 32, 1), seed=0)
    body = pack_params(params)
    assert len(body) == params_body_size((16, 64, 32, 1))
    frame = encode(Message(MessageKind.FL_PARAMS, 1, body))
    assert len(frame) == 12853
    assert FRAME_OVERHEAD == 12


@pytest.mark.unit
def test_encode_rejects_bad_messages() -> None:
    with pytest.raises(EncodeError):
        encode(Message(MessageKind.HELLO, session_id=2**64))
    with pytest.raises(EncodeError):
        encode(Message(MessageKind.HELLO, version=2))
    with pytest.raises(EncodeError):
        encode(Message(MessageKind.DISCONNECT, session_id=3))


@pytest.mark.unit
def test_decode_checks_magic_before_anything_else() -> None:
    frame = _raw_frame(0x7F, b'\x00' * 8, magic=b'XX', version=9)
    with pytest.raises(ProtocolError, match='magic'):
        decode(frame)


@pytest.mark.unit
def test_decode_checks_version_before_checksum() -> None:
    frame = bytearray(_raw_frame(0x01, b'\x00' * 8, version=2))
    frame[-1] ^= 0xFF
    with pytest.raises(ProtocolError, match='version'):
        decode(bytes(frame))


@pytest.mark.unit
def test_decode_rejects_truncated_and_overlong_frames() -> None:
    frame = encode(Message(MessageKind.ACK, 1, b'xyz'))
    with pytest.raises(ProtocolError):
        decode(frame[:8])
    with pytest.raises(ProtocolError):
        decode(frame[:-1])
    with pytest.raises(ProtocolError):
        decode(frame + b'\x00')


@pytest.mark.unit
def test_checksum_mismatch_is_corruption_not_protocol() -> None:
    frame = bytearray(encode(Message(MessageKind.ACK, 1, b'xyz')))
    frame[10] ^= 0x01
    with pytest.raises(CorruptionError):
        decode(bytes(frame))


@pytest.mark.unit
def test_unknown_kind_is_reported_after_checksum() -> None:
    with pytest.raises(UnsupportedKindError):
        decode(_raw_frame(0x42, b'\x00' * 8))
    damaged = bytearray(_raw_frame(0x42, b'\x00' * 8))
    damaged[-1] ^= 0x01
    with pytest.raises(CorruptionError):
        decode(bytes(damaged))


@pytest.mark.unit
def test_session_kind_without_session_id_is_malformed() -> None:
    with pytest.raises(ProtocolError):
        decode(_raw_frame(int(MessageKind.HELLO), b'\x00' * 4))


@pytest.mark.unit
@pytest.mark.parametrize('seed', range(20))
def test_corrupt_frame_always_fails_decode(seed) -> None:
    """A single flipped bit after the header never decodes."""
    frame = encode(Message(MessageKind.LOG_BATCH, 9, bytes(range(64))))
    damaged = corrupt_frame(frame, substream(seed, 'corrupt'))
    assert damaged != frame
    assert damaged[:8] == frame[:8]
    with pytest.raises((CorruptionError, ProtocolError)):
        decode(damaged)


@pytest.mark.unit
def test_hello_body() -> None:
    hello = Hello(12, 2, vehicle_token(0, 12), PolicyMode.FL_PARAMS, 3)
    assert unpack_hello(pack_hello(hello)) == hello
    with pytest.raises(EncodeError):
        pack_hello(Hello(1, 1, b'short', PolicyMode.ML_LOGS, 0))
    with pytest.raises(ProtocolError):
        unpack_hello(pack_hello(hello)[:-1])


@pytest.mark.unit
def test_ack_body() -> None:
    assert pack_ack() == b''
    assert unpack_ack(b'') == (AckStatus.OK, '')
    body = pack_ack(AckStatus.AUTH_FAILED, 'bad token')
    assert unpack_ack(body) == (AckStatus.AUTH_FAILED, 'bad token')
    with pytest.raises(ProtocolError):
        unpack_ack(b'\x09')


@pytest.mark.unit
def test_log_batch_body_is_raw_trace() -> None:
    trace = empty_trace(5)
    trace['timestamp_us'] = np.arange(5) * 1000
    trace['message_id'] = 0x100
    trace['attack_tag'][2] = 1
    body = pack_log_batch(4, 1, trace)

    assert len(body) == log_batch_body_size(5) == 12 + 5 * RECORD_BYTES
    batch = unpack_log_batch(body)
    assert (batch.vehicle_id, batch.oem_id) == (4, 1)
    assert np.array_equal(batch.trace, trace)
    with pytest.raises(ProtocolError):
        unpack_log_batch(body[:-1])


@pytest.mark.unit
def test_params_body_preserves_weights_and_metadata() -> None:
    params = init_params((16, 8, 1), seed=3, oem_id=2).with_weights(
        init_params((16, 8, 1), seed=3).weights, sample_count=40, version=5
    )
    restored = unpack_params(pack_params(params))
    assert restored == params
    with pytest.raises(ProtocolError):
        unpack_params(pack_params(params)[:-4])


@pytest.mark.unit
def test_model_update_carries_either_model_type() -> None:
    rng = substream(0, 'model-update')
    features = rng.random((60, 16))
    labels = (features[:, 5] > 0.5).astype(int)
    stumps = train_central(Dataset(features, labels), rounds=5)
    assert unpack_model_update(pack_model_update(stumps)) == stumps

    params = init_params((16, 4, 1), seed=1)
    assert unpack_model_update(pack_model_update(params)) == params
    with pytest.raises(ProtocolError):
        unpack_model_update(b'\x07')


@pytest.mark.unit
def test_alert_and_action_bodies() -> None:
    alert = Alert(3, 17, AlertKind.DOS, Severity.HIGH, 0.97, AlertSource.EDGE_ML)
    assert unpack_alert(pack_alert(alert)) == alert
    with pytest.raises(ProtocolError):
        unpack_alert(pack_alert(alert)[:-1])

    action = ResponseAction(ActionKind.APPLY_PATCH, 17, 'oem-1-patch', 2)
    assert unpack_action(pack_action(action)) == action
    with pytest.raises(ProtocolError):
        unpack_action(pack_action(action) + b'!')


@pytest.mark.unit
def test_frame_channel_counts_frames_and_bytes() -> None:
    link = deterministic(get_preset('EVSOAR-PLC100M'))
    channel = FrameChannel(link, substream(0, 'channel'))
    frame = encode(Message(MessageKind.ACK, 1))
    elapsed, received = channel.transfer(frame)

    assert received == frame
    assert elapsed == pytest.approx(link.latency_ms + len(frame) * 8 / 100e3)
    assert (channel.frames_sent, channel.bytes_sent) == (1, len(frame))


@pytest.mark.unit
def test_frame_channel_corrupts_when_asked() -> None:
    link = deterministic(get_preset('EVSOAR-PLC100M'))
    channel = FrameChannel(link, substream(0, 'channel'), corruption_prob=1.0)
    frame = encode(Message(MessageKind.ACK, 1))
    _, received = channel.transfer(frame)
    with pytest.raises(CorruptionError):
        decode(received)
    with pytest.raises(InvalidArgumentError):
        FrameChannel(link, substream(0), corruption_prob=1.5)


def _pick(rng, enum):
    members = list(enum)
    return members[int(rng.integers(len(members)))]


def _random_bodies(rng):
    """One (kind, body, unpack, value) per message kind with random fields."""
    trace = empty_trace(int(rng.integers(1, 20)))
    trace['timestamp_us'] = np.sort(rng.integers(0, 2**40, size=len(trace)))
    trace['component_id'] = rng.integers(0, 2**16, size=len(trace))
    trace['message_id'] = rng.integers(0, 0x800, size=len(trace))
    trace['payload'] = rng.integers(0, 256, size=(len(trace), 8))
    trace['attack_tag'] = rng.integers(0, 5, size=len(trace))

    hello = Hello(
        int(rng.integers(2**32)),
        int(rng.integers(2**32)),
        rng.bytes(16),
        _pick(rng, PolicyMode),
        int(rng.integers(2**16)),
    )
    ack = (_pick(rng, AckStatus), rng.bytes(6).hex())
    params = init_params((16, 5, 1), seed=int(rng.integers(100))).with_weights(
        rng.normal(size=weight_count((16, 5, 1))),
        sample_count=int(rng.integers(2**40)),
        oem_id=int(rng.integers(2**32)),
        version=int(rng.integers(2**32)),
    )
    model = init_params((16, 3, 1), seed=int(rng.integers(100)), oem_id=2)
    alert = Alert(
        int(rng.integers(2**32)),
        int(rng.integers(2**16)),
        _pick(rng, AlertKind),
        _pick(rng, Severity),
        float(rng.random()),
        _pick(rng, AlertSource),
    )
    action = ResponseAction(
        _pick(rng, ActionKind),
        int(rng.integers(2**16)),
        rng.bytes(10).hex(),
        int(rng.integers(2**32)),
    )
    opaque = rng.bytes(int(rng.integers(0, 32)))
    return [
        (MessageKind.HELLO, pack_hello(hello), unpack_hello, hello),
        (MessageKind.AUTH_OK, opaque, bytes, opaque),
        (MessageKind.LOG_BATCH, pack_log_batch(3, 1, trace), unpack_log_batch, None),
        (MessageKind.FL_PARAMS, pack_params(params), unpack_params, params),
        (
            MessageKind.MODEL_UPDATE,
            pack_model_update(model),
            unpack_model_update,
            model,
        ),
        (MessageKind.ALERT, pack_alert(alert), unpack_alert, alert),
        (MessageKind.RESPONSE_ACTION, pack_action(action), unpack_action, action),
        (MessageKind.ACK, pack_ack(*ack), unpack_ack, ack),
        (MessageKind.DISCONNECT, opaque, bytes, opaque),
    ], trace


@pytest.mark.unit
@pytest.mark.parametrize('seed', range(8))
def test_every_kind_survives_encode_and_decode(seed) -> None:
    """Random bodies of all nine kinds come back field for field."""
    rng = substream(seed, 'round-trip')
    bodies, trace = _random_bodies(rng)
    assert {kind for kind, *_ in bodies} == set(MessageKind)

    for kind, body, unpack, value in bodies:
        session = 0 if kind == MessageKind.DISCONNECT else int(rng.integers(2**62))
        msg = Message(kind, session, body)
        frame = encode(msg)
        assert len(frame) == frame_size(kind, len(body))
        restored = decode(frame)
        assert restored == msg
        if kind == MessageKind.LOG_BATCH:
            batch = unpack(restored.body)
            assert (batch.vehicle_id, batch.oem_id) == (3, 1)
            assert np.array_equal(batch.trace, trace)
        else:
            assert unpack(restored.body) == value
