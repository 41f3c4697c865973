"""Binary framing between the perception side and the arm side.

Frame layout, little-endian throughout::

    offset  size  field
    0       4     magic b"HOI1"
    4       1     type   1 PoseSample | 2 ServoCommand | 3 StateReport | 4 GateDecision
    5       8     timestamp, microseconds (u64)
    13      4     payload length (u32)
    17      n     payload

Payloads:

    PoseSample    63 x f32 joint-major coordinates (m)              252 bytes
    ServoCommand  6 x f32 pose (x, y, z, rx, ry, rz) + u8 gripper    25 bytes
    StateReport   ServoCommand layout + u8 status                    26 bytes
    GateDecision  u8 class code                                       1 byte

Gripper byte: 0 no change, 1 open, 2 close. Status byte: 0 ok, 1 safety stop.
"""
from __future__ import annotations

import collections
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional, Union

MAGIC = b"HOI1"
HEADER = struct.Struct("<4sBQI")
HEADER_SIZE = HEADER.size  # 17
DEFAULT_PORT = 30017

_POSE = struct.Struct("<63f")
_SERVO = struct.Struct("<6fB")
_STATE = struct.Struct("<6fBB")
_GATE = struct.Struct("<B")


class MessageType(IntEnum):
    POSE_SAMPLE = 1
    SERVO_COMMAND = 2
    STATE_REPORT = 3
    GATE_DECISION = 4


PAYLOAD_SIZE = {
    MessageType.POSE_SAMPLE: _POSE.size,
    MessageType.SERVO_COMMAND: _SERVO.size,
    MessageType.STATE_REPORT: _STATE.size,
    MessageType.GATE_DECISION: _GATE.size,
}

GRIPPER_NONE, GRIPPER_OPEN, GRIPPER_CLOSE = 0, 1, 2
STATUS_OK, STATUS_SAFETY_STOP = 0, 1


class EncodeError(ValueError):
    pass


class ProtocolError(ValueError):
    def __init__(self, reason: str, offset: int, skip: int):
        super().__init__(reason, offset)
        self.reason = reason
        self.offset = offset
        self.skip = skip

    def __str__(self):
        return f"{self.reason} at offset {self.offset}"

    def __repr__(self):
        return f"ProtocolError({str(self)!r})"


class SessionClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class PoseSample:
    joints: tuple  # 63 floats


@dataclass(frozen=True)
class ServoSetpoint:
    pose: tuple  # x, y, z, rx, ry, rz
    gripper: int = GRIPPER_NONE


@dataclass(frozen=True)
class StateReport:
    pose: tuple
    gripper: int = GRIPPER_NONE
    status: int = STATUS_OK


@dataclass(frozen=True)
class GateDecision:
    code: int


Body = Union[PoseSample, ServoSetpoint, StateReport, GateDecision]
_KIND = {PoseSample: MessageType.POSE_SAMPLE, ServoSetpoint: MessageType.SERVO_COMMAND,
         StateReport: MessageType.STATE_REPORT, GateDecision: MessageType.GATE_DECISION}


@dataclass(frozen=True)
class WireMessage:
    timestamp_us: int
    body: Body

    @property
    def kind(self) -> MessageType:
        return _KIND[type(self.body)]


def f32(values) -> tuple:
    """Round values to what survives the wire."""
    return struct.unpack(f"<{len(values)}f", struct.pack(f"<{len(values)}f", *values))


def _byte(value, allowed, what) -> int:
    if not isinstance(value, int) or value not in allowed:
        raise EncodeError(f"invalid {what} byte {value!r}")
    return value


def encode(message: WireMessage) -> bytes:
    ts = message.timestamp_us
    if not isinstance(ts, int) or not 0 <= ts < 2 ** 64:
        raise EncodeError(f"timestamp {ts!r} does not fit u64 microseconds")
    body = message.body
    try:
        if isinstance(body, PoseSample):
            if len(body.joints) != 63:
                raise EncodeError("PoseSample needs 63 coordinates")
            payload = _POSE.pack(*body.joints)
        elif isinstance(body, ServoSetpoint):
            if len(body.pose) != 6:
                raise EncodeError("ServoCommand needs 6 pose values")
            payload = _SERVO.pack(*body.pose, _byte(body.gripper, (0, 1, 2), "gripper"))
        elif isinstance(body, StateReport):
            if len(body.pose) != 6:
                raise EncodeError("StateReport needs 6 pose values")
            payload = _STATE.pack(*body.pose, _byte(body.gripper, (0, 1, 2), "gripper"),
                                  _byte(body.status, (0, 1), "status"))
        elif isinstance(body, GateDecision):
            payload = _GATE.pack(_byte(body.code, range(256), "class"))
        else:
            raise EncodeError(f"unsupported body {type(body).__name__}")
    except (struct.error, OverflowError, TypeError) as exc:
        raise EncodeError(str(exc)) from None
    values = getattr(body, "joints", None) or getattr(body, "pose", ())
    if any(v != v or v in (float("inf"), float("-inf")) for v in values):
        raise EncodeError("non-finite value")
    return HEADER.pack(MAGIC, message.kind, ts, len(payload)) + payload


def _parse_body(kind: MessageType, payload: bytes) -> Body:
    if kind is MessageType.POSE_SAMPLE:
        return PoseSample(_POSE.unpack(payload))
    if kind is MessageType.SERVO_COMMAND:
        *pose, grip = _SERVO.unpack(payload)
        return ServoSetpoint(tuple(pose), grip)
    if kind is MessageType.STATE_REPORT:
        *pose, grip, status = _STATE.unpack(payload)
        return StateReport(tuple(pose), grip, status)
    return GateDecision(_GATE.unpack(payload)[0])


def _resync_skip(buf, start: int) -> int:
    """Bytes to drop so the buffer begins at the next possible magic."""
    k = buf.find(MAGIC, start + 1)
    if k >= 0:
        return k - start
    # keep a tail that could be the start of a magic split across reads
    n = len(buf)
    for keep in range(min(3, n - start - 1), 0, -1):
        if MAGIC.startswith(bytes(buf[n - keep:])):
            return n - keep - start
    return n - start


def decode(buf, offset: int = 0):
    """Decode one frame at ``offset``.

    Returns ``(message, consumed)``, or ``(None, 0)`` when more bytes are
    needed. Raises :class:`ProtocolError` whose ``skip`` tells the caller how
    many bytes to drop to reach the next magic candidate.
    """
    n = len(buf) - offset
    head = bytes(buf[offset:offset + 4])
    if not MAGIC.startswith(head[:n]) or (n >= 4 and head != MAGIC):
        raise ProtocolError("bad magic", offset, _resync_skip(buf, offset))
    if n < HEADER_SIZE:
        return None, 0
    _, kind, ts, length = HEADER.unpack_from(buf, offset)
    try:
        kind = MessageType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}", offset, _resync_skip(buf, offset)) from None
    if length != PAYLOAD_SIZE[kind]:
        raise ProtocolError(f"length {length} does not match type {kind.name}", offset,
                            _resync_skip(buf, offset))
    total = HEADER_SIZE + length
    if n < total:
        return None, 0
    payload = bytes(buf[offset + HEADER_SIZE:offset + total])
    return WireMessage(ts, _parse_body(kind, payload)), total


class StreamDecoder:
    """Incremental decoder over arbitrary chunk boundaries."""

    def __init__(self):
        self._buf = bytearray()
        self.errors: list[ProtocolError] = []
        self._consumed = 0
        self._in_error = False

    def feed(self, data: bytes) -> list:
        """Decode everything available; returns messages and ProtocolErrors in stream order."""
        self._buf += data
        out = []
        pos = 0
        while pos < len(self._buf):
            try:
                msg, used = decode(self._buf, pos)
            except ProtocolError as err:
                if not self._in_error:
                    err.offset += self._consumed
                    out.append(err)
                    self.errors.append(err)
                self._in_error = True
                pos += max(err.skip, 1)
                continue
            if msg is None:
                break
            self._in_error = False
            out.append(msg)
            pos += used
        del self._buf[:pos]
        self._consumed += pos
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# --- transports ------------------------------------------------------------------

class LoopbackTransport:
    """One direction of an in-memory reliable byte stream."""

    def __init__(self):
        self._chunks: collections.deque[bytes] = collections.deque()
        self._lock = threading.Lock()
        self.closed = False

    def send(self, data: bytes) -> None:
        with self._lock:
            if self.closed:
                raise SessionClosed("transport closed")
            self._chunks.append(bytes(data))

    def recv(self) -> bytes:
        with self._lock:
            data = b"".join(self._chunks)
            self._chunks.clear()
            return data

    def close(self) -> None:
        with self._lock:
            self.closed = True


def loopback_pair():
    """Two connected endpoints (a_to_b, b_to_a)."""
    return LoopbackTransport(), LoopbackTransport()


class SocketTransport:
    """Byte-stream transport over a connected socket (non-blocking reads)."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setblocking(False)
        self.closed = False

    def send(self, data: bytes) -> None:
        if self.closed:
            raise SessionClosed("transport closed")
        try:
            self.sock.setblocking(True)
            self.sock.sendall(data)
        except OSError as exc:
            self.closed = True
            raise SessionClosed(str(exc)) from None
        finally:
            if not self.closed:
                self.sock.setblocking(False)

    def recv(self) -> bytes:
        chunks = []
        while True:
            try:
                data = self.sock.recv(65536)
            except BlockingIOError:
                break
            except OSError:
                self.closed = True
                break
            if not data:
                self.closed = True
                break
            chunks.append(data)
        return b"".join(chunks)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 5.0) -> SocketTransport:
    return SocketTransport(socket.create_connection((host, port), timeout=timeout))


def listen(host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> socket.socket:
    server = socket.create_server((host, port))
    return server


# --- sessions ----------------------------------------------------------------------

class ProducerSession:
    def __init__(self, transport):
        self.transport = transport
        self.sent = 0

    @property
    def closed(self) -> bool:
        return self.transport.closed

    def send(self, message: WireMessage) -> None:
        if self.transport.closed:
            raise SessionClosed("session closed")
        self.transport.send(encode(message))
        self.sent += 1

    def close(self) -> None:
        self.transport.close()


class ConsumerSession:
    """Latest value per message type plus an ordered log for metrics.

    ``clock()`` returns the delivery time in microseconds; latency is delivery
    time minus the message timestamp.
    """

    def __init__(self, transport, clock: Callable[[], int], log_capacity: Optional[int] = None):
        self.transport = transport
        self.clock = clock
        self.decoder = StreamDecoder()
        self.latest: dict[MessageType, WireMessage] = {}
        self.log: collections.deque = collections.deque()
        self.log_capacity = log_capacity
        self.overflowed = 0
        self.latencies_us: list[int] = []
        self.errors: list[ProtocolError] = []
        self._unread: dict[MessageType, bool] = {}

    @property
    def closed(self) -> bool:
        return self.transport.closed

    def poll(self) -> list[WireMessage]:
        """Pull bytes from the transport; returns messages delivered by this call."""
        data = self.transport.recv()
        if not data:
            if self.transport.closed:
                raise SessionClosed("session closed")
            return []
        now = self.clock()
        delivered = []
        for item in self.decoder.feed(data):
            if isinstance(item, ProtocolError):
                self.errors.append(item)
                continue
            delivered.append(item)
            self.latest[item.kind] = item
            self._unread[item.kind] = True
            self.latencies_us.append(now - item.timestamp_us)
            if self.log_capacity is not None and len(self.log) >= self.log_capacity:
                self.overflowed += 1
                raise OverflowError("ordered log full; drain it before polling again")
            self.log.append(item)
        return delivered

    def take_latest(self, kind: MessageType) -> Optional[WireMessage]:
        """Newest unread message of ``kind`` (older unread ones are skipped)."""
        if self._unread.get(kind):
            self._unread[kind] = False
            return self.latest[kind]
        return None

    def drain_log(self) -> list[WireMessage]:
        out = list(self.log)
        self.log.clear()
        return out

    def close(self) -> None:
        self.transport.close()


def stream_session(transport, role: str, clock: Optional[Callable[[], int]] = None, **kwargs):
    if role == "producer":
        return ProducerSession(transport)
    if role == "consumer":
        if clock is None:
            import time
            clock = lambda: int(time.time() * 1e6)  # noqa: E731
        return ConsumerSession(transport, clock, **kwargs)
    raise ValueError(f"unknown role {role!r}")
