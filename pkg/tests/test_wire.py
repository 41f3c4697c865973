import socket
import struct
import threading

import pytest
from hypothesis import given, settings, strategies as st

from hoiassist import wire
from hoiassist.mailbox import LatestValue
from hoiassist.wire import (EncodeError, GateDecision, MessageType, PoseSample, ProtocolError, ServoSetpoint,
                            SessionClosed, StateReport, StreamDecoder, WireMessage, decode, encode, f32)

POSE = WireMessage(1_000, PoseSample(tuple(float(i) / 8 for i in range(63))))
GATE = WireMessage(2_000, GateDecision(3))


def test_frame_sizes():
    assert len(encode(POSE)) == 269
    assert len(encode(GATE)) == 18
    assert len(encode(WireMessage(0, ServoSetpoint((0.0,) * 6)))) == 17 + 25
    assert len(encode(WireMessage(0, StateReport((0.0,) * 6, 1, 1)))) == 17 + 26


def test_header_layout():
    raw = encode(GATE)
    assert raw[:4] == b"HOI1" and raw[4] == 4
    assert struct.unpack_from("<QI", raw, 5) == (2_000, 1)
    assert raw[17] == 3


def test_decode_needs_more():
    raw = encode(POSE)
    for cut in (0, 2, 16, 17, 268):
        assert decode(raw[:cut]) == (None, 0)
    assert decode(raw) == (POSE, 269)


def test_garbage_prefix_one_error_then_message():
    dec = StreamDecoder()
    out = dec.feed(b"\x00\x01\x02\x03" + encode(GATE))
    assert len(out) == 2
    assert isinstance(out[0], ProtocolError) and out[0].offset == 0
    assert out[1] == GATE


def test_protocol_errors():
    raw = bytearray(encode(GATE))
    raw[4] = 9
    with pytest.raises(ProtocolError, match="unknown message type"):
        decode(bytes(raw))
    raw = bytearray(encode(GATE))
    raw[13] = 2
    with pytest.raises(ProtocolError, match="length"):
        decode(bytes(raw))


floats = st.floats(-1e6, 1e6, allow_nan=False, width=32)
bodies = st.one_of(
    st.builds(PoseSample, st.tuples(*[floats] * 63)),
    st.builds(ServoSetpoint, st.tuples(*[floats] * 6), st.sampled_from([0, 1, 2])),
    st.builds(StateReport, st.tuples(*[floats] * 6), st.sampled_from([0, 1, 2]), st.sampled_from([0, 1])),
    st.builds(GateDecision, st.integers(0, 255)),
)
messages = st.builds(WireMessage, st.integers(0, 2 ** 64 - 1), bodies)


@given(messages)
def test_roundtrip(msg):
    raw = encode(msg)
    assert decode(raw) == (msg, len(raw))


@settings(max_examples=50)
@given(st.lists(messages, min_size=1, max_size=8), st.data())
def test_rechunking(msgs, data):
    stream = b"".join(encode(m) for m in msgs)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=10)))
    dec = StreamDecoder()
    out = []
    for a, b in zip([0] + cuts, cuts + [len(stream)]):
        out += dec.feed(stream[a:b])
    assert out == msgs and dec.pending == 0


def test_f32_rounding_is_what_arrives():
    msg = WireMessage(0, ServoSetpoint((0.1, 0.2, 0.3, 0.4, 0.5, 0.6)))
    got, _ = decode(encode(msg))
    assert got.body.pose == f32(msg.body.pose) != msg.body.pose


@pytest.mark.parametrize("msg", [
    WireMessage(-1, GATE.body),
    WireMessage(2 ** 64, GATE.body),
    WireMessage(0, PoseSample((0.0,) * 62)),
    WireMessage(0, ServoSetpoint((0.0,) * 6, gripper=3)),
    WireMessage(0, StateReport((0.0,) * 6, status=2)),
    WireMessage(0, GateDecision(256)),
    WireMessage(0, ServoSetpoint((float("nan"),) + (0.0,) * 5)),
    WireMessage(0, ServoSetpoint((1e39,) + (0.0,) * 5)),
])
def test_encode_errors(msg):
    with pytest.raises(EncodeError):
        encode(msg)


# --- sessions ---------------------------------------------------------------------------------

class Ticker:
    def __init__(self):
        self.now = 0

    def __call__(self):
        self.now += 100
        return self.now


def session_pair(**kw):
    link, _ = wire.loopback_pair()
    return wire.stream_session(link, "producer"), wire.stream_session(link, "consumer", Ticker(), **kw)


def test_loopback_delivers_in_order():
    prod, cons = session_pair()
    sent = [WireMessage(i, GateDecision(i % 4)) for i in range(100)]
    for m in sent:
        prod.send(m)
    assert cons.poll() == sent
    assert cons.drain_log() == sent
    assert all(lat >= 0 for lat in cons.latencies_us)


def test_latest_value_skips_but_log_keeps_everything():
    prod, cons = session_pair()
    for i in range(5):
        prod.send(WireMessage(i, ServoSetpoint((float(i),) + (0.0,) * 5)))
    prod.send(GATE)
    cons.poll()
    assert cons.take_latest(MessageType.SERVO_COMMAND).timestamp_us == 4
    assert cons.take_latest(MessageType.SERVO_COMMAND) is None
    assert cons.take_latest(MessageType.GATE_DECISION) == GATE
    assert [m.timestamp_us for m in cons.drain_log()] == [0, 1, 2, 3, 4, 2_000]


def test_log_overflow_raises():
    prod, cons = session_pair(log_capacity=3)
    for i in range(4):
        prod.send(WireMessage(i, GATE.body))
    with pytest.raises(OverflowError):
        cons.poll()
    assert cons.overflowed == 1


def test_disconnect_surfaces_at_both_ends():
    prod, cons = session_pair()
    prod.send(GATE)
    prod.close()
    with pytest.raises(SessionClosed):
        prod.send(GATE)
    assert cons.poll() == [GATE]  # buffered bytes still arrive
    with pytest.raises(SessionClosed):
        cons.poll()


def test_unknown_role():
    with pytest.raises(ValueError):
        wire.stream_session(wire.LoopbackTransport(), "observer")


def test_socket_transport_roundtrip():
    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]
    accepted = {}
    t = threading.Thread(target=lambda: accepted.setdefault("conn", server.accept()[0]))
    t.start()
    client = wire.connect("127.0.0.1", port)
    t.join(5)
    prod = wire.stream_session(client, "producer")
    cons = wire.stream_session(wire.SocketTransport(accepted["conn"]), "consumer")
    sent = [WireMessage(i, GateDecision(i % 4)) for i in range(50)] + [POSE]
    for m in sent:
        prod.send(m)
    got = []
    for _ in range(200):
        got += cons.poll()
        if len(got) == len(sent):
            break
        threading.Event().wait(0.005)
    assert got == sent
    prod.close()
    with pytest.raises(SessionClosed):
        for _ in range(200):
            cons.poll()
            threading.Event().wait(0.005)
    cons.close()
    server.close()


# --- mailbox ------------------------------------------------------------------------------------

def test_latest_value_mailbox():
    box = LatestValue()
    assert box.take() is None and box.version == 0
    box.put(1)
    box.put(2)
    assert box.peek() == 2 and box.take() == 2 and box.take() is None
    assert box.peek() == 2 and box.version == 2


def test_latest_value_threads():
    box = LatestValue()
    writers = [threading.Thread(target=lambda w=w: [box.put((w, i)) for i in range(1000)]) for w in range(4)]
    for t in writers:
        t.start()
    for t in writers:
        t.join()
    assert box.version == 4000 and box.take()[1] == 999
