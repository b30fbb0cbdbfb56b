"""Tests for the in-process and socket transports."""

import threading
import time

import pytest

from dpn_building import transport as transport_module
from dpn_building.control import ControlAbortedError, ControlConfig, Coordinator
from dpn_building.messages import (
    Abort,
    Converged,
    Handshake,
    MalformedFrameError,
    Message,
    PowerReply,
    PowerTarget,
    encode_message,
)
from dpn_building.transport import (
    HandshakeError,
    InProcessTransport,
    TransportTimeoutError,
    ZmqTransport,
    handshake,
    open_transport,
)


class Doubler:
    """Answers a power target with twice the target, tagged with its zone."""

    def __init__(self, zone: int):
        self.zone = zone
        self.seen: list[Message] = []

    def handle(self, message: Message) -> Message:
        self.seen.append(message)
        match message:
            case Handshake():
                return message
            case PowerTarget():
                return PowerReply(
                    zone=self.zone,
                    iter=message.iter,
                    u_pred=[2.0 * u for u in message.u_bar],
                    delta=[0.0] * len(message.u_bar),
                    u_held=[2.0 * u for u in message.u_bar],
                )
        return message


class Sleeper:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def handle(self, message: Message) -> Message:
        time.sleep(self.seconds)
        return message


class Hung:
    """Blocks until released, far past any exchange timeout."""

    def __init__(self):
        self.release = threading.Event()

    def handle(self, message: Message) -> Message:
        self.release.wait(10.0)
        return message


class Broken:
    def handle(self, message: Message) -> Message:
        raise RuntimeError("controller crashed")


class Refuser:
    def handle(self, message: Message) -> Message:
        return Abort(reason="wrong horizon", zone=0)


def targets(n_zones: int, iteration: int = 1) -> list[PowerTarget]:
    return [PowerTarget(zone=i, iter=iteration, u_bar=[float(i), 1.0], lam=[0.0, 0.0]) for i in range(n_zones)]


def test_inproc_replies_in_zone_order():
    """Test that reply i comes from zone i whatever the worker count."""
    for workers in (1, 3):
        with InProcessTransport([Doubler(i) for i in range(3)], workers=workers) as transport:
            replies = transport.exchange(targets(3))

        assert [r.zone for r in replies] == [0, 1, 2]
        assert replies[2].u_pred == (4.0, 2.0)


def test_inproc_rejects_wrong_message_count():
    """Test that an exchange needs exactly one message per zone."""
    with InProcessTransport([Doubler(0), Doubler(1)]) as transport:
        with pytest.raises(ValueError, match="2 zones"):
            transport.exchange(targets(3))


def test_inproc_rejects_zero_workers():
    """Test that at least one worker thread is required."""
    with pytest.raises(ValueError, match="workers"):
        InProcessTransport([Doubler(0)], workers=0)


def test_inproc_timeout_names_late_zones():
    """Test that a slow zone raises TransportTimeoutError naming it."""
    transport = InProcessTransport([Doubler(0), Sleeper(0.5)], workers=2, timeout_s=0.05)
    try:
        with pytest.raises(TransportTimeoutError, match=r"\[1\]"):
            transport.exchange([Converged(iter=1)] * 2)
    finally:
        transport.close()


def test_inproc_timeout_breaks_the_transport():
    """Test that a hung zone fails later exchanges at once and does not block close."""
    hung = Hung()
    transport = InProcessTransport([Doubler(0), hung], workers=1, timeout_s=0.05)
    try:
        with pytest.raises(TransportTimeoutError, match=r"\[1\]"):
            transport.exchange([Converged(iter=1)] * 2)
        started = time.monotonic()
        with pytest.raises(TransportTimeoutError, match="earlier timeout"):
            transport.exchange([Converged(iter=2)] * 2)
        transport.close()
        assert time.monotonic() - started < 1.0
    finally:
        hung.release.set()


def test_handshake_accepts_echo():
    """Test that controllers echoing the handshake pass."""
    handlers = [Doubler(0), Doubler(1)]
    with InProcessTransport(handlers) as transport:
        handshake(transport, horizon=4)

    assert handlers[0].seen == [Handshake(n_zones=2, horizon=4)]


def test_handshake_rejects_refusal():
    """Test that any answer but the same handshake raises HandshakeError."""
    with InProcessTransport([Doubler(0), Refuser()]) as transport:
        with pytest.raises(HandshakeError, match="zone 1"):
            handshake(transport, horizon=4)


def test_socket_matches_inproc():
    """Test that both transports deliver identical replies."""
    with InProcessTransport([Doubler(i) for i in range(3)]) as transport:
        expected = [transport.exchange(targets(3, k)) for k in (1, 2)]
    with ZmqTransport([Doubler(i) for i in range(3)], timeout_s=5.0) as transport:
        handshake(transport, horizon=2)
        received = [transport.exchange(targets(3, k)) for k in (1, 2)]

    assert received == expected


def test_socket_endpoints_are_distinct():
    """Test that every zone gets its own local endpoint."""
    with ZmqTransport([Doubler(0), Doubler(1)], timeout_s=5.0) as transport:
        assert len(set(transport.endpoints)) == 2
        assert all(e.startswith("tcp://127.0.0.1:") for e in transport.endpoints)


def test_socket_controller_failure_becomes_abort():
    """Test that an exception inside a served controller is answered with Abort."""
    with ZmqTransport([Doubler(0), Broken()], timeout_s=5.0) as transport:
        replies = transport.exchange([Converged(iter=1)] * 2)

    assert replies[0] == Converged(iter=1)
    assert isinstance(replies[1], Abort)
    assert "controller crashed" in replies[1].reason


def test_socket_timeout_breaks_the_transport():
    """Test that after a timeout every later exchange fails at once."""
    with ZmqTransport([Doubler(0), Sleeper(0.5)], timeout_s=0.1) as transport:
        with pytest.raises(TransportTimeoutError, match=r"\[1\]"):
            transport.exchange([Converged(iter=1)] * 2)
        started = time.monotonic()
        with pytest.raises(TransportTimeoutError, match="earlier timeout"):
            transport.exchange([Converged(iter=2)] * 2)
        assert time.monotonic() - started < 0.1


def test_socket_malformed_reply_breaks_the_transport(monkeypatch):
    """Test that a garbled reply leaves the transport failing fast, so an abort still goes through."""

    def garble_zone_1(message: Message) -> str:
        if isinstance(message, PowerReply) and message.zone == 1:
            return "{not json\n"
        return encode_message(message)

    monkeypatch.setattr(transport_module, "encode_message", garble_zone_1)
    with ZmqTransport([Doubler(i) for i in range(3)], timeout_s=5.0) as transport:
        with pytest.raises(MalformedFrameError, match="not JSON"):
            transport.exchange(targets(3))
        with pytest.raises(TransportTimeoutError, match="malformed reply from zone 1"):
            transport.exchange(targets(3, 2))
        with pytest.raises(ControlAbortedError, match="bad frame"):
            Coordinator(transport, ControlConfig()).abort("bad frame")


def test_open_transport_by_name():
    """Test that the transport kinds map to their classes."""
    with open_transport("inproc", [Doubler(0)]) as transport:
        assert isinstance(transport, InProcessTransport)
    with open_transport("socket", [Doubler(0)], timeout_s=5.0) as transport:
        assert isinstance(transport, ZmqTransport)
    with pytest.raises(ValueError, match="carrier-pigeon"):
        open_transport("carrier-pigeon", [Doubler(0)])
