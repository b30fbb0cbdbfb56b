"""Coordinator-side transports to the zone controllers.

A transport delivers one message per zone and waits until every zone has
answered before returning. The coordinator never reads a reply of an
exchange before all of that exchange's messages are out.
"""

import logging
import threading
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from typing import Protocol

import zmq

from dpn_building.messages import (
    PROTOCOL,
    Abort,
    Handshake,
    MalformedFrameError,
    Message,
    decode_message,
    encode_message,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 30.0
POLL_INTERVAL_MS = 100


class TransportTimeoutError(TimeoutError):
    """Raised when zone controllers do not answer in time."""

    pass


class HandshakeError(ValueError):
    """Raised when a zone controller rejects or garbles the handshake."""

    pass


class Handler(Protocol):
    def handle(self, message: Message) -> Message: ...


class Transport(Protocol):
    n_zones: int

    def exchange(self, messages: Sequence[Message]) -> list[Message]: ...

    def close(self) -> None: ...


def _check_count(messages: Sequence[Message], n_zones: int) -> None:
    if len(messages) != n_zones:
        raise ValueError(f"{len(messages)} messages for {n_zones} zones")


def handshake(transport: Transport, horizon: int) -> None:
    """Agree on protocol, zone count and horizon with every controller.

    Raises:
        HandshakeError: If a controller answers with anything but the same handshake
    """
    hello = Handshake(n_zones=transport.n_zones, horizon=horizon)
    replies = transport.exchange([hello] * transport.n_zones)
    for zone, reply in enumerate(replies):
        if reply != hello:
            raise HandshakeError(f"zone {zone} answered the {PROTOCOL} handshake with {reply}")
    logger.debug("Handshake with %d zones, horizon %d", transport.n_zones, horizon)


class InProcessTransport:
    """Zone controllers called on a thread pool inside this process.

    Messages are immutable, so handing one to a worker thread passes it by value.
    """

    n_zones: int
    timeout_s: float

    def __init__(
        self, handlers: Sequence[Handler], workers: int = 1, timeout_s: float = DEFAULT_TIMEOUT_S
    ):
        """Start the worker pool.

        Args:
            handlers: One controller per zone, in zone order
            workers: Worker threads; 1 runs the zones one after another
            timeout_s: Longest wait for an exchange to complete
        """
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self._handlers = list(handlers)
        self.n_zones = len(self._handlers)
        self.timeout_s = timeout_s
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="dpn-lc")
        self._broken = False

    def exchange(self, messages: Sequence[Message]) -> list[Message]:
        """Send messages[i] to zone i and collect every reply.

        Raises:
            TransportTimeoutError: If some zones have not answered after timeout_s, or
                an earlier exchange timed out
        """
        _check_count(messages, self.n_zones)
        if self._broken:
            raise TransportTimeoutError("zone controllers are unusable after an earlier timeout")
        futures = [
            self._executor.submit(handler.handle, message)
            for handler, message in zip(self._handlers, messages)
        ]
        deadline = time.monotonic() + self.timeout_s
        replies: list[Message] = []
        late = []
        for zone, future in enumerate(futures):
            try:
                replies.append(future.result(timeout=max(0.0, deadline - time.monotonic())))
            except FutureTimeoutError:
                late.append(zone)
        if late:
            self._broken = True
            for future in futures:
                future.cancel()
            raise TransportTimeoutError(f"zones {late} did not answer within {self.timeout_s} s")
        return replies

    def close(self) -> None:
        # A controller stuck past the timeout keeps its worker thread; do not wait on it.
        self._executor.shutdown(wait=not self._broken, cancel_futures=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def serve(handler: Handler, socket: zmq.Socket, stop: threading.Event) -> None:
    """Answer newline-delimited JSON requests on a REP socket until stop is set."""
    poller = zmq.Poller()
    poller.register(socket, zmq.POLLIN)
    try:
        while not stop.is_set():
            if not dict(poller.poll(POLL_INTERVAL_MS)):
                continue
            frame = socket.recv_string()
            try:
                reply = handler.handle(decode_message(frame))
            except MalformedFrameError as e:
                logger.error("Malformed frame: %s", str(e).replace("\n", " "))
                reply = Abort(reason=str(e))
            except Exception as e:
                logger.exception("Controller failed")
                reply = Abort(reason=f"{type(e).__name__}: {e}")
            socket.send_string(encode_message(reply))
    finally:
        socket.close(linger=0)


class ZmqTransport:
    """Zone controllers behind ZeroMQ REQ/REP sockets on TCP.

    Each zone gets a REP socket bound to a random local port and served from
    its own thread; the coordinator holds one REQ socket per zone.
    """

    n_zones: int
    timeout_s: float
    endpoints: list[str]

    def __init__(
        self,
        handlers: Sequence[Handler],
        timeout_s: float = DEFAULT_TIMEOUT_S,
        host: str = "127.0.0.1",
    ):
        """Bind one server socket per zone and connect to it.

        Args:
            handlers: One controller per zone, in zone order
            timeout_s: Longest wait for an exchange to complete
            host: Interface the zone sockets bind to
        """
        self.n_zones = len(handlers)
        self.timeout_s = timeout_s
        self.endpoints = []
        self._context = zmq.Context()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._clients: list[zmq.Socket] = []
        self._broken: str | None = None
        for zone, handler in enumerate(handlers):
            server = self._context.socket(zmq.REP)
            port = server.bind_to_random_port(f"tcp://{host}")
            endpoint = f"tcp://{host}:{port}"
            thread = threading.Thread(
                target=serve, args=(handler, server, self._stop), name=f"dpn-lc-{zone}", daemon=True
            )
            thread.start()
            client = self._context.socket(zmq.REQ)
            client.setsockopt(zmq.LINGER, 0)
            client.connect(endpoint)
            self._threads.append(thread)
            self._clients.append(client)
            self.endpoints.append(endpoint)
        logger.debug("Zone sockets: %s", ", ".join(self.endpoints))

    def exchange(self, messages: Sequence[Message]) -> list[Message]:
        """Send every frame, then poll until each zone has replied.

        Raises:
            TransportTimeoutError: If some zones have not answered after timeout_s, or
                an earlier exchange left the sockets unusable
            MalformedFrameError: If a reply cannot be decoded
        """
        _check_count(messages, self.n_zones)
        if self._broken:
            raise TransportTimeoutError(f"sockets are unusable after {self._broken}")
        for client, message in zip(self._clients, messages):
            client.send_string(encode_message(message))

        poller = zmq.Poller()
        for client in self._clients:
            poller.register(client, zmq.POLLIN)
        replies: list[Message | None] = [None] * self.n_zones
        pending = set(range(self.n_zones))
        deadline = time.monotonic() + self.timeout_s
        while pending:
            remaining_ms = int((deadline - time.monotonic()) * 1000)
            if remaining_ms <= 0:
                break
            ready = dict(poller.poll(remaining_ms))
            for zone in sorted(pending):
                client = self._clients[zone]
                if ready.get(client) == zmq.POLLIN:
                    try:
                        replies[zone] = decode_message(client.recv_string())
                    except MalformedFrameError:
                        # Other REQ sockets may still owe a reply.
                        self._broken = f"a malformed reply from zone {zone}"
                        raise
                    poller.unregister(client)
                    pending.discard(zone)
        if pending:
            self._broken = "an earlier timeout"
            raise TransportTimeoutError(
                f"zones {sorted(pending)} did not answer within {self.timeout_s} s"
            )
        return [reply for reply in replies if reply is not None]

    def close(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5.0)
        for client in self._clients:
            client.close(linger=0)
        stuck = [thread.name for thread in self._threads if thread.is_alive()]
        if stuck:
            # term() would block on the sockets those threads still hold.
            logger.warning("Leaving zone sockets of %s open", ", ".join(stuck))
            return
        self._context.term()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def open_transport(
    kind: str, handlers: Sequence[Handler], workers: int = 1, timeout_s: float = DEFAULT_TIMEOUT_S
) -> InProcessTransport | ZmqTransport:
    """Build the transport named by kind ("inproc" or "socket")."""
    if kind == "inproc":
        return InProcessTransport(handlers, workers=workers, timeout_s=timeout_s)
    if kind == "socket":
        return ZmqTransport(handlers, timeout_s=timeout_s)
    raise ValueError(f"unknown transport {kind!r}")
