"""Small synchronous client for the line protocol.

A background reader thread splits inbound frames into deliveries (handed to a
callback or buffered) and control frames (CONNACK/SUBACK/FSUBACK/ERROR).
Control frames arrive in request order, so each request that expects a reply
just waits for the next control frame.
"""

from __future__ import annotations

import socket
import threading
from collections import deque
from queue import Empty, Queue
from typing import Callable

from . import protocol
from .broker import Topic, TopicFilter
from .errors import BrokerUnreachable, LotusError
from .functions import FunctionSpec
from .geo import Geofence, Location, WORLD
from .protocol import (
    Connack,
    Connect,
    Delivery,
    ErrorFrame,
    Fsub,
    Fsuback,
    Funsub,
    Pingloc,
    Publish,
    Suback,
    Subscribe,
    Unsubscribe,
)


class ClientError(LotusError):
    """An ERROR frame received while waiting for a reply."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class LotusClient:
    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        location: Location | None = None,
        on_delivery: Callable[[Delivery], None] | None = None,
        timeout: float = 10.0,
    ):
        self.client_id = client_id
        self._timeout = timeout
        self._on_delivery = on_delivery
        self.deliveries: deque[Delivery] = deque()
        self._control: Queue = Queue()
        self._send_lock = threading.Lock()
        try:
            self._sock = socket.create_connection((host, port), timeout=10.0)
        except OSError as e:
            raise BrokerUnreachable(f"{host}:{port}: {e}") from e
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self._send(Connect(client_id, location))
        self._expect(Connack)

    # -- requests ----------------------------------------------------------

    def pingloc(self, location: Location) -> None:
        self._send(Pingloc(location))

    def subscribe(self, filter: str | TopicFilter, fence: Geofence = WORLD) -> str:
        if isinstance(filter, str):
            filter = TopicFilter.parse(filter)
        self._send(Subscribe(filter, fence))
        return self._expect(Suback).sub_id

    def unsubscribe(self, sub_id: str) -> None:
        self._send(Unsubscribe(sub_id))

    def publish(self, topic: str | Topic, payload: bytes, fence: Geofence = WORLD) -> None:
        if isinstance(topic, str):
            topic = Topic.parse(topic)
        self._send(Publish(topic, payload, fence))

    def function_subscribe(
        self, filter: str | TopicFilter, function: str | FunctionSpec, fence: Geofence = WORLD
    ) -> tuple[str, Topic]:
        if isinstance(filter, str):
            filter = TopicFilter.parse(filter)
        self._send(Fsub(filter, fence, function))
        ack = self._expect(Fsuback)
        return ack.fsub_id, ack.derived_topic

    def function_unsubscribe(self, fsub_id: str) -> None:
        self._send(Funsub(fsub_id))

    def next_error(self, timeout: float | None = None) -> ErrorFrame:
        """Wait for an ERROR frame (they share the control queue with acks)."""
        frame = self._next_control(timeout)
        if not isinstance(frame, ErrorFrame):
            raise AssertionError(f"expected ERROR, got {frame!r}")
        return frame

    def wait_deliveries(self, n: int, timeout: float = 10.0) -> list[Delivery]:
        deadline = threading.Event()
        waited = 0.0
        while len(self.deliveries) < n and waited < timeout:
            deadline.wait(0.02)
            waited += 0.02
        return list(self.deliveries)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    # -- plumbing ----------------------------------------------------------

    def _send(self, frame) -> None:
        data = protocol.encode_frame(frame)
        with self._send_lock:
            self._sock.sendall(data)

    def _next_control(self, timeout: float | None = None):
        try:
            return self._control.get(timeout=timeout if timeout is not None else self._timeout)
        except Empty:
            raise TimeoutError("no reply from broker") from None

    def _expect(self, frame_type):
        frame = self._next_control()
        if isinstance(frame, ErrorFrame):
            raise ClientError(frame.code, frame.detail)
        if not isinstance(frame, frame_type):
            raise AssertionError(f"expected {frame_type.__name__}, got {frame!r}")
        return frame

    def _read_loop(self) -> None:
        try:
            for line in self._rfile:
                frame = protocol.decode_frame(line)
                if isinstance(frame, Delivery):
                    if self._on_delivery is not None:
                        self._on_delivery(frame)
                    else:
                        self.deliveries.append(frame)
                else:
                    self._control.put(frame)
        except (OSError, ValueError, LotusError):
            pass
