"""One broker node: pub/sub engine, function runtime, and bridges wired together."""

from __future__ import annotations

import time
from typing import Callable

from .bridge import BridgeManager
from .broker import DEFAULT_MAX_PAYLOAD, Broker, Transport
from .functions import FunctionRuntime
from .geo import Location


class LotusNode:
    """In-process composition root; the TCP server and the bench both sit on top of this."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD, clock: Callable[[], int] = time.monotonic_ns):
        self.broker = Broker(max_payload=max_payload, clock=clock)
        self.runtime = FunctionRuntime(max_payload=max_payload)
        self.bridges = BridgeManager(self.broker, self.runtime)

    def connect_client(self, client_id: str, transport: Transport, location: Location | None = None) -> None:
        """Register a session; an existing session under the same id is evicted
        and its subscriptions (plain and function) are released first."""
        if self.broker.has_session(client_id):
            self.bridges.release_client(client_id)
        self.broker.connect(client_id, transport, location)

    def client_gone(self, client_id: str, transport: Transport) -> None:
        """Session-end cleanup, a no-op if the session was already replaced."""
        if self.broker.session_owns_transport(client_id, transport):
            self.bridges.release_client(client_id)
            self.broker.disconnect(client_id, transport)

    def metrics(self) -> dict:
        return {
            "broker": self.broker.metrics(),
            "runtime": self.runtime.metrics(),
            "bridges": self.bridges.metrics(),
        }
