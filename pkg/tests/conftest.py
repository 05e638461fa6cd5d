from __future__ import annotations

import sys
from pathlib import Path

import pytest

from lotus.node import LotusNode
from lotus.server import BrokerServer

PROCS = str(Path(__file__).parent / "procs.py")


def proc_command(mode: str, *extra: str) -> tuple[str, ...]:
    return (sys.executable, PROCS, mode, *extra)


class RecorderTransport:
    """In-process transport that records deliveries for assertions."""

    def __init__(self):
        self.deliveries = []
        self.closed = False

    def deliver(self, pub, sub) -> None:
        self.deliveries.append((pub, sub))

    def close(self) -> None:
        self.closed = True

    def payloads(self) -> list[bytes]:
        return [pub.payload for pub, _ in self.deliveries]


@pytest.fixture
def node():
    return LotusNode()


@pytest.fixture
def live_server():
    node = LotusNode()
    server = BrokerServer(node, host="127.0.0.1", port=0, mgmt_port=0)
    server.start()
    yield server
    server.stop()
