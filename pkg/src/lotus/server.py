"""TCP frame server and HTTP management API on top of a LotusNode.

One TCP connection is one client session; frames are processed strictly in
arrival order per session. Outbound frames (replies and deliveries) go
through a per-connection queue drained by a writer thread so a slow client
never blocks the broker's fan-out.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import unquote

from . import protocol
from .config import BrokerConfig, load_config
from .errors import DecodeError, LotusError, error_code
from .functions import spec_from_json, spec_to_json
from .node import LotusNode
from .protocol import (
    AddFunctionSubscription,
    AddSubscription,
    CloseSession,
    ConnectClient,
    Connack,
    Delivery,
    ErrorFrame,
    Fsuback,
    PublishMessage,
    RemoveFunctionSubscription,
    RemoveSubscription,
    Reply,
    SessionState,
    SetLocation,
    Suback,
    session_step,
)

log = logging.getLogger(__name__)


class _OutboundBuffer:
    """Unbounded frame buffer between the broker's fan-out and one writer thread.

    The writer drains every queued frame in one go, so a backlog collapses
    into a single sendall instead of one wakeup and one syscall per frame.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._items: deque[bytes] = deque()
        self._closed = False

    def put(self, item: bytes) -> None:
        with self._cond:
            self._items.append(item)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()

    def drain(self) -> tuple[bytes, bool]:
        with self._cond:
            while not self._items and not self._closed:
                self._cond.wait()
            chunk = b"".join(self._items)
            self._items.clear()
            return chunk, self._closed


class QueueTransport:
    """Per-connection outbound path: enqueue bytes, a writer thread sends them."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buffer = _OutboundBuffer()
        self._closed = False
        # One publication fans out to many sessions back to back; remember the
        # last encoded frame so each transport encodes it at most once.
        self._cache_key: str | None = None
        self._cache_line: bytes = b""
        self._writer = threading.Thread(target=self._drain, daemon=True)
        self._writer.start()

    def send(self, line: bytes) -> None:
        self._buffer.put(line)

    def deliver(self, pub, sub) -> None:
        if self._cache_key != pub.id:
            frame = Delivery(topic=pub.topic, payload=pub.payload, pub_id=pub.id, ts=pub.published_at)
            self._cache_line = protocol.encode_frame(frame)
            self._cache_key = pub.id
        self._buffer.put(self._cache_line)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._buffer.close()

    def _drain(self) -> None:
        while True:
            chunk, closed = self._buffer.drain()
            if chunk:
                try:
                    self._sock.sendall(chunk)
                except OSError:
                    break
            if closed:
                break
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class _Connection:
    def __init__(self, server: "BrokerServer", sock: socket.socket, peer: str):
        self.server = server
        self.node = server.node
        self.sock = sock
        self.peer = peer
        self.transport = QueueTransport(sock)
        self.state = SessionState()

    def run(self) -> None:
        max_line = 4 * self.node.broker.max_payload + 65536
        rfile = self.sock.makefile("rb")
        try:
            while True:
                line = rfile.readline(max_line)
                if not line:
                    break
                if not line.endswith(b"\n") and len(line) >= max_line:
                    self._reply(ErrorFrame("decode_error", "frame exceeds maximum line length"))
                    break
                try:
                    frame = protocol.decode_frame(line)
                except DecodeError as e:
                    # Recoverable: NDJSON realigns at the next newline.
                    self._reply(ErrorFrame("decode_error", str(e)))
                    continue
                self.state, actions = session_step(self.state, frame)
                if not self._execute(actions):
                    break
        except OSError:
            pass
        finally:
            rfile.close()
            if self.state.client_id is not None:
                self.node.client_gone(self.state.client_id, self.transport)
            self.transport.close()

    def _reply(self, frame) -> None:
        self.transport.send(protocol.encode_frame(frame))

    def _execute(self, actions) -> bool:
        """Apply the state machine's actions; False ends the reader loop."""
        for action in actions:
            try:
                if isinstance(action, Reply):
                    self._reply(action.frame)
                elif isinstance(action, CloseSession):
                    return False
                elif isinstance(action, ConnectClient):
                    self.node.connect_client(action.client_id, self.transport, action.location)
                elif isinstance(action, SetLocation):
                    self.node.broker.update_location(self.state.client_id, action.location)
                elif isinstance(action, AddSubscription):
                    sub_id = self.node.broker.subscribe(self.state.client_id, action.filter, action.fence)
                    self._reply(Suback(sub_id))
                elif isinstance(action, RemoveSubscription):
                    self.node.broker.unsubscribe(action.sub_id)
                elif isinstance(action, PublishMessage):
                    self.node.broker.publish(self.state.client_id, action.topic, action.payload, action.fence)
                elif isinstance(action, AddFunctionSubscription):
                    fsub_id, derived = self.node.bridges.function_subscribe(
                        self.state.client_id, action.filter, action.fence, action.function
                    )
                    self._reply(Fsuback(fsub_id, derived))
                elif isinstance(action, RemoveFunctionSubscription):
                    self.node.bridges.function_unsubscribe(action.fsub_id)
            except LotusError as e:
                self._reply(ErrorFrame(error_code(e), str(e)))
        return True


class BrokerServer:
    """Frame listener plus management HTTP server; start() returns once both are bound."""

    def __init__(self, node: LotusNode, host: str = "127.0.0.1", port: int = protocol.DEFAULT_PORT,
                 mgmt_port: int = protocol.DEFAULT_MGMT_PORT):
        self.node = node
        self.host = host
        self._requested = (port, mgmt_port)
        self.port = port
        self.mgmt_port = mgmt_port
        self._listener: socket.socket | None = None
        self._mgmt: ThreadingHTTPServer | None = None
        self._stopping = False

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self._requested[0]))
        listener.listen(256)
        self._listener = listener
        self.port = listener.getsockname()[1]
        threading.Thread(target=self._accept_loop, daemon=True, name="lotus-accept").start()

        handler = _make_mgmt_handler(self.node)
        self._mgmt = ThreadingHTTPServer((self.host, self._requested[1]), handler)
        self._mgmt.daemon_threads = True
        self.mgmt_port = self._mgmt.server_address[1]
        threading.Thread(target=self._mgmt.serve_forever, daemon=True, name="lotus-mgmt").start()
        log.info("listening on %s:%d (mgmt %d)", self.host, self.port, self.mgmt_port)

    def stop(self) -> None:
        self._stopping = True
        if self._listener is not None:
            try:
                # shutdown() wakes a blocked accept(); close() alone does not.
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        if self._mgmt is not None:
            self._mgmt.shutdown()
            self._mgmt.server_close()

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping:
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock, f"{addr[0]}:{addr[1]}")
            threading.Thread(target=conn.run, daemon=True, name=f"lotus-conn-{addr[1]}").start()


def _make_mgmt_handler(node: LotusNode):
    class MgmtHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # route through logging, not stderr
            log.debug("mgmt: " + fmt, *args)

        def _send(self, status: int, body: object | None = None) -> None:
            data = b"" if body is None else json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            if data:
                self.wfile.write(data)

        def _error(self, status: int, code: str, detail: str) -> None:
            self._send(status, {"error": code, "detail": detail})

        def do_POST(self) -> None:
            if self.path != "/functions":
                self._error(404, "not_found", self.path)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                spec = spec_from_json(json.loads(self.rfile.read(length)))
                function_id = node.runtime.deploy(spec)
            except LotusError as e:
                status = 409 if error_code(e) == "duplicate_name" else 400
                self._error(status, error_code(e), str(e))
                return
            except ValueError as e:
                self._error(400, "invalid_config", f"body is not valid JSON: {e}")
                return
            self._send(201, {"function_id": function_id})

        def do_DELETE(self) -> None:
            if not self.path.startswith("/functions/"):
                self._error(404, "not_found", self.path)
                return
            name = unquote(self.path[len("/functions/"):])
            try:
                node.runtime.remove(name)
            except LotusError as e:
                self._error(404, error_code(e), str(e))
                return
            self._send(204)

        def do_GET(self) -> None:
            if self.path == "/functions":
                self._send(200, [spec_to_json(s) for s in node.runtime.list()])
            elif self.path == "/metrics":
                self._send(200, node.metrics())
            else:
                self._error(404, "not_found", self.path)

    return MgmtHandler


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="lotus-broker", description="Run the edge pub/sub broker")
    parser.add_argument("--config", help="TOML config file; overrides LOTUS_* environment variables")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument("--mgmt-port", type=int, default=None)
    args = parser.parse_args(argv)

    cfg = load_config(config_path=args.config)
    cfg = BrokerConfig(
        host=args.host if args.host is not None else cfg.host,
        port=args.port if args.port is not None else cfg.port,
        mgmt_port=args.mgmt_port if args.mgmt_port is not None else cfg.mgmt_port,
        max_payload=cfg.max_payload,
        log_level=cfg.log_level,
    )
    logging.basicConfig(
        level=getattr(logging, cfg.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    node = LotusNode(max_payload=cfg.max_payload)
    server = BrokerServer(node, host=cfg.host, port=cfg.port, mgmt_port=cfg.mgmt_port)
    server.start()
    print(f"lotus broker on {cfg.host}:{server.port} (mgmt {server.mgmt_port})")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
