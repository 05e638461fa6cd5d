"""Binds (topic filter, function) pairs to derived topics and runs the pipeline.

Clients subscribe to the *result* of a function applied to a topic rather than
to the topic itself. One ProcessingBridge exists per (canonical filter,
function identity); however many clients attach, each origin publication is
run through the function exactly once and the processed result is republished
on the bridge's derived topic, carrying the original publisher's geo-context
so fence semantics survive processing.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import threading
import uuid
from collections import Counter
from dataclasses import dataclass

from .broker import RESERVED_ROOT, Broker, Publication, Topic, TopicFilter
from .errors import (
    DuplicateName,
    InvalidFilter,
    UnknownClient,
    UnknownFunction,
    UnknownFunctionSubscription,
)
from .functions import (
    Drop,
    Failure,
    Forward,
    FunctionRuntime,
    FunctionSpec,
    Invocation,
    spec_digest,
)
from .geo import Geofence, WORLD

log = logging.getLogger(__name__)

DERIVED_PREFIX = (RESERVED_ROOT, "processed")

_STOP = object()


def derived_topic_for(filter: TopicFilter, function_id: str) -> Topic:
    """Deterministic, collision-resistant derived topic for a bridge.

    '$lotus/processed/' + lowercase hex of the first 16 bytes of SHA-256 over
    the canonical filter string, a 0x1F separator, and the function identity.
    """
    digest = hashlib.sha256(str(filter).encode("utf-8") + b"\x1f" + function_id.encode("utf-8"))
    return Topic(DERIVED_PREFIX + (digest.hexdigest()[:32],))


@dataclass
class ProcessingBridge:
    bridge_id: str
    origin_filter: TopicFilter
    origin_fence: Geofence
    function_id: str  # dedup identity: deployed name, or spec digest for inline specs
    runtime_name: str  # name the function runtime knows it by
    derived_topic: Topic
    broker_sub_id: str
    auto_deployed: bool
    refcount: int = 0

    def __post_init__(self) -> None:
        self.alive = True
        self.queue: queue.Queue = queue.Queue()
        self.worker: threading.Thread | None = None


@dataclass(frozen=True)
class FunctionSubscription:
    fsub_id: str
    client_id: str
    bridge_id: str
    client_fence: Geofence
    client_sub_id: str


class BridgeManager:
    """Bridge Manager + Bridge Builder: lifecycle plus the event pipeline."""

    def __init__(self, broker: Broker, runtime: FunctionRuntime):
        self.broker = broker
        self.runtime = runtime
        broker.register_bridge_sink(self._dispatch)
        self._lock = threading.RLock()
        self._bridges: dict[str, ProcessingBridge] = {}
        self._by_key: dict[tuple[str, str], str] = {}
        self._fsubs: dict[str, FunctionSubscription] = {}
        self._client_fsub: dict[tuple[str, str], str] = {}  # (client_id, bridge_id) -> fsub_id
        # Runtime names deployed by a bridge (inline specs) rather than via
        # the management API; removed once the last referencing bridge dies.
        self._auto_deployed: set[str] = set()
        self._stats_lock = threading.Lock()
        self.counters: Counter = Counter()
        # Process-once evidence: one entry per (bridge_id, publication_id).
        self.invocation_log: list[tuple[str, str]] = []
        self._invocation_seen: set[tuple[str, str]] = set()

    # -- lifecycle ---------------------------------------------------------

    def function_subscribe(
        self,
        client_id: str,
        filter: TopicFilter | str,
        fence: Geofence,
        function: str | FunctionSpec,
    ) -> tuple[str, Topic]:
        """Attach a client to f(filter); returns (fsub_id, derived topic).

        Deploys inline specs on first sight, finds-or-creates the bridge, and
        subscribes the client to the derived topic under its own fence.
        Repeated calls by the same client for the same bridge are idempotent
        (the fence is refreshed, the existing fsub_id returned).
        """
        if isinstance(filter, str):
            filter = TopicFilter.parse(filter)
        if filter.segments[0] in (RESERVED_ROOT, "+", "#"):
            raise InvalidFilter(
                f"filter {filter} could match the {RESERVED_ROOT} namespace; chained processing is not supported"
            )
        with self._lock:
            if not self.broker.has_session(client_id):
                raise UnknownClient(client_id)
            function_id, runtime_name, auto = self._resolve_function(function)
            key = (str(filter), function_id)
            bridge_id = self._by_key.get(key)
            if bridge_id is None:
                bridge = self._create_bridge(filter, function_id, runtime_name, auto)
                bridge_id = bridge.bridge_id
            bridge = self._bridges[bridge_id]
            existing = self._client_fsub.get((client_id, bridge_id))
            if existing is not None:
                client_sub = self.broker.subscribe(client_id, TopicFilter(bridge.derived_topic.segments), fence)
                self._fsubs[existing] = FunctionSubscription(existing, client_id, bridge_id, fence, client_sub)
                return existing, bridge.derived_topic
            client_sub = self.broker.subscribe(client_id, TopicFilter(bridge.derived_topic.segments), fence)
            fsub_id = uuid.uuid4().hex
            self._fsubs[fsub_id] = FunctionSubscription(fsub_id, client_id, bridge_id, fence, client_sub)
            self._client_fsub[(client_id, bridge_id)] = fsub_id
            bridge.refcount += 1
            return fsub_id, bridge.derived_topic

    def _resolve_function(self, function: str | FunctionSpec) -> tuple[str, str, bool]:
        if isinstance(function, str):
            if self.runtime.get_spec(function) is None:
                raise UnknownFunction(function)
            return function, function, False
        digest = spec_digest(function)
        deployed = self.runtime.get_spec(function.name)
        if deployed is not None:
            if spec_digest(deployed) != digest:
                raise DuplicateName(f"{function.name} is deployed with a different spec")
            return digest, function.name, function.name in self._auto_deployed
        self.runtime.deploy(function)
        self._auto_deployed.add(function.name)
        return digest, function.name, True

    def _create_bridge(self, filter: TopicFilter, function_id: str, runtime_name: str, auto: bool) -> ProcessingBridge:
        derived = derived_topic_for(filter, function_id)
        bridge_id = derived.segments[-1]
        bridge = ProcessingBridge(
            bridge_id=bridge_id,
            origin_filter=filter,
            origin_fence=WORLD,
            function_id=function_id,
            runtime_name=runtime_name,
            derived_topic=derived,
            broker_sub_id="",
            auto_deployed=auto,
        )
        bridge.worker = threading.Thread(target=self._worker, args=(bridge,), daemon=True, name=f"bridge-{bridge_id[:8]}")
        bridge.worker.start()
        self._bridges[bridge_id] = bridge
        self._by_key[(str(filter), function_id)] = bridge_id
        # Install the origin subscription last so dispatch never sees a
        # half-built bridge. The bridge subscribes with a World fence and the
        # per-client fences are enforced on derived-topic delivery instead.
        bridge.broker_sub_id = self.broker.subscribe_bridge(bridge_id, filter, WORLD)
        return bridge

    def function_unsubscribe(self, fsub_id: str) -> None:
        """Detach one client; the last detachment tears the bridge down."""
        with self._lock:
            fsub = self._fsubs.pop(fsub_id, None)
            if fsub is None:
                raise UnknownFunctionSubscription(fsub_id)
            self._client_fsub.pop((fsub.client_id, fsub.bridge_id), None)
            try:
                self.broker.unsubscribe(fsub.client_sub_id)
            except Exception:
                pass  # the client may have disconnected already
            bridge = self._bridges.get(fsub.bridge_id)
            if bridge is None:
                return
            bridge.refcount -= 1
            if bridge.refcount <= 0:
                self._teardown_bridge(bridge)

    def _teardown_bridge(self, bridge: ProcessingBridge) -> None:
        bridge.alive = False
        try:
            self.broker.unsubscribe(bridge.broker_sub_id)
        except Exception:
            log.debug("origin subscription for %s already gone", bridge.bridge_id)
        del self._bridges[bridge.bridge_id]
        del self._by_key[(str(bridge.origin_filter), bridge.function_id)]
        bridge.queue.put(_STOP)
        if bridge.worker is not None:
            bridge.worker.join(timeout=30)
        if bridge.auto_deployed and not self._function_in_use(bridge.runtime_name):
            self._auto_deployed.discard(bridge.runtime_name)
            try:
                self.runtime.remove(bridge.runtime_name)
            except UnknownFunction:
                pass

    def _function_in_use(self, runtime_name: str) -> bool:
        return any(b.runtime_name == runtime_name for b in self._bridges.values())

    def release_client(self, client_id: str) -> None:
        """Drop every function subscription a departing client still holds."""
        with self._lock:
            fsub_ids = [f.fsub_id for f in self._fsubs.values() if f.client_id == client_id]
            for fsub_id in fsub_ids:
                try:
                    self.function_unsubscribe(fsub_id)
                except UnknownFunctionSubscription:
                    pass

    # -- pipeline ----------------------------------------------------------

    def _dispatch(self, bridge_id: str, pub: Publication) -> None:
        # Called from the broker's fan-out under the broker lock: must not
        # block and must not take the manager lock (lock-order safety).
        bridge = self._bridges.get(bridge_id)
        if bridge is not None and bridge.alive:
            bridge.queue.put(pub)

    def _worker(self, bridge: ProcessingBridge) -> None:
        while True:
            item = bridge.queue.get()
            if item is _STOP:
                return
            try:
                self.on_matched_event(bridge, item)
            except Exception:
                log.exception("bridge %s pipeline error", bridge.bridge_id)

    def on_matched_event(self, bridge: ProcessingBridge, pub: Publication) -> None:
        """Invoke the function once for this (bridge, publication); republish forwards."""
        key = (bridge.bridge_id, pub.id)
        with self._stats_lock:
            if key in self._invocation_seen:
                self.counters["duplicate_suppressed"] += 1
                return
            self._invocation_seen.add(key)
            self.invocation_log.append(key)
            self.counters["invocations"] += 1
        inv = Invocation(
            publication_id=pub.id,
            topic=str(pub.topic),
            payload=pub.payload,
            publisher_location=pub.geo.location,
            published_at=pub.published_at,
        )
        try:
            outcome = self.runtime.invoke(bridge.runtime_name, inv)
        except UnknownFunction:
            with self._stats_lock:
                self.counters["failures"] += 1
                self.counters["failure_missing_function"] += 1
            return
        if isinstance(outcome, Forward):
            self.broker.publish_from_bridge(bridge.derived_topic, outcome.payload, pub.geo)
            with self._stats_lock:
                self.counters["forwarded"] += 1
        elif isinstance(outcome, Drop):
            with self._stats_lock:
                self.counters["dropped"] += 1
        elif isinstance(outcome, Failure):
            with self._stats_lock:
                self.counters["failures"] += 1
                self.counters[f"failure_{outcome.reason}"] += 1

    # -- observability -----------------------------------------------------

    def bridges(self) -> list[ProcessingBridge]:
        with self._lock:
            return list(self._bridges.values())

    def metrics(self) -> dict:
        with self._lock:
            per_bridge = {
                b.bridge_id: {"refcount": b.refcount, "derived_topic": str(b.derived_topic)}
                for b in self._bridges.values()
            }
        with self._stats_lock:
            out = dict(self.counters)
            out["invocation_log_size"] = len(self.invocation_log)
            out["invocation_log_unique"] = len(self._invocation_seen)
        out["live_bridges"] = len(per_bridge)
        out["per_bridge"] = per_bridge
        return out
