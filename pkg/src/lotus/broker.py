"""Topic-based pub/sub engine with geo-gated routing.

Client sessions, the subscription table, wildcard topic matching, and
delivery. Writers (subscribe/unsubscribe/update_location/connect) are
serialized by one lock; routing evaluates against an atomic snapshot taken
under the same lock so it never observes a half-applied change.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Protocol

from .errors import (
    InvalidFilter,
    InvalidTopic,
    PayloadTooLarge,
    PublisherLocationUnknown,
    ReservedTopic,
    UnknownClient,
    UnknownSubscription,
)
from .geo import GeoContext, Geofence, Location, World, geo_match, point_in_fence

log = logging.getLogger(__name__)

RESERVED_ROOT = "$lotus"
DEFAULT_MAX_PAYLOAD = 1_048_576  # 1 MiB, configurable per broker

_SEGMENT_FORBIDDEN = ("/", "+", "#")


@dataclass(frozen=True)
class Topic:
    """A hierarchical topic: non-empty segments rendered joined by '/'."""

    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise InvalidTopic("topic needs at least one segment")
        for seg in self.segments:
            if not seg:
                raise InvalidTopic("topic segments must be non-empty")
            if any(ch in seg for ch in _SEGMENT_FORBIDDEN):
                raise InvalidTopic(f"topic segment {seg!r} contains a forbidden character")

    @classmethod
    def parse(cls, s: str) -> "Topic":
        return cls(tuple(s.split("/")))

    def is_reserved(self) -> bool:
        return self.segments[0] == RESERVED_ROOT

    def __str__(self) -> str:
        return "/".join(self.segments)


@dataclass(frozen=True)
class TopicFilter:
    """A subscription pattern: literal segments, '+' (one segment), '#' (≥1 remaining, last only)."""

    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise InvalidFilter("filter needs at least one segment")
        for i, seg in enumerate(self.segments):
            if seg in ("+", "#"):
                if seg == "#" and i != len(self.segments) - 1:
                    raise InvalidFilter("'#' is only allowed as the final segment")
                continue
            if not seg:
                raise InvalidFilter("filter segments must be non-empty")
            if any(ch in seg for ch in _SEGMENT_FORBIDDEN):
                raise InvalidFilter(f"filter segment {seg!r} contains a forbidden character")

    @classmethod
    def parse(cls, s: str) -> "TopicFilter":
        return cls(tuple(s.split("/")))

    def __str__(self) -> str:
        return "/".join(self.segments)


def topic_matches(filter: TopicFilter, topic: Topic) -> bool:
    """Pure wildcard match: literals exact, '+' one segment, '#' one or more."""
    f = filter.segments
    t = topic.segments
    for i, seg in enumerate(f):
        if seg == "#":
            return len(t) - i >= 1
        if i >= len(t):
            return False
        if seg != "+" and seg != t[i]:
            return False
    return len(t) == len(f)


@dataclass(frozen=True)
class Publication:
    """The routed unit: id, topic, opaque payload, publisher geo-context, broker timestamp (ns)."""

    id: str
    topic: Topic
    payload: bytes
    geo: GeoContext
    published_at: int


@dataclass(frozen=True)
class Subscription:
    sub_id: str
    client_id: str
    filter: TopicFilter
    fence: Geofence
    # Set for bridge-owned rows; these have no delivering client session and
    # skip the subscriber-side geo check (the bridge is broker-co-located).
    bridge_id: str | None = None


@dataclass(frozen=True)
class DeliveryReport:
    publication_id: str
    matched_plain: int
    matched_bridges: int


class Transport(Protocol):
    """Where deliveries for one session go. Implementations must not block."""

    def deliver(self, pub: Publication, sub: Subscription) -> None: ...

    def close(self) -> None: ...


class ClientSession:
    def __init__(self, client_id: str, transport: Transport, location: Location | None = None):
        self.client_id = client_id
        self.transport = transport
        # None means Unknown; transitions to a Location and never back.
        self.last_location = location
        self.sub_ids: set[str] = set()


class Broker:
    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD, clock: Callable[[], int] = time.monotonic_ns):
        self.max_payload = max_payload
        self._clock = clock
        self._lock = threading.RLock()
        self._sessions: dict[str, ClientSession] = {}
        self._subs: dict[str, Subscription] = {}
        self._sub_key: dict[tuple[str, str], str] = {}
        self._bridge_sink: Callable[[str, Publication], None] | None = None
        self.stats: Counter = Counter()

    def register_bridge_sink(self, sink: Callable[[str, Publication], None]) -> None:
        """Install the callback that receives (bridge_id, publication) for matched bridge rows."""
        self._bridge_sink = sink

    # -- sessions ---------------------------------------------------------

    def connect(self, client_id: str, transport: Transport, location: Location | None = None) -> None:
        """Register a session; a live session with the same client_id is evicted."""
        evicted: Transport | None = None
        with self._lock:
            old = self._sessions.get(client_id)
            if old is not None:
                self._remove_session_locked(old)
                evicted = old.transport
            self._sessions[client_id] = ClientSession(client_id, transport, location)
        if evicted is not None:
            try:
                evicted.close()
            except Exception:
                log.debug("closing evicted transport for %s failed", client_id, exc_info=True)

    def disconnect(self, client_id: str, transport: Transport | None = None) -> bool:
        """Drop a session and its subscriptions.

        With `transport` given, only drops the session if it still owns that
        transport, so a stale connection cannot tear down its replacement.
        """
        with self._lock:
            sess = self._sessions.get(client_id)
            if sess is None:
                return False
            if transport is not None and sess.transport is not transport:
                return False
            self._remove_session_locked(sess)
            return True

    def _remove_session_locked(self, sess: ClientSession) -> None:
        for sub_id in list(sess.sub_ids):
            sub = self._subs.pop(sub_id, None)
            if sub is not None:
                self._sub_key.pop((sub.client_id, str(sub.filter)), None)
        del self._sessions[sess.client_id]

    def has_session(self, client_id: str) -> bool:
        with self._lock:
            return client_id in self._sessions

    def session_owns_transport(self, client_id: str, transport: Transport) -> bool:
        with self._lock:
            sess = self._sessions.get(client_id)
            return sess is not None and sess.transport is transport

    def update_location(self, client_id: str, loc: Location) -> None:
        with self._lock:
            sess = self._sessions.get(client_id)
            if sess is None:
                raise UnknownClient(client_id)
            sess.last_location = loc

    # -- subscriptions ----------------------------------------------------

    def subscribe(self, client_id: str, filter: TopicFilter | str, fence: Geofence) -> str:
        """Add or refresh a subscription; idempotent per (client_id, filter)."""
        if isinstance(filter, str):
            filter = TopicFilter.parse(filter)
        with self._lock:
            if client_id not in self._sessions:
                raise UnknownClient(client_id)
            key = (client_id, str(filter))
            sub_id = self._sub_key.get(key)
            if sub_id is not None:
                self._subs[sub_id] = replace(self._subs[sub_id], fence=fence)
                return sub_id
            sub_id = uuid.uuid4().hex
            self._subs[sub_id] = Subscription(sub_id, client_id, filter, fence)
            self._sub_key[key] = sub_id
            self._sessions[client_id].sub_ids.add(sub_id)
            return sub_id

    def subscribe_bridge(self, bridge_id: str, filter: TopicFilter, fence: Geofence) -> str:
        with self._lock:
            sub_id = uuid.uuid4().hex
            self._subs[sub_id] = Subscription(sub_id, bridge_id, filter, fence, bridge_id=bridge_id)
            return sub_id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            sub = self._subs.pop(sub_id, None)
            if sub is None:
                raise UnknownSubscription(sub_id)
            self._sub_key.pop((sub.client_id, str(sub.filter)), None)
            sess = self._sessions.get(sub.client_id)
            if sess is not None:
                sess.sub_ids.discard(sub_id)

    # -- routing and delivery ---------------------------------------------

    def route(self, pub: Publication) -> list[Subscription]:
        """Exactly the live subscriptions passing topic match plus geo checks (no side effects)."""
        with self._lock:
            return self._match_locked(pub)

    def _match_locked(self, pub: Publication) -> list[Subscription]:
        matched = []
        for sub in self._subs.values():
            if not topic_matches(sub.filter, pub.topic):
                continue
            if sub.bridge_id is not None:
                # Bridge rows: only the publisher-in-fence half applies.
                if point_in_fence(pub.geo.location, sub.fence):
                    matched.append(sub)
                continue
            sess = self._sessions.get(sub.client_id)
            if sess is None:
                continue
            if sess.last_location is None:
                # Fail closed: a subscriber without a known location only
                # matches publications whose fence is World.
                if isinstance(pub.geo.fence, World) and point_in_fence(pub.geo.location, sub.fence):
                    matched.append(sub)
            elif geo_match(pub.geo, sess.last_location, sub.fence):
                matched.append(sub)
        return matched

    def publish(self, client_id: str, topic: Topic | str, payload: bytes, fence: Geofence) -> DeliveryReport:
        """Route and deliver one message published by a connected client."""
        if isinstance(topic, str):
            topic = Topic.parse(topic)
        with self._lock:
            sess = self._sessions.get(client_id)
            if sess is None:
                raise UnknownClient(client_id)
            if sess.last_location is None:
                raise PublisherLocationUnknown(client_id)
            if topic.is_reserved():
                raise ReservedTopic(str(topic))
            if len(payload) > self.max_payload:
                raise PayloadTooLarge(f"{len(payload)} > {self.max_payload}")
            pub = Publication(
                id=uuid.uuid4().hex,
                topic=topic,
                payload=payload,
                geo=GeoContext(sess.last_location, fence),
                published_at=self._clock(),
            )
            return self._fan_out_locked(pub)

    def publish_from_bridge(self, topic: Topic, payload: bytes, geo: GeoContext) -> DeliveryReport:
        """Republish a processed result as the bridge principal.

        May target the reserved namespace; the original publisher's
        geo-context is carried unchanged so fences keep working end to end.
        """
        with self._lock:
            if len(payload) > self.max_payload:
                raise PayloadTooLarge(f"{len(payload)} > {self.max_payload}")
            pub = Publication(
                id=uuid.uuid4().hex,
                topic=topic,
                payload=payload,
                geo=geo,
                published_at=self._clock(),
            )
            return self._fan_out_locked(pub)

    def _fan_out_locked(self, pub: Publication) -> DeliveryReport:
        plain = 0
        bridges = 0
        for sub in self._match_locked(pub):
            if sub.bridge_id is not None:
                bridges += 1
                if self._bridge_sink is not None:
                    self._bridge_sink(sub.bridge_id, pub)
                continue
            plain += 1
            sess = self._sessions.get(sub.client_id)
            if sess is None:
                continue
            try:
                sess.transport.deliver(pub, sub)
            except Exception:
                # At-most-once: a broken transport must not poison the fan-out.
                log.warning("delivery to %s failed", sub.client_id, exc_info=True)
        self.stats["publications"] += 1
        self.stats["deliveries"] += plain
        self.stats["bridge_dispatches"] += bridges
        return DeliveryReport(pub.id, plain, bridges)

    def metrics(self) -> dict:
        with self._lock:
            out = dict(self.stats)
            out["sessions"] = len(self._sessions)
            out["subscriptions"] = len(self._subs)
            return out
