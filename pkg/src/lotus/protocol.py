"""Wire protocol: line-delimited JSON frames and the per-session state machine.

Every frame is exactly one line of UTF-8 JSON terminated by a newline, with
lexicographically ordered keys on encode (the canonical form); payload bytes
always travel base64-encoded. Unknown fields are ignored on decode for
forward compatibility; unknown frame types are errors.
"""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass

from .broker import Topic, TopicFilter
from .errors import DecodeError, InvalidFilter, InvalidTopic
from .functions import FunctionSpec, spec_from_json, spec_to_json
from .geo import Circle, Geofence, Location, Polygon, WORLD, World

DEFAULT_PORT = 5789
DEFAULT_MGMT_PORT = 8790


# -- frames -------------------------------------------------------------------


@dataclass(frozen=True)
class Connect:
    client_id: str
    location: Location | None = None


@dataclass(frozen=True)
class Connack:
    pass


@dataclass(frozen=True)
class Pingloc:
    location: Location


@dataclass(frozen=True)
class Subscribe:
    filter: TopicFilter
    fence: Geofence


@dataclass(frozen=True)
class Suback:
    sub_id: str


@dataclass(frozen=True)
class Unsubscribe:
    sub_id: str


@dataclass(frozen=True)
class Publish:
    topic: Topic
    payload: bytes
    fence: Geofence


@dataclass(frozen=True)
class Delivery:
    topic: Topic
    payload: bytes
    pub_id: str
    ts: int


@dataclass(frozen=True)
class Fsub:
    filter: TopicFilter
    fence: Geofence
    function: str | FunctionSpec  # a deployed name, or a full inline spec


@dataclass(frozen=True)
class Fsuback:
    fsub_id: str
    derived_topic: Topic


@dataclass(frozen=True)
class Funsub:
    fsub_id: str


@dataclass(frozen=True)
class ErrorFrame:
    code: str
    detail: str


Frame = (
    Connect
    | Connack
    | Pingloc
    | Subscribe
    | Suback
    | Unsubscribe
    | Publish
    | Delivery
    | Fsub
    | Fsuback
    | Funsub
    | ErrorFrame
)


# -- fence JSON ---------------------------------------------------------------


def fence_to_json(fence: Geofence) -> dict:
    if isinstance(fence, World):
        return {"shape": "world"}
    if isinstance(fence, Circle):
        return {"shape": "circle", "lat": fence.center.lat, "lon": fence.center.lon, "radius_m": fence.radius_m}
    return {"shape": "polygon", "vertices": [[v.lat, v.lon] for v in fence.vertices]}


def fence_from_json(obj: object, where: str) -> Geofence:
    if not isinstance(obj, dict):
        raise DecodeError(f"{where}: fence must be an object")
    shape = obj.get("shape")
    if shape == "world":
        return WORLD
    if shape == "circle":
        lat = _number(obj.get("lat"), f"{where}.lat")
        lon = _number(obj.get("lon"), f"{where}.lon")
        radius = _number(obj.get("radius_m"), f"{where}.radius_m")
        try:
            return Circle(Location(lat, lon), radius)
        except ValueError as e:
            raise DecodeError(f"{where}: {e}") from e
    if shape == "polygon":
        vertices = obj.get("vertices")
        if not isinstance(vertices, list):
            raise DecodeError(f"{where}.vertices: required list")
        points = []
        for i, pair in enumerate(vertices):
            if not isinstance(pair, list) or len(pair) != 2:
                raise DecodeError(f"{where}.vertices[{i}]: must be a [lat, lon] pair")
            try:
                points.append(Location(_number(pair[0], "lat"), _number(pair[1], "lon")))
            except (ValueError, DecodeError) as e:
                raise DecodeError(f"{where}.vertices[{i}]: {e}") from e
        try:
            return Polygon(tuple(points))
        except ValueError as e:
            raise DecodeError(f"{where}: {e}") from e
    raise DecodeError(f"{where}.shape: unknown shape {shape!r}")


# -- decoding -----------------------------------------------------------------


def _number(v: object, rule: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DecodeError(f"{rule}: required number")
    return float(v)


def _string(obj: dict, key: str, frame: str) -> str:
    v = obj.get(key)
    if not isinstance(v, str):
        raise DecodeError(f"{frame}.{key}: required string")
    return v


def _payload(obj: dict, frame: str) -> bytes:
    raw = _string(obj, "payload_b64", frame)
    try:
        return base64.b64decode(raw, validate=True)
    except binascii.Error as e:
        raise DecodeError(f"{frame}.payload_b64: invalid base64 ({e})") from e


def _filter(obj: dict, frame: str) -> TopicFilter:
    try:
        return TopicFilter.parse(_string(obj, "filter", frame))
    except InvalidFilter as e:
        raise DecodeError(f"{frame}.filter: {e}") from e


def _topic(obj: dict, key: str, frame: str) -> Topic:
    try:
        return Topic.parse(_string(obj, key, frame))
    except InvalidTopic as e:
        raise DecodeError(f"{frame}.{key}: {e}") from e


def _fence(obj: dict, frame: str) -> Geofence:
    if "fence" not in obj:
        raise DecodeError(f"{frame}.fence: required")
    return fence_from_json(obj["fence"], f"{frame}.fence")


def _location(lat: object, lon: object, frame: str) -> Location:
    try:
        return Location(_number(lat, f"{frame}.lat"), _number(lon, f"{frame}.lon"))
    except ValueError as e:
        raise DecodeError(f"{frame}: {e}") from e


def decode_frame(line: bytes | str) -> Frame:
    """Total function from one line to a Frame; raises DecodeError naming the first violated rule."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(f"frame is not valid UTF-8 ({e})") from e
    try:
        obj = json.loads(line)
    except ValueError as e:
        raise DecodeError(f"frame is not valid JSON ({e})") from e
    if not isinstance(obj, dict):
        raise DecodeError("frame must be a JSON object")
    ftype = obj.get("type")
    if ftype == "CONNECT":
        client_id = _string(obj, "client_id", "CONNECT")
        has_lat, has_lon = "lat" in obj, "lon" in obj
        if has_lat != has_lon:
            raise DecodeError("CONNECT: lat and lon must be supplied together")
        loc = _location(obj["lat"], obj["lon"], "CONNECT") if has_lat else None
        return Connect(client_id, loc)
    if ftype == "CONNACK":
        return Connack()
    if ftype == "PINGLOC":
        if "lat" not in obj or "lon" not in obj:
            raise DecodeError("PINGLOC: lat and lon required")
        return Pingloc(_location(obj["lat"], obj["lon"], "PINGLOC"))
    if ftype == "SUBSCRIBE":
        return Subscribe(_filter(obj, "SUBSCRIBE"), _fence(obj, "SUBSCRIBE"))
    if ftype == "SUBACK":
        return Suback(_string(obj, "sub_id", "SUBACK"))
    if ftype == "UNSUBSCRIBE":
        return Unsubscribe(_string(obj, "sub_id", "UNSUBSCRIBE"))
    if ftype == "PUBLISH":
        return Publish(_topic(obj, "topic", "PUBLISH"), _payload(obj, "PUBLISH"), _fence(obj, "PUBLISH"))
    if ftype == "DELIVERY":
        ts = obj.get("ts")
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise DecodeError("DELIVERY.ts: required integer")
        return Delivery(_topic(obj, "topic", "DELIVERY"), _payload(obj, "DELIVERY"), _string(obj, "pub_id", "DELIVERY"), ts)
    if ftype == "FSUB":
        fn = obj.get("function")
        if not isinstance(fn, dict):
            raise DecodeError("FSUB.function: required object")
        if "executor" in fn:
            try:
                function: str | FunctionSpec = spec_from_json(fn)
            except Exception as e:
                raise DecodeError(f"FSUB.function: {e}") from e
        else:
            name = fn.get("name")
            if not isinstance(name, str) or not name:
                raise DecodeError("FSUB.function.name: required non-empty string")
            function = name
        return Fsub(_filter(obj, "FSUB"), _fence(obj, "FSUB"), function)
    if ftype == "FSUBACK":
        return Fsuback(_string(obj, "fsub_id", "FSUBACK"), _topic(obj, "derived_topic", "FSUBACK"))
    if ftype == "FUNSUB":
        return Funsub(_string(obj, "fsub_id", "FUNSUB"))
    if ftype == "ERROR":
        return ErrorFrame(_string(obj, "code", "ERROR"), _string(obj, "detail", "ERROR"))
    raise DecodeError(f"unknown frame type {ftype!r}")


# -- encoding -----------------------------------------------------------------


def _b64(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


def encode_frame(frame: Frame) -> bytes:
    """One canonical line per frame: lexicographic keys, newline-terminated UTF-8."""
    if isinstance(frame, Connect):
        body: dict = {"type": "CONNECT", "client_id": frame.client_id}
        if frame.location is not None:
            body["lat"] = frame.location.lat
            body["lon"] = frame.location.lon
    elif isinstance(frame, Connack):
        body = {"type": "CONNACK"}
    elif isinstance(frame, Pingloc):
        body = {"type": "PINGLOC", "lat": frame.location.lat, "lon": frame.location.lon}
    elif isinstance(frame, Subscribe):
        body = {"type": "SUBSCRIBE", "filter": str(frame.filter), "fence": fence_to_json(frame.fence)}
    elif isinstance(frame, Suback):
        body = {"type": "SUBACK", "sub_id": frame.sub_id}
    elif isinstance(frame, Unsubscribe):
        body = {"type": "UNSUBSCRIBE", "sub_id": frame.sub_id}
    elif isinstance(frame, Publish):
        body = {"type": "PUBLISH", "topic": str(frame.topic), "payload_b64": _b64(frame.payload), "fence": fence_to_json(frame.fence)}
    elif isinstance(frame, Delivery):
        body = {
            "type": "DELIVERY",
            "topic": str(frame.topic),
            "payload_b64": _b64(frame.payload),
            "pub_id": frame.pub_id,
            "ts": frame.ts,
        }
    elif isinstance(frame, Fsub):
        fn = {"name": frame.function} if isinstance(frame.function, str) else spec_to_json(frame.function)
        body = {"type": "FSUB", "filter": str(frame.filter), "fence": fence_to_json(frame.fence), "function": fn}
    elif isinstance(frame, Fsuback):
        body = {"type": "FSUBACK", "fsub_id": frame.fsub_id, "derived_topic": str(frame.derived_topic)}
    elif isinstance(frame, Funsub):
        body = {"type": "FUNSUB", "fsub_id": frame.fsub_id}
    elif isinstance(frame, ErrorFrame):
        body = {"type": "ERROR", "code": frame.code, "detail": frame.detail}
    else:
        raise TypeError(f"not a frame: {frame!r}")
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


# -- session state machine ------------------------------------------------------

FRESH = "fresh"
CONNECTED = "connected"
CLOSED = "closed"


@dataclass(frozen=True)
class SessionState:
    phase: str = FRESH
    client_id: str | None = None
    has_location: bool = False


# Actions the server executes against the node after a pure transition.


@dataclass(frozen=True)
class ConnectClient:
    client_id: str
    location: Location | None


@dataclass(frozen=True)
class SetLocation:
    location: Location


@dataclass(frozen=True)
class AddSubscription:
    filter: TopicFilter
    fence: Geofence


@dataclass(frozen=True)
class RemoveSubscription:
    sub_id: str


@dataclass(frozen=True)
class PublishMessage:
    topic: Topic
    payload: bytes
    fence: Geofence


@dataclass(frozen=True)
class AddFunctionSubscription:
    filter: TopicFilter
    fence: Geofence
    function: str | FunctionSpec


@dataclass(frozen=True)
class RemoveFunctionSubscription:
    fsub_id: str


@dataclass(frozen=True)
class Reply:
    frame: Frame


@dataclass(frozen=True)
class CloseSession:
    pass


Action = (
    ConnectClient
    | SetLocation
    | AddSubscription
    | RemoveSubscription
    | PublishMessage
    | AddFunctionSubscription
    | RemoveFunctionSubscription
    | Reply
    | CloseSession
)

_SERVER_SENT = (Connack, Suback, Delivery, Fsuback, ErrorFrame)


def _violation(detail: str) -> tuple[SessionState, tuple[Action, ...]]:
    state = SessionState(phase=CLOSED)
    return state, (Reply(ErrorFrame("protocol_violation", detail)), CloseSession())


def session_step(state: SessionState, frame: Frame) -> tuple[SessionState, tuple[Action, ...]]:
    """Pure protocol transition; fatal violations close the session.

    Replies that need no runtime data (CONNACK, the violation ERROR) are
    emitted directly; data-carrying replies (SUBACK, FSUBACK) are produced by
    the executor once the corresponding action has run.
    """
    if state.phase == CLOSED:
        return state, ()
    if isinstance(frame, _SERVER_SENT):
        return _violation(f"client may not send {type(frame).__name__}")
    if state.phase == FRESH:
        if isinstance(frame, Connect):
            new = SessionState(CONNECTED, frame.client_id, frame.location is not None)
            return new, (ConnectClient(frame.client_id, frame.location), Reply(Connack()))
        return _violation("first frame must be CONNECT")
    # connected
    if isinstance(frame, Connect):
        return _violation("duplicate CONNECT on an open session")
    if isinstance(frame, Pingloc):
        new = SessionState(CONNECTED, state.client_id, True)
        return new, (SetLocation(frame.location),)
    if isinstance(frame, Subscribe):
        return state, (AddSubscription(frame.filter, frame.fence),)
    if isinstance(frame, Unsubscribe):
        return state, (RemoveSubscription(frame.sub_id),)
    if isinstance(frame, Publish):
        if not state.has_location:
            return _violation("PUBLISH before any location was supplied")
        return state, (PublishMessage(frame.topic, frame.payload, frame.fence),)
    if isinstance(frame, Fsub):
        return state, (AddFunctionSubscription(frame.filter, frame.fence, frame.function),)
    if isinstance(frame, Funsub):
        return state, (RemoveFunctionSubscription(frame.fsub_id),)
    return _violation(f"unexpected frame {type(frame).__name__}")
