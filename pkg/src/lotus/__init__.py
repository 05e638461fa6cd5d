"""Lotus: a single-node edge pub/sub broker with in-transit serverless processing.

Clients subscribe to the result of a function applied to a topic's messages
rather than to the raw topic. Matching is geo-gated both ways (publisher in
subscriber fence, subscriber in publication fence), and a publication is run
through a given function exactly once no matter how many subscribers share it.
"""

from .bridge import BridgeManager, FunctionSubscription, ProcessingBridge, derived_topic_for
from .broker import (
    Broker,
    DeliveryReport,
    Publication,
    Subscription,
    Topic,
    TopicFilter,
    topic_matches,
)
from .functions import (
    BuiltinExecutor,
    Drop,
    Failure,
    Forward,
    FunctionRuntime,
    FunctionSpec,
    Invocation,
    ProcessExecutor,
)
from .geo import Circle, GeoContext, Geofence, Location, Polygon, WORLD, World, geo_match, haversine_distance, point_in_fence
from .node import LotusNode

__version__ = "0.1.0"

__all__ = [
    "Broker",
    "BridgeManager",
    "BuiltinExecutor",
    "Circle",
    "DeliveryReport",
    "Drop",
    "Failure",
    "Forward",
    "FunctionRuntime",
    "FunctionSpec",
    "FunctionSubscription",
    "GeoContext",
    "Geofence",
    "Invocation",
    "Location",
    "LotusNode",
    "Polygon",
    "ProcessExecutor",
    "ProcessingBridge",
    "Publication",
    "Subscription",
    "Topic",
    "TopicFilter",
    "WORLD",
    "World",
    "derived_topic_for",
    "geo_match",
    "haversine_distance",
    "point_in_fence",
    "topic_matches",
    "__version__",
]
