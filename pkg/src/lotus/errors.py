"""Exception hierarchy shared by all broker components."""

from __future__ import annotations


class LotusError(Exception):
    """Base class for every broker-domain error."""


class InvalidTopic(LotusError):
    pass


class InvalidFilter(LotusError):
    pass


class UnknownClient(LotusError):
    pass


class UnknownSubscription(LotusError):
    pass


class PublisherLocationUnknown(LotusError):
    pass


class ReservedTopic(LotusError):
    pass


class PayloadTooLarge(LotusError):
    pass


class DuplicateName(LotusError):
    pass


class InvalidConfig(LotusError):
    pass


class UnknownFunction(LotusError):
    pass


class UnknownFunctionSubscription(LotusError):
    pass


class DecodeError(LotusError):
    """A wire frame violated the protocol schema; the message names the first violated rule."""


class ProtocolViolation(LotusError):
    """Fatal per-session protocol error; the session is closed."""


class BrokerUnreachable(LotusError):
    pass


class QuiescenceTimeout(LotusError):
    pass


class EmptySamples(LotusError):
    pass


# Stable wire codes for ERROR frames and HTTP responses.
ERROR_CODES: dict[type[LotusError], str] = {
    InvalidTopic: "invalid_topic",
    InvalidFilter: "invalid_filter",
    UnknownClient: "unknown_client",
    UnknownSubscription: "unknown_subscription",
    PublisherLocationUnknown: "publisher_location_unknown",
    ReservedTopic: "reserved_topic",
    PayloadTooLarge: "payload_too_large",
    DuplicateName: "duplicate_name",
    InvalidConfig: "invalid_config",
    UnknownFunction: "unknown_function",
    UnknownFunctionSubscription: "unknown_function_subscription",
    DecodeError: "decode_error",
    ProtocolViolation: "protocol_violation",
}


def error_code(exc: LotusError) -> str:
    for klass in type(exc).__mro__:
        if klass in ERROR_CODES:
            return ERROR_CODES[klass]  # type: ignore[index]
    return "internal_error"
