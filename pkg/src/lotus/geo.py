"""Geographic primitives: locations, fences, and the double geo-context check.

Delivery of a publication to a subscriber requires BOTH checks to pass: the
publisher must sit inside the subscriber's fence and the subscriber must sit
inside the publication's fence. All predicates here are pure functions over
immutable values and are safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_000.0

# Absolute tolerance, in degree space, for treating a point as lying on a
# polygon edge. Boundary points count as inside.
_BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class Location:
    """A WGS84-style lat/lon pair in decimal degrees."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("location coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class World:
    """The fence that matches every location."""


WORLD = World()


@dataclass(frozen=True)
class Circle:
    center: Location
    radius_m: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.radius_m) and self.radius_m > 0):
            raise ValueError("circle radius must be finite and > 0")


@dataclass(frozen=True)
class Polygon:
    """A simple polygon in the lat/lon plane, implicitly closed.

    Containment uses planar ray casting, so polygons that span the
    antimeridian or touch a pole are rejected at construction.
    """

    vertices: tuple[Location, ...]

    def __post_init__(self) -> None:
        vs = tuple(self.vertices)
        object.__setattr__(self, "vertices", vs)
        if len(vs) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if vs[0] == vs[-1]:
            raise ValueError("polygon closure is implicit; do not repeat the first vertex")
        for a, b in _edges(vs):
            if a == b:
                raise ValueError("polygon has a zero-length edge")
        lons = [v.lon for v in vs]
        if max(lons) - min(lons) >= 180.0:
            raise ValueError("polygons spanning the antimeridian are unsupported")
        if any(abs(v.lat) == 90.0 for v in vs):
            raise ValueError("polygons touching a pole are unsupported")
        if _self_intersects(vs):
            raise ValueError("polygon is self-intersecting")


Geofence = World | Circle | Polygon


@dataclass(frozen=True)
class GeoContext:
    """A client's position plus the fence it attaches to a message or subscription."""

    location: Location
    fence: Geofence = WORLD


def haversine_distance(a: Location, b: Location) -> float:
    """Great-circle distance in meters on a sphere of radius 6,371,000 m."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = math.radians(b.lat - a.lat)
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


def point_in_fence(p: Location, fence: Geofence) -> bool:
    """Whether p lies inside the fence; boundaries are inclusive."""
    if isinstance(fence, World):
        return True
    if isinstance(fence, Circle):
        return haversine_distance(p, fence.center) <= fence.radius_m
    return _point_in_polygon(p, fence.vertices)


def geo_match(pub_ctx: GeoContext, sub_loc: Location, sub_fence: Geofence) -> bool:
    """The double geo-context check gating delivery.

    True iff the publisher's location is inside the subscriber's fence AND the
    subscriber's location is inside the publication's fence.
    """
    return point_in_fence(pub_ctx.location, sub_fence) and point_in_fence(sub_loc, pub_ctx.fence)


def _edges(vs: tuple[Location, ...]):
    for i in range(len(vs)):
        yield vs[i], vs[(i + 1) % len(vs)]


def _cross(o: Location, a: Location, b: Location) -> float:
    return (a.lon - o.lon) * (b.lat - o.lat) - (a.lat - o.lat) * (b.lon - o.lon)


def _in_box(p: Location, a: Location, b: Location) -> bool:
    return (
        min(a.lat, b.lat) - _BOUNDARY_EPS <= p.lat <= max(a.lat, b.lat) + _BOUNDARY_EPS
        and min(a.lon, b.lon) - _BOUNDARY_EPS <= p.lon <= max(a.lon, b.lon) + _BOUNDARY_EPS
    )


def _on_segment(p: Location, a: Location, b: Location) -> bool:
    return abs(_cross(a, b, p)) <= _BOUNDARY_EPS and _in_box(p, a, b)


def _segments_intersect(p1: Location, p2: Location, q1: Location, q2: Location) -> bool:
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != d2 and d3 != d4:
        return True
    if d1 == 0 and _in_box(p1, q1, q2):
        return True
    if d2 == 0 and _in_box(p2, q1, q2):
        return True
    if d3 == 0 and _in_box(q1, p1, p2):
        return True
    if d4 == 0 and _in_box(q2, p1, p2):
        return True
    return False


def _self_intersects(vs: tuple[Location, ...]) -> bool:
    edges = list(_edges(vs))
    n = len(edges)
    for i in range(n):
        for j in range(i + 1, n):
            # Adjacent edges legitimately share one endpoint.
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return True
    return False


def _point_in_polygon(p: Location, vs: tuple[Location, ...]) -> bool:
    for a, b in _edges(vs):
        if _on_segment(p, a, b):
            return True
    # Even-odd ray cast toward +lon; the half-open lat rule skips horizontal
    # edges and counts each vertex crossing exactly once.
    inside = False
    for a, b in _edges(vs):
        if (a.lat > p.lat) != (b.lat > p.lat):
            x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat)
            if x > p.lon:
                inside = not inside
    return inside
