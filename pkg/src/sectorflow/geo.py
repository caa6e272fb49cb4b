"""Spherical-earth geometry on latitude/longitude points.

All distances are in nautical miles on a sphere of radius
:data:`EARTH_RADIUS_NM`; all angles are in degrees.  The array helpers
(``*_arr``) broadcast over numpy inputs and are what the hot paths use;
the point-level functions wrap them for single :class:`GcsPoint` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

EARTH_RADIUS_NM = 3440.065
NM_PER_DEG = EARTH_RADIUS_NM * math.pi / 180.0

# Below this separation two points are treated as coincident.
COINCIDENT_NM = 1e-9


class CoincidentPointsError(ValueError):
    pass


def _wrap360(a):
    # float % can round up to the modulus itself for tiny negative inputs
    a = np.asarray(a, dtype=float) % 360.0
    return np.where(a >= 360.0, 0.0, a)


def normalize_lon(lon):
    """Wrap longitude(s) into [-180, 180)."""
    return _wrap360(np.asarray(lon, dtype=float) + 180.0) - 180.0


@dataclass(frozen=True)
class GcsPoint:
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        lat = float(self.lat_deg)
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        lon = float(self.lon_deg)
        if not -180.0 <= lon < 180.0:
            lon = float(normalize_lon(lon))
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)

    def __iter__(self):
        yield self.lat_deg
        yield self.lon_deg

    def as_array(self) -> np.ndarray:
        return np.array([self.lat_deg, self.lon_deg])


PointLike = Union[GcsPoint, Sequence[float], np.ndarray]


def as_latlon(points) -> np.ndarray:
    """Coerce a point or sequence of points into a float array of (lat, lon) rows."""
    if isinstance(points, GcsPoint):
        return points.as_array()
    if isinstance(points, np.ndarray):
        return points.astype(float, copy=False)
    if any(isinstance(p, GcsPoint) for p in points):
        return np.array([p.as_array() if isinstance(p, GcsPoint) else np.asarray(p, dtype=float) for p in points])
    return np.asarray(points, dtype=float)


def haversine_arr(lat1, lon1, lat2, lon2):
    """Great-circle distance in nautical miles (vectorised)."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_NM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def bearing_arr(lat1, lon1, lat2, lon2):
    """Initial great-circle bearing in [0, 360) (vectorised, no coincidence check)."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    y = np.sin(dlmb) * np.cos(p2)
    x = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dlmb)
    return _wrap360(np.degrees(np.arctan2(y, x)))


def haversine_nm(a: PointLike, b: PointLike) -> float:
    a = as_latlon(a)
    b = as_latlon(b)
    return float(haversine_arr(a[0], a[1], b[0], b[1]))


def initial_bearing_deg(a: PointLike, b: PointLike) -> float:
    """Forward azimuth from ``a`` towards ``b``, clockwise from true north."""
    a = as_latlon(a)
    b = as_latlon(b)
    if haversine_arr(a[0], a[1], b[0], b[1]) < COINCIDENT_NM:
        raise CoincidentPointsError(f"bearing undefined between coincident points {a} and {b}")
    return float(bearing_arr(a[0], a[1], b[0], b[1]))


def destination_arr(lat, lon, bearing_deg, dist_nm):
    """Vectorised great-circle destination; returns (lat, lon) arrays."""
    p1 = np.radians(lat)
    l1 = np.radians(lon)
    th = np.radians(bearing_deg)
    delta = np.asarray(dist_nm, dtype=float) / EARTH_RADIUS_NM
    sin_p2 = np.sin(p1) * np.cos(delta) + np.cos(p1) * np.sin(delta) * np.cos(th)
    p2 = np.arcsin(np.clip(sin_p2, -1.0, 1.0))
    l2 = l1 + np.arctan2(
        np.sin(th) * np.sin(delta) * np.cos(p1), np.cos(delta) - np.sin(p1) * sin_p2
    )
    return np.degrees(p2), normalize_lon(np.degrees(l2))


def destination_point(a: PointLike, bearing_deg: float, dist_nm: float) -> GcsPoint:
    if dist_nm < 0:
        raise ValueError("dist_nm must be non-negative")
    a = as_latlon(a)
    if dist_nm == 0:
        return GcsPoint(a[0], a[1])
    lat, lon = destination_arr(a[0], a[1], bearing_deg, dist_nm)
    return GcsPoint(float(lat), float(lon))


def to_local_xy(lat, lon, origin: PointLike):
    """Equirectangular projection about ``origin``: (east, north) offsets in nm."""
    o = as_latlon(origin)
    dlon = normalize_lon(np.asarray(lon, dtype=float) - o[1])
    x = dlon * math.cos(math.radians(o[0])) * NM_PER_DEG
    y = (np.asarray(lat, dtype=float) - o[0]) * NM_PER_DEG
    return x, y


def from_local_xy(x, y, origin: PointLike):
    """Inverse of :func:`to_local_xy`."""
    o = as_latlon(origin)
    lat = o[0] + np.asarray(y, dtype=float) / NM_PER_DEG
    lon = o[1] + np.asarray(x, dtype=float) / (math.cos(math.radians(o[0])) * NM_PER_DEG)
    return lat, normalize_lon(lon)


@dataclass(frozen=True)
class CrossingPlane:
    """A finite evaluation line through ``origin`` perpendicular to the route.

    The line runs ``half_width_nm`` either side of the origin, at right
    angles to ``route_bearing_deg``.
    """

    origin: GcsPoint
    route_bearing_deg: float
    half_width_nm: float = 100.0

    def __post_init__(self):
        if not self.half_width_nm > 0:
            raise ValueError("half_width_nm must be positive")
        object.__setattr__(self, "route_bearing_deg", float(_wrap360(self.route_bearing_deg)))

    def local_frame(self, lat, lon):
        """Return (along-route, along-plane) coordinates in nm relative to origin."""
        x, y = to_local_xy(lat, lon, self.origin)
        b = math.radians(self.route_bearing_deg)
        along_route = x * math.sin(b) + y * math.cos(b)
        along_plane = x * math.cos(b) - y * math.sin(b)
        return along_route, along_plane


def plane_crossing(polyline, plane: CrossingPlane) -> Optional[Tuple[GcsPoint, float]]:
    """First crossing of ``polyline`` with ``plane`` in traversal order.

    Returns ``(point, heading_deg)`` where heading is the initial bearing of
    the crossing segment, or ``None`` when no segment crosses.
    """
    pts = as_latlon(polyline)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("polyline needs at least two points")
    s, w = plane.local_frame(pts[:, 0], pts[:, 1])
    s0, s1 = s[:-1], s[1:]
    # opposite signs or touching; a segment lying in the plane is ignored
    straddles = (s0 * s1 <= 0.0) & (s0 != s1)
    if not straddles.any():
        return None
    idx = np.flatnonzero(straddles)
    frac = s0[idx] / (s0[idx] - s1[idx])
    w_cross = w[idx] + frac * (w[idx + 1] - w[idx])
    inside = np.abs(w_cross) <= plane.half_width_nm
    if not inside.any():
        return None
    j = int(np.argmax(inside))
    k = int(idx[j])
    f = float(frac[j])
    x, y = to_local_xy(pts[k : k + 2, 0], pts[k : k + 2, 1], plane.origin)
    lat, lon = from_local_xy(x[0] + f * (x[1] - x[0]), y[0] + f * (y[1] - y[0]), plane.origin)
    heading = initial_bearing_deg(pts[k], pts[k + 1])
    return GcsPoint(float(lat), float(lon)), heading
