"""Flow-level comparison of two sets of ground tracks for one route.

Each track is reduced to where and how it crosses a short line drawn
perpendicular to the route's final leg at the route's last in-sector
waypoint: the great-circle distance of the crossing from that waypoint
(``d_h``, nm) and the sine of the crossing heading.  Sets of tracks are
then compared per statistic with the two-sample Kolmogorov-Smirnov
distance and the percentage error of the mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geo import CrossingPlane, GcsPoint, as_latlon, haversine_nm, initial_bearing_deg, plane_crossing

log = logging.getLogger(__name__)

DEFAULT_HALF_WIDTH_NM = 100.0
GENERATED_POINTS = 200
MIN_BANDWIDTH = 1e-6
METRICS = ("ks_dh", "ks_sinphi", "dmean_dh_pct", "dmean_sinphi_pct", "crossing_rate")


class EmptySampleError(ValueError):
    pass


@dataclass(frozen=True)
class CrossingRecord:
    route_id: str
    d_h: float
    sin_phi: float


@dataclass
class RouteComparison:
    route_id: str
    ks_dh: float
    ks_sinphi: float
    dmean_dh_pct: float
    dmean_sinphi_pct: float
    crossing_rate: float = math.nan

    def metric(self, name: str) -> float:
        return getattr(self, name)


def build_plane(plan, sector, half_width_nm: float = DEFAULT_HALF_WIDTH_NM) -> CrossingPlane:
    """Plane at the last waypoint inside the sector polygon, square to the route there.

    ``plan`` may be a waypoint array or anything with a ``plan`` attribute
    (a :class:`~sectorflow.data.RouteGroup`).
    """
    plan = as_latlon(getattr(plan, "plan", plan)).reshape(-1, 2)
    if len(plan) < 2:
        raise ValueError("route plan needs at least two waypoints")
    inside = [i for i, (lat, lon) in enumerate(plan) if sector.contains(lat, lon)]
    if not inside:
        raise ValueError("no waypoint of the route lies inside the sector")
    i = inside[-1]
    origin = GcsPoint(*plan[i])
    if i < len(plan) - 1:
        bearing = initial_bearing_deg(plan[i], plan[i + 1])
    else:
        # direction of travel on arrival at the final waypoint
        bearing = (initial_bearing_deg(plan[i], plan[i - 1]) + 180.0) % 360.0
    return CrossingPlane(origin, bearing, half_width_nm)


def crossing_stats(tracks: Iterable, plane: CrossingPlane, route_id: str = "") -> Tuple[List[CrossingRecord], float]:
    """Crossing records for the tracks that cross ``plane``, and the fraction that did."""
    records = []
    n = 0
    for poly in tracks:
        n += 1
        hit = plane_crossing(poly, plane)
        if hit is None:
            continue
        point, heading = hit
        records.append(
            CrossingRecord(route_id, haversine_nm(plane.origin, point), math.sin(math.radians(heading)))
        )
    return records, (len(records) / n if n else math.nan)


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise EmptySampleError("KS distance needs two non-empty samples")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / len(a)
    fb = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def mean_pct_error(sample_gen, sample_ref) -> float:
    """100 * |mean(gen) - mean(ref)| / |mean(ref)|; NaN (with a warning) when mean(ref) is ~0."""
    gen = np.asarray(sample_gen, dtype=float)
    ref = np.asarray(sample_ref, dtype=float)
    if gen.size == 0 or ref.size == 0:
        raise EmptySampleError("mean percentage error needs two non-empty samples")
    m_ref = ref.mean()
    if abs(m_ref) <= 1e-12:
        log.warning("reference mean is %.3g; percentage error undefined", m_ref)
        return math.nan
    return float(100.0 * abs(gen.mean() - m_ref) / abs(m_ref))


def scott_bandwidth(sample) -> float:
    x = np.asarray(sample, dtype=float)
    if len(x) < 2:
        raise ValueError("bandwidth needs at least two points")
    bw = len(x) ** (-0.2) * float(np.std(x, ddof=1))
    if bw < MIN_BANDWIDTH:
        log.warning("sample has (near) zero spread; bandwidth floored at %g", MIN_BANDWIDTH)
        bw = MIN_BANDWIDTH
    return bw


def kde(sample, grid, bandwidth: Optional[float] = None) -> np.ndarray:
    """Gaussian kernel density of ``sample`` evaluated on ``grid``."""
    x = np.asarray(sample, dtype=float).ravel()
    g = np.asarray(grid, dtype=float)
    h = scott_bandwidth(x) if bandwidth is None else float(bandwidth)
    out = np.zeros(g.shape)
    # chunked so large samples do not build one huge matrix
    for start in range(0, len(x), 2048):
        z = (g[..., None] - x[start : start + 2048]) / h
        out += np.exp(-0.5 * z * z).sum(axis=-1)
    return out / (len(x) * h * math.sqrt(2.0 * math.pi))


def kde_grid(samples: Sequence, n: int = 512) -> np.ndarray:
    """Common grid covering every sample with four bandwidths of margin."""
    samples = [np.asarray(s, dtype=float) for s in samples if len(s) >= 2]
    lo = min(s.min() for s in samples)
    hi = max(s.max() for s in samples)
    pad = 4.0 * max(scott_bandwidth(s) for s in samples)
    return np.linspace(lo - pad, hi + pad, n)


def compare_route(
    test_records: Sequence[CrossingRecord],
    generated_records: Sequence[CrossingRecord],
    route_id: str = "",
    crossing_rate: float = math.nan,
) -> RouteComparison:
    if not test_records:
        raise EmptySampleError(f"route {route_id}: no test-set crossings")
    if not generated_records:
        raise EmptySampleError(f"route {route_id}: no generated crossings")
    t_dh = [r.d_h for r in test_records]
    g_dh = [r.d_h for r in generated_records]
    t_s = [r.sin_phi for r in test_records]
    g_s = [r.sin_phi for r in generated_records]
    return RouteComparison(
        route_id=route_id,
        ks_dh=ks_distance(t_dh, g_dh),
        ks_sinphi=ks_distance(t_s, g_s),
        dmean_dh_pct=mean_pct_error(g_dh, t_dh),
        dmean_sinphi_pct=mean_pct_error(g_s, t_s),
        crossing_rate=crossing_rate,
    )
