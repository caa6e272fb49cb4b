"""Shared constructors for test tracks."""

import numpy as np

from sectorflow.geo import destination_point
from sectorflow.trackfit import PiecewiseTrack, Track, interpolate_many


def random_piecewise(rng, degree=3, min_turn=10.0, max_turn=60.0, leg_nm=(20.0, 60.0), start=(52.0, -0.5)):
    """Polyline built heading by heading, every interior turn in [min_turn, max_turn] degrees."""
    pts = [start]
    heading = rng.uniform(0.0, 360.0)
    for i in range(degree):
        if i:
            heading += rng.choice([-1.0, 1.0]) * rng.uniform(min_turn, max_turn)
        p = destination_point(pts[-1], heading % 360.0, rng.uniform(*leg_nm))
        pts.append((p.lat_deg, p.lon_deg))
    return PiecewiseTrack.from_control_points(np.array(pts))


def sample_track(pt, n=200, noise_deg=0.0, rng=None):
    """Observations at n uniform times (tau = 0..n-1 s) on ``pt``."""
    t = np.linspace(0.0, 1.0, n)
    pts = interpolate_many(pt, t)
    if noise_deg:
        pts = pts + rng.normal(0.0, noise_deg, size=pts.shape)
        pts[0] = interpolate_many(pt, [0.0])[0]
    return Track(pts, np.arange(n, dtype=float))
