"""Piecewise-linear ground-track representation and its least-squares fit.

A ground track of degree ``d`` is a polyline through control points
``p0..pd`` (rows of ``(lat, lon)`` degrees).  Arrival times at the control
points are fixed by leg length: each leg takes a share of the unit
normalised time proportional to its great-circle length.  Positions between
knots are linear in latitude/longitude.

Fitting anchors ``p0`` at the first radar return and searches the remaining
``2d`` coordinates with Nelder-Mead, minimising the squared lat/lon misfit
to the radar points plus a flat penalty ``lam`` whenever the polyline turns
through more than ``phi_u_deg`` in total.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .geo import GcsPoint, as_latlon, haversine_arr

log = logging.getLogger(__name__)

# Calibration floors (see calibrate_from_fits).
MIN_PHI_U_DEG = 5.0
MIN_LAMBDA = 1e-12

ANCHOR_TOL_DEG = 1e-12
# polishing stops once a fresh simplex improves the objective by less than this fraction
STALL_REL = 1e-10
# deg^2 of misfit charged per deg^2 of squared chord length in the breakpoint seed
TIE_BREAK = 1e-9


class DegenerateTrackError(ValueError):
    pass


class FitBudgetWarning(RuntimeWarning):
    pass


@dataclass
class Track:
    """Time-stamped radar returns of one flight; ``points`` rows are (lat, lon)."""

    points: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.times = np.asarray(self.times, dtype=float)
        if len(self.points) != len(self.times):
            raise ValueError("points and times differ in length")
        if len(self.times) < 2:
            raise ValueError("a track needs at least two observations")
        if self.times[0] != 0.0:
            raise ValueError("track times must start at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("track times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def normalized_times(self) -> np.ndarray:
        return self.times / self.times[-1]


@dataclass
class PiecewiseTrack:
    control_points: np.ndarray
    arrival_times: np.ndarray

    @classmethod
    def from_control_points(cls, control_points) -> "PiecewiseTrack":
        pts = np.asarray(as_latlon(control_points), dtype=float).reshape(-1, 2)
        return cls(pts, arrival_times(pts))

    @property
    def degree(self) -> int:
        return len(self.control_points) - 1

    def sample(self, m: int) -> np.ndarray:
        """Positions at ``m`` uniformly spaced normalised times, as an (m, 2) array."""
        return interpolate_many(self, np.linspace(0.0, 1.0, m))


@dataclass
class FitConfig:
    degree: int = 3
    lam: float = 1.0
    phi_u_deg: float = 180.0
    resample_count: int = 50
    budget: int = 5000
    restarts: int = 5
    seed: int = 0
    # per-restart seed jitter, degrees
    jitter_deg: float = 0.01
    # initial Nelder-Mead simplex edge, degrees
    simplex_step_deg: float = 0.02

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.phi_u_deg > 0:
            raise ValueError("phi_u_deg must be positive")
        if self.resample_count < self.degree + 2:
            raise ValueError("resample_count must be at least degree + 2")
        if self.restarts < 1 or self.budget < 1:
            raise ValueError("restarts and budget must be positive")


@dataclass
class FitResult:
    track: PiecewiseTrack
    objective: float
    misfit: float
    turn_deg: float
    n_evals: int
    converged: bool
    restart_objectives: List[float] = field(default_factory=list)


def _leg_lengths(points: np.ndarray) -> np.ndarray:
    return haversine_arr(points[:-1, 0], points[:-1, 1], points[1:, 0], points[1:, 1])


def arrival_times(control_points) -> np.ndarray:
    """Normalised arrival time at each control point, proportional to distance flown."""
    pts = as_latlon(control_points).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least two control points")
    legs = _leg_lengths(pts)
    total = legs.sum()
    if not total > 0:
        raise DegenerateTrackError("all control points coincide")
    t = np.empty(len(pts))
    t[0] = 0.0
    np.cumsum(legs / total, out=t[1:])
    # rounding can push a knot a hair past 1 ahead of a zero-length final leg
    np.minimum(t, 1.0, out=t)
    t[-1] = 1.0
    return t


def _interp(points: np.ndarray, knots: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = len(points) - 1
    idx = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, d - 1)
    # zero-length leading legs repeat the 0 knot; t = 0 must still map to the entry point
    idx[t <= 0.0] = 0
    t0 = knots[idx]
    span = knots[idx + 1] - t0
    frac = np.divide(t - t0, span, out=np.zeros_like(t), where=span > 0)
    return points[idx] + frac[:, None] * (points[idx + 1] - points[idx])


def interpolate_many(pt: PiecewiseTrack, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("normalised time outside [0, 1]")
    out = _interp(pt.control_points, pt.arrival_times, t)
    # the final knot is returned verbatim rather than as p[d-1] + 1 * (p[d] - p[d-1])
    out[t == pt.arrival_times[-1]] = pt.control_points[-1]
    return out


def interpolate(pt: PiecewiseTrack, t: float) -> GcsPoint:
    lat, lon = interpolate_many(pt, [t])[0]
    return GcsPoint(lat, lon)


def resample(track: Track, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Linearly resample a track onto ``m`` uniform normalised times.

    Returns ``(t, points)`` with ``points`` of shape (m, 2).
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    t_obs = track.normalized_times
    grid = np.linspace(0.0, 1.0, m)
    lat = np.interp(grid, t_obs, track.points[:, 0])
    lon = np.interp(grid, t_obs, track.points[:, 1])
    return grid, np.column_stack([lat, lon])


def _turn_angle(points: np.ndarray) -> float:
    rows = points.tolist()
    legs = []
    for (la1, lo1), (la2, lo2) in zip(rows[:-1], rows[1:]):
        if la1 != la2 or lo1 != lo2:
            legs.append((la1, la2 - la1, lo2 - lo1))
    total = 0.0
    for (_, a_n, a_lon), (lat_v, b_n, b_lon) in zip(legs[:-1], legs[1:]):
        # both legs expressed in the tangent frame at the vertex they share
        c = math.cos(math.radians(lat_v))
        a_e, b_e = a_lon * c, b_lon * c
        total += abs(math.atan2(a_e * b_n - a_n * b_e, a_e * b_e + a_n * b_n))
    return math.degrees(total)


def total_turn_angle_deg(control_points) -> float:
    """Sum of absolute heading changes at the interior control points."""
    pts = as_latlon(control_points).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least two control points")
    return _turn_angle(pts)


def _knots(points: np.ndarray) -> Optional[List[float]]:
    # scalar loop: d is small and this sits on the optimiser's hot path
    rows = points.tolist()
    legs = []
    for (la1, lo1), (la2, lo2) in zip(rows[:-1], rows[1:]):
        p1, p2 = math.radians(la1), math.radians(la2)
        a = math.sin((p2 - p1) / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(
            math.radians(lo2 - lo1) / 2.0
        ) ** 2
        legs.append(math.asin(math.sqrt(min(a, 1.0))))
    total = sum(legs)
    if not total > 0:
        return None
    knots = [0.0]
    for leg in legs[:-1]:
        knots.append(min(knots[-1] + leg / total, 1.0))
    knots.append(1.0)
    return knots


def _misfit(points: np.ndarray, t_obs: np.ndarray, obs_lat: np.ndarray, obs_lon: np.ndarray) -> float:
    knots = _knots(points)
    if knots is None:
        return math.inf
    r_lat = obs_lat - np.interp(t_obs, knots, points[:, 0])
    r_lon = obs_lon - np.interp(t_obs, knots, points[:, 1])
    return float(r_lat @ r_lat + r_lon @ r_lon)


def data_misfit(control_points, track: Track) -> float:
    """Sum of squared (lat, lon) residuals, degrees squared."""
    pts = as_latlon(control_points).reshape(-1, 2)
    return _misfit(pts, track.normalized_times, track.points[:, 0], track.points[:, 1])


def cost(control_points, track: Track, cfg: FitConfig, penalized: bool = True) -> float:
    pts = as_latlon(control_points).reshape(-1, 2)
    if len(pts) != cfg.degree + 1:
        raise ValueError(f"expected {cfg.degree + 1} control points, got {len(pts)}")
    if np.max(np.abs(pts[0] - track.points[0])) > ANCHOR_TOL_DEG:
        raise ValueError("first control point must equal the first radar point")
    value = _misfit(pts, track.normalized_times, track.points[:, 0], track.points[:, 1])
    if penalized and _turn_angle(pts) > cfg.phi_u_deg:
        value += cfg.lam
    return value


class _Objective:
    """Cost over the 2d free coordinates, with the anchor held fixed."""

    def __init__(self, track: Track, cfg: FitConfig, penalized: bool):
        self.anchor = track.points[0]
        self.t_obs = track.normalized_times
        self.obs_lat = np.ascontiguousarray(track.points[:, 0])
        self.obs_lon = np.ascontiguousarray(track.points[:, 1])
        self.d = cfg.degree
        self.lam = cfg.lam if penalized else 0.0
        self.phi_u = cfg.phi_u_deg
        self.n_evals = 0
        self._pts = np.empty((self.d + 1, 2))
        self._pts[0] = self.anchor

    def points(self, z: np.ndarray) -> np.ndarray:
        pts = self._pts.copy()
        pts[1:] = z.reshape(self.d, 2)
        return pts

    def __call__(self, z: np.ndarray) -> float:
        self.n_evals += 1
        pts = self._pts
        pts[1:] = z.reshape(self.d, 2)
        value = _misfit(pts, self.t_obs, self.obs_lat, self.obs_lon)
        if self.lam and _turn_angle(pts) > self.phi_u:
            value += self.lam
        return value


def _arc_length_seed(resampled: np.ndarray, d: int) -> np.ndarray:
    cum = np.concatenate([[0.0], np.cumsum(_leg_lengths(resampled))])
    if not cum[-1] > 0:
        raise DegenerateTrackError("track has zero length")
    s = cum[-1] * np.arange(1, d + 1) / d
    lat = np.interp(s, cum, resampled[:, 0])
    lon = np.interp(s, cum, resampled[:, 1])
    out = np.column_stack([lat, lon])
    out[-1] = resampled[-1]
    return out


def _chord_errors(q: np.ndarray) -> np.ndarray:
    """err[i, j]: squared distance of q[i..j] to the chord q[i] -> q[j]."""
    m = len(q)
    err = np.full((m, m), np.inf)
    for i in range(m - 1):
        ends = q[i + 1 :]  # candidate chord ends j = i+1..m-1
        between = q[i:]  # candidate interior points k = i..m-1
        v = ends - q[i]
        vv = np.einsum("ij,ij->i", v, v)
        w = between - q[i]
        proj = (w @ v.T) / np.where(vv > 0, vv, 1.0)
        proj = np.clip(proj, 0.0, 1.0)
        # residual of point k against chord j
        rx = w[:, None, 0] - proj * v[None, :, 0]
        ry = w[:, None, 1] - proj * v[None, :, 1]
        r2 = rx * rx + ry * ry
        # only points with k <= j count towards chord j
        k = np.arange(i, m)[:, None]
        j = np.arange(i + 1, m)[None, :]
        err[i, i + 1 :] = np.where(k <= j, r2, 0.0).sum(axis=0)
    return err


def _breakpoint_seed(resampled: np.ndarray, d: int) -> np.ndarray:
    """Best d-leg polygon through the resampled points, by dynamic programming."""
    m = len(resampled)
    # A vanishing charge on squared chord length breaks ties (straight
    # stretches fit any split exactly) towards evenly spread breakpoints,
    # rather than crowding them together where tiny legs turn arbitrarily.
    chord = resampled[None, :, :] - resampled[:, None, :]
    err = _chord_errors(resampled) + TIE_BREAK * np.einsum("ijk,ijk->ij", chord, chord)
    best = np.full((d + 1, m), np.inf)
    back = np.zeros((d + 1, m), dtype=int)
    best[0, 0] = 0.0
    for level in range(1, d + 1):
        total = best[level - 1][:, None] + err
        back[level] = np.argmin(total, axis=0)
        best[level] = total[back[level], np.arange(m)]
    idx = [m - 1]
    for level in range(d, 1, -1):
        idx.append(back[level, idx[-1]])
    return resampled[idx[::-1]]


def _feasible_seed(anchor: np.ndarray, seed: np.ndarray, phi_u: float) -> np.ndarray:
    """Pull ``seed`` towards the straight chord until its total turn is within ``phi_u``.

    The penalty is flat, so a search started beyond ``phi_u`` sees no
    gradient towards the admissible region; this gives it a start inside.
    """
    pts = np.vstack([anchor, seed])
    knots = _knots(pts)
    if knots is None:
        return seed
    chord = anchor + np.outer(knots[1:], seed[-1] - anchor)
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _turn_angle(np.vstack([anchor, chord + mid * (seed - chord)])) <= phi_u:
            lo = mid
        else:
            hi = mid
    return chord + lo * (seed - chord)


def _polish(obj: _Objective, x0: np.ndarray, f0: float, step: float, budget: int):
    """Nelder-Mead from ``x0``, re-seeding the simplex around each improvement."""
    dim = len(x0)
    x, fx = x0, f0
    used = 0
    exhausted = False
    while budget - used > dim + 1:
        simplex = np.vstack([x, x + step * np.eye(dim)])
        res = minimize(
            obj,
            x,
            method="Nelder-Mead",
            options={
                "maxfev": budget - used,
                "initial_simplex": simplex,
                "xatol": 1e-11,
                # absolute in scipy; scaled so noisy fits can meet it
                "fatol": max(1e-18, 1e-12 * fx),
                "adaptive": True,
            },
        )
        used += res.nfev
        if res.status == 1:
            exhausted = True
        if res.fun < fx:
            improved = fx - res.fun > STALL_REL * fx
            x, fx = res.x, res.fun
            if not improved:
                break
            step = max(1e-6, min(step, 10.0 * float(np.max(np.abs(res.x - x0)))))
            x0 = x
        else:
            break
    else:
        exhausted = True
    return x, fx, used, exhausted


def fit(track: Track, cfg: FitConfig, penalized: bool = True) -> FitResult:
    """Fit control points ``p1..pd`` to ``track`` with ``p0`` pinned at its first return."""
    d = cfg.degree
    if len(track) < d + 2:
        raise ValueError(f"track needs at least {d + 2} observations for degree {d}")
    if np.all(track.points == track.points[0]):
        raise DegenerateTrackError("all observations coincide")
    _, q = resample(track, cfg.resample_count)
    seeds = []
    for s in (_arc_length_seed(q, d), _breakpoint_seed(q, d)):
        seeds.append(s)
        if penalized and _turn_angle(np.vstack([track.points[0], s])) > cfg.phi_u_deg:
            seeds.append(_feasible_seed(track.points[0], s, cfg.phi_u_deg))
    obj = _Objective(track, cfg, penalized)
    rng = np.random.default_rng(cfg.seed)

    best_x, best_f = None, math.inf
    objectives = []
    converged = True
    for r in range(cfg.restarts):
        x0 = seeds[r % len(seeds)].ravel().copy()
        if r >= len(seeds):
            x0 += rng.normal(0.0, cfg.jitter_deg, size=x0.shape)
        f0 = obj(x0)
        x, fx, _, exhausted = _polish(obj, x0, f0, cfg.simplex_step_deg, cfg.budget)
        converged &= not exhausted
        objectives.append(fx)
        if fx < best_f:
            best_x, best_f = x, fx
    if not converged:
        warnings.warn("fit hit its evaluation budget; returning best found", FitBudgetWarning)

    pts = obj.points(best_x)
    pt = PiecewiseTrack.from_control_points(pts)
    return FitResult(
        track=pt,
        objective=best_f,
        misfit=_misfit(pts, obj.t_obs, obj.obs_lat, obj.obs_lon),
        turn_deg=_turn_angle(pts),
        n_evals=obj.n_evals,
        converged=converged,
        restart_objectives=objectives,
    )


def calibrate_from_fits(misfits: Sequence[float], turns: Sequence[float]) -> Tuple[float, float]:
    """Penalty settings from unpenalised fits: ten times the median misfit, and the largest turn."""
    if len(misfits) == 0:
        raise ValueError("calibration needs at least one fitted track")
    lam = max(10.0 * float(np.median(misfits)), MIN_LAMBDA)
    phi_u = max(float(np.max(turns)), MIN_PHI_U_DEG)
    return lam, phi_u


def calibrate(tracks: Iterable[Track], cfg: FitConfig) -> Tuple[float, float]:
    fits = [fit(t, cfg, penalized=False) for t in tracks]
    return calibrate_from_fits([f.misfit for f in fits], [f.turn_deg for f in fits])


def with_penalty(cfg: FitConfig, lam: float, phi_u_deg: float) -> FitConfig:
    return replace(cfg, lam=lam, phi_u_deg=phi_u_deg)
