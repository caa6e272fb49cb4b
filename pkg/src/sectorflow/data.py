"""Flight records: CSV ingestion, route grouping, context/target pairs and a
synthetic sector generator standing in for real surveillance data."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import yaml

from .geo import NM_PER_DEG, as_latlon, from_local_xy, haversine_arr, to_local_xy
from .trackfit import FitResult, PiecewiseTrack, Track, interpolate_many

log = logging.getLogger(__name__)

TRACK_HEADER = ["flight_id", "t_sec", "lat_deg", "lon_deg"]
PLAN_HEADER = ["flight_id", "entry_fl", "wpt_index", "lat_deg", "lon_deg"]

DEFAULT_TOP_K = 8
DEFAULT_W = 6
DEFAULT_FRACTION = 0.8
CANONICAL_DECIMALS = 6


class IngestError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass
class FlightRecord:
    flight_id: str
    track: Track
    flight_plan: np.ndarray
    entry_fl: float

    def __post_init__(self):
        self.flight_plan = np.asarray(self.flight_plan, dtype=float).reshape(-1, 2)


@dataclass
class SectorGeometry:
    boundary: np.ndarray
    buffer_nm: float = 50.0

    def __post_init__(self):
        self.boundary = np.asarray(self.boundary, dtype=float).reshape(-1, 2)
        if len(self.boundary) < 3:
            raise ValueError("sector boundary needs at least three vertices")
        if self.buffer_nm < 0:
            raise ValueError("buffer_nm must be non-negative")

    def contains(self, lat: float, lon: float) -> bool:
        """Point-in-polygon (even-odd ray cast in lat/lon), buffer excluded."""
        poly = self.boundary
        inside = False
        j = len(poly) - 1
        for i in range(len(poly)):
            yi, xi = poly[i]
            yj, xj = poly[j]
            if (yi > lat) != (yj > lat):
                x_cross = xi + (lat - yi) * (xj - xi) / (yj - yi)
                if lon < x_cross:
                    inside = not inside
            j = i
        return inside

    def distance_to_boundary_nm(self, lat: float, lon: float) -> float:
        x, y = to_local_xy(self.boundary[:, 0], self.boundary[:, 1], (lat, lon))
        ax, ay = x, y
        bx, by = np.roll(x, -1), np.roll(y, -1)
        vx, vy = bx - ax, by - ay
        t = np.clip(-(ax * vx + ay * vy) / np.maximum(vx * vx + vy * vy, 1e-300), 0.0, 1.0)
        return float(np.min(np.hypot(ax + t * vx, ay + t * vy)))

    def in_region(self, lat: float, lon: float) -> bool:
        """Inside the sector or within ``buffer_nm`` of its edge."""
        return self.contains(lat, lon) or self.distance_to_boundary_nm(lat, lon) <= self.buffer_nm

    def to_dict(self) -> dict:
        return {"boundary": self.boundary.tolist(), "buffer_nm": float(self.buffer_nm)}

    @classmethod
    def from_dict(cls, d: dict) -> "SectorGeometry":
        return cls(d["boundary"], d.get("buffer_nm", 50.0))


@dataclass
class RouteGroup:
    route_id: str
    plan: np.ndarray
    members: List[FlightRecord] = field(default_factory=list)


@dataclass
class PairSet:
    flight_ids: List[str]
    route_ids: List[str]
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.flight_ids)


@dataclass
class SplitDataset:
    train: PairSet
    test: PairSet
    seed: int
    fraction: float


# ------------------------------------------------------------------- CSV I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tracks(records: Iterable[FlightRecord], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_HEADER)
        for r in records:
            for t, (lat, lon) in zip(r.track.times, r.track.points):
                w.writerow([r.flight_id, _fmt(t), _fmt(lat), _fmt(lon)])


def write_plans(records: Iterable[FlightRecord], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        for r in records:
            for i, (lat, lon) in enumerate(r.flight_plan):
                w.writerow([r.flight_id, _fmt(r.entry_fl), i, _fmt(lat), _fmt(lon)])


def _read_rows(path, header: List[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if first != header:
            raise IngestError(f"{path}: line 1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _float(path, lineno, value, name):
    try:
        out = float(value)
    except ValueError:
        raise IngestError(f"{path}: line {lineno}: bad {name} {value!r}") from None
    if not math.isfinite(out):
        raise IngestError(f"{path}: line {lineno}: non-finite {name}")
    return out


def read_tracks(path) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Raw per-flight (times, points) in file order, without validation."""
    rows: Dict[str, list] = {}
    for lineno, (fid, t, lat, lon) in _read_rows(path, TRACK_HEADER):
        rows.setdefault(fid, []).append(
            (_float(path, lineno, t, "t_sec"), _float(path, lineno, lat, "lat_deg"), _float(path, lineno, lon, "lon_deg"))
        )
    return {fid: (np.array([r[0] for r in v]), np.array([r[1:] for r in v])) for fid, v in rows.items()}


def read_plans(path) -> Dict[str, Tuple[float, np.ndarray]]:
    plans: Dict[str, list] = {}
    levels: Dict[str, float] = {}
    for lineno, (fid, fl, idx, lat, lon) in _read_rows(path, PLAN_HEADER):
        try:
            i = int(idx)
        except ValueError:
            raise IngestError(f"{path}: line {lineno}: bad wpt_index {idx!r}") from None
        plans.setdefault(fid, []).append((i, _float(path, lineno, lat, "lat_deg"), _float(path, lineno, lon, "lon_deg")))
        levels[fid] = _float(path, lineno, fl, "entry_fl")
    out = {}
    for fid, wpts in plans.items():
        wpts.sort()
        if [w[0] for w in wpts] != list(range(len(wpts))):
            raise IngestError(f"{path}: flight {fid}: waypoint indices are not 0..{len(wpts) - 1}")
        out[fid] = (levels[fid], np.array([w[1:] for w in wpts]))
    return out


def ingest(tracks_path, plans_path) -> List[FlightRecord]:
    """Parse and validate a track file and its flight-plan file.

    Timestamps are shifted so each track starts at 0.  Flights with fewer
    than two returns or non-increasing timestamps are rejected together in
    one error naming every offender.
    """
    raw = read_tracks(tracks_path)
    plans = read_plans(plans_path)
    bad = []
    records = []
    for fid, (times, pts) in raw.items():
        if len(times) < 2:
            bad.append(f"{fid} (fewer than 2 points)")
            continue
        if np.any(np.diff(times) <= 0):
            bad.append(f"{fid} (timestamps not strictly increasing)")
            continue
        if fid not in plans:
            bad.append(f"{fid} (no flight plan)")
            continue
        fl, plan = plans[fid]
        records.append(FlightRecord(fid, Track(pts, times - times[0]), plan, fl))
    if bad:
        raise IngestError("invalid flights: " + "; ".join(bad))
    return records


# ------------------------------------------------------------------- routes


def canonical_key(plan) -> Tuple[Tuple[float, float], ...]:
    rounded = np.round(np.asarray(plan, dtype=float), CANONICAL_DECIMALS) + 0.0
    return tuple((float(a), float(b)) for a, b in rounded)


def group_routes(records: Sequence[FlightRecord], top_k: int = DEFAULT_TOP_K) -> List[RouteGroup]:
    """Most common filed plans first; ties go to the lexicographically smaller plan."""
    if not records:
        raise ValueError("no flight records to group")
    buckets = defaultdict(list)
    for r in records:
        buckets[canonical_key(r.flight_plan)].append(r)
    ordered = sorted(buckets.items(), key=lambda kv: (-len(kv[1]), kv[0]))[:top_k]
    return [RouteGroup(str(i + 1), np.array(key), members) for i, (key, members) in enumerate(ordered)]


# ------------------------------------------------------------ pairs & split


def encode_plan(plan, w: int = DEFAULT_W) -> np.ndarray:
    """Fixed-length plan: pad by repeating the last waypoint, or keep the first w-1 plus the last."""
    plan = as_latlon(plan).reshape(-1, 2)
    if len(plan) == 0:
        raise ValueError("empty flight plan")
    if len(plan) >= w:
        plan = np.vstack([plan[: w - 1], plan[-1:]]) if w > 1 else plan[-1:]
    else:
        plan = np.vstack([plan, np.repeat(plan[-1:], w - len(plan), axis=0)])
    return plan


def encode_context(entry_point, entry_fl: float, plan, w: int = DEFAULT_W) -> np.ndarray:
    """Context vector [lat0, lon0, entry_fl, plan lat/lon pairs...] of length 3 + 2w."""
    entry = as_latlon(entry_point).reshape(2)
    return np.concatenate([entry, [float(entry_fl)], encode_plan(plan, w).ravel()])


def record_context(record: FlightRecord, w: int = DEFAULT_W) -> np.ndarray:
    return encode_context(record.track.points[0], record.entry_fl, record.flight_plan, w)


def split_ids(flight_ids: Sequence[str], fraction: float = DEFAULT_FRACTION, seed: int = 0):
    """Seeded shuffle of the sorted ids; the first round(fraction * n) go to train."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    ids = sorted(flight_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    train = [ids[i] for i in order[:n_train]]
    test = [ids[i] for i in order[n_train:]]
    return train, test


def _pair_set(ids, route_of, records, fits, w) -> PairSet:
    ids = [i for i in ids if i in fits]
    x = np.array([record_context(records[i], w) for i in ids]).reshape(len(ids), -1)
    y = np.array([fits[i].track.control_points[1:].ravel() for i in ids]).reshape(len(ids), -1)
    return PairSet(ids, [route_of[i] for i in ids], x, y)


def build_pairs(
    groups: Sequence[RouteGroup],
    fits: Dict[str, FitResult],
    w: int = DEFAULT_W,
    fraction: float = DEFAULT_FRACTION,
    seed: int = 0,
) -> SplitDataset:
    """Context/target pairs for every grouped flight with a fit, split by flight id."""
    records = {r.flight_id: r for g in groups for r in g.members}
    route_of = {r.flight_id: g.route_id for g in groups for r in g.members}
    missing = sorted(set(records) - set(fits))
    for fid in missing:
        log.warning("flight %s has no fitted track; skipped", fid)
    train_ids, test_ids = split_ids(list(records), fraction, seed)
    return SplitDataset(
        train=_pair_set(train_ids, route_of, records, fits, w),
        test=_pair_set(test_ids, route_of, records, fits, w),
        seed=seed,
        fraction=fraction,
    )


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)

    @classmethod
    def fit(cls, a) -> "Standardizer":
        a = np.asarray(a, dtype=float)
        if len(a) < 2:
            raise ValueError("standardisation needs at least two rows")
        mean = a.mean(axis=0)
        scale = a.std(axis=0)
        flat = ~(scale > 1e-12 * np.maximum(1.0, np.abs(mean)))
        if flat.any():
            log.warning("zero-variance columns %s: scale clamped to 1", np.flatnonzero(flat).tolist())
            scale = np.where(flat, 1.0, scale)
        return cls(mean, scale)

    def transform(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.scale

    def inverse(self, a):
        return np.asarray(a, dtype=float) * self.scale + self.mean


def standardize(x_train, y_train):
    """Zero-mean, unit-variance maps fitted on training rows.

    Returns ``(x_std, y_std, x_scaler, y_scaler)``; apply the same scalers
    to test rows.
    """
    xs, ys = Standardizer.fit(x_train), Standardizer.fit(y_train)
    return xs.transform(x_train), ys.transform(y_train), xs, ys


# ---------------------------------------------------------------- synthetic


@dataclass
class RouteScenario:
    name: str
    waypoints: np.ndarray
    weight: float = 1.0
    fl_range: Tuple[float, float] = (300.0, 300.0)
    cross_track_nm: float = 0.0
    entry_nm: float = 0.0
    turn_nm: float = 0.0
    heading_jitter_deg: float = 0.0
    shortcut_prob: float = 0.0


@dataclass
class Scenario:
    sector: SectorGeometry
    routes: List[RouteScenario]
    ground_speed_kt: float = 450.0
    speed_sd_kt: float = 0.0
    sample_period_s: float = 10.0
    sample_jitter_s: float = 0.0
    radar_noise_nm: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            sector = SectorGeometry.from_dict(d["sector"])
            defaults = d.get("route_defaults", {})
            routes = []
            for i, r in enumerate(d["routes"]):
                merged = {**defaults, **r}
                fl = merged.pop("fl", 300.0)
                fl_range = tuple(fl) if isinstance(fl, (list, tuple)) else (fl, fl)
                routes.append(
                    RouteScenario(
                        name=str(merged.pop("name", i + 1)),
                        waypoints=np.asarray(merged.pop("waypoints"), dtype=float).reshape(-1, 2),
                        fl_range=(float(fl_range[0]), float(fl_range[1])),
                        **{k: float(v) for k, v in merged.items()},
                    )
                )
            flight = d.get("flight", {})
            scen = cls(sector, routes, **{k: float(v) for k, v in flight.items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from exc
        scen.validate()
        return scen

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def validate(self):
        if not self.routes:
            raise ScenarioError("scenario defines no routes")
        for r in self.routes:
            if len(r.waypoints) < 2:
                raise ScenarioError(f"route {r.name}: needs at least two waypoints")
            if not self.sector.in_region(*r.waypoints[0]):
                raise ScenarioError(f"route {r.name}: first waypoint lies outside the sector and its buffer")
            if r.weight < 0 or not 0 <= r.shortcut_prob <= 1:
                raise ScenarioError(f"route {r.name}: bad weight or shortcut_prob")
            if min(r.cross_track_nm, r.entry_nm, r.turn_nm, r.heading_jitter_deg) < 0:
                raise ScenarioError(f"route {r.name}: noise scales must be non-negative")
        if self.ground_speed_kt <= 0 or self.sample_period_s <= 0:
            raise ScenarioError("ground speed and sample period must be positive")
        if not 0 <= self.sample_jitter_s < self.sample_period_s / 2:
            raise ScenarioError("sample_jitter_s must be below half the sample period")


def default_scenario_path() -> Path:
    return Path(__file__).with_name("scenarios") / "default.yaml"


def _unit_normals(xy: np.ndarray) -> np.ndarray:
    """Left-hand unit normal of each leg."""
    legs = np.diff(xy, axis=0)
    n = np.column_stack([-legs[:, 1], legs[:, 0]])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _miters(xy: np.ndarray) -> np.ndarray:
    """Offset direction per vertex that keeps adjacent legs parallel to the original."""
    normals = _unit_normals(xy)
    out = np.empty_like(xy)
    out[0] = normals[0]
    out[-1] = normals[-1]
    for i in range(1, len(xy) - 1):
        m = normals[i - 1] + normals[i]
        norm = np.linalg.norm(m)
        if norm < 1e-9:
            out[i] = normals[i]
            continue
        m /= norm
        out[i] = m / max(float(m @ normals[i]), 0.2)
    return out


def _turning(xy: np.ndarray, min_deg: float = 1.0) -> np.ndarray:
    """Interior vertices where the plan turns by more than ``min_deg``."""
    legs = np.diff(xy, axis=0)
    ang = np.arctan2(legs[:, 0], legs[:, 1])
    turn = np.abs((np.diff(ang) + np.pi) % (2 * np.pi) - np.pi)
    return np.concatenate([[False], np.degrees(turn) > min_deg, [False]])


def _flown_vertices(route: RouteScenario, rng: np.random.Generator) -> np.ndarray:
    plan = route.waypoints
    origin = plan[0]
    xy = np.column_stack(to_local_xy(plan[:, 0], plan[:, 1], origin))
    if len(xy) >= 3 and rng.random() < route.shortcut_prob:
        drop = 1 + int(rng.integers(len(xy) - 2))
        xy = np.delete(xy, drop, axis=0)
    miters = _miters(xy)
    offset = rng.normal(0.0, route.cross_track_nm) if route.cross_track_nm else 0.0
    xy = xy + offset * miters
    if route.entry_nm:
        xy[0] += rng.normal(0.0, route.entry_nm) * miters[0]
    if route.turn_nm:
        turns = _turning(xy)
        xy[turns] += rng.normal(0.0, route.turn_nm, size=(int(turns.sum()), 1)) * miters[turns]
    if route.heading_jitter_deg:
        a = math.radians(rng.normal(0.0, route.heading_jitter_deg))
        pivot = xy[-2]
        v = xy[-1] - pivot
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        xy[-1] = pivot + rot @ v
    lat, lon = from_local_xy(xy[:, 0], xy[:, 1], origin)
    return np.column_stack([lat, lon])


def synth_flight(scenario: Scenario, route: RouteScenario, flight_id: str, rng: np.random.Generator) -> FlightRecord:
    flown = PiecewiseTrack.from_control_points(_flown_vertices(route, rng))
    pts = flown.control_points
    length_nm = float(haversine_arr(pts[:-1, 0], pts[:-1, 1], pts[1:, 0], pts[1:, 1]).sum())
    speed = scenario.ground_speed_kt
    if scenario.speed_sd_kt:
        speed = max(50.0, speed + rng.normal(0.0, scenario.speed_sd_kt))
    duration = 3600.0 * length_nm / speed
    period = scenario.sample_period_s
    times = np.arange(0.0, duration, period)
    if scenario.sample_jitter_s and len(times) > 1:
        times[1:] += rng.uniform(-scenario.sample_jitter_s, scenario.sample_jitter_s, size=len(times) - 1)
    times = times[times < duration - period / 2]
    times = np.append(times, duration)
    positions = interpolate_many(flown, times / duration)
    if scenario.radar_noise_nm:
        noise = rng.normal(0.0, scenario.radar_noise_nm, size=positions.shape) / NM_PER_DEG
        noise[:, 1] /= np.cos(np.radians(positions[:, 0]))
        positions = positions + noise
    lo, hi = route.fl_range
    fl = float(round(rng.uniform(lo, hi))) if hi > lo else float(lo)
    return FlightRecord(flight_id, Track(positions, times), route.waypoints.copy(), fl)


def synth_sector(scenario: Scenario, n_flights: int, seed: int = 0):
    """Sample ``n_flights`` flights over the scenario's routes; returns (records, sector)."""
    rng = np.random.default_rng(seed)
    weights = np.array([r.weight for r in scenario.routes], dtype=float)
    if not weights.sum() > 0:
        raise ScenarioError("route weights sum to zero")
    choice = rng.choice(len(weights), size=n_flights, p=weights / weights.sum())
    records = [
        synth_flight(scenario, scenario.routes[c], f"F{i:05d}", rng) for i, c in enumerate(choice)
    ]
    return records, scenario.sector
