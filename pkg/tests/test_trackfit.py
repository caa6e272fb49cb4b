import math
import warnings

import numpy as np
import pytest
from helpers import random_piecewise, sample_track
from hypothesis import given, settings
from hypothesis import strategies as st

from sectorflow.geo import destination_point, haversine_nm
from sectorflow.trackfit import (
    DegenerateTrackError,
    FitBudgetWarning,
    FitConfig,
    PiecewiseTrack,
    Track,
    arrival_times,
    calibrate,
    calibrate_from_fits,
    cost,
    data_misfit,
    fit,
    interpolate,
    interpolate_many,
    resample,
    total_turn_angle_deg,
)


coord_st = st.tuples(st.floats(50, 54).map(lambda v: round(v, 4)), st.floats(-2, 2).map(lambda v: round(v, 4)))


def _pt(*pts):
    return PiecewiseTrack.from_control_points(np.array(pts, dtype=float))


# --- independent step-by-step re-implementation used as a compositional oracle


def oracle_times(pts):
    lengths = [haversine_nm(pts[i - 1], pts[i]) for i in range(1, len(pts))]
    total = sum(lengths)
    out = [0.0]
    for L in lengths:
        out.append(out[-1] + L / total)
    return out


def oracle_position(pts, knots, t):
    for i in range(len(pts) - 1):
        if knots[i] <= t <= knots[i + 1] and knots[i + 1] > knots[i]:
            f = (t - knots[i]) / (knots[i + 1] - knots[i])
            return [pts[i][0] + f * (pts[i + 1][0] - pts[i][0]), pts[i][1] + f * (pts[i + 1][1] - pts[i][1])]
    return list(pts[-1])


def oracle_turn(pts):
    legs = []
    for a, b in zip(pts[:-1], pts[1:]):
        if tuple(a) != tuple(b):
            legs.append((a, b))
    total = 0.0
    for (a, v), (_, b) in zip(legs[:-1], legs[1:]):
        c = math.cos(math.radians(v[0]))
        u = np.array([(v[1] - a[1]) * c, v[0] - a[0]])
        w = np.array([(b[1] - v[1]) * c, b[0] - v[0]])
        cosang = np.clip(u @ w / (np.linalg.norm(u) * np.linalg.norm(w)), -1.0, 1.0)
        total += math.degrees(math.acos(cosang))
    return total


def oracle_cost(pts, track, lam, phi_u):
    knots = oracle_times(pts)
    tn = track.times[-1]
    total = 0.0
    for x, tau in zip(track.points, track.times):
        xh = oracle_position(pts, knots, tau / tn)
        total += (x[0] - xh[0]) ** 2 + (x[1] - xh[1]) ** 2
    if oracle_turn(pts) > phi_u:
        total += lam
    return total


class TestTrackType:
    def test_times_must_start_at_zero(self):
        with pytest.raises(ValueError):
            Track([[0, 0], [0, 1]], [1.0, 2.0])

    def test_times_strictly_increasing(self):
        with pytest.raises(ValueError):
            Track([[0, 0], [0, 1], [0, 2]], [0.0, 1.0, 1.0])

    def test_lengths_match(self):
        with pytest.raises(ValueError):
            Track([[0, 0], [0, 1]], [0.0, 1.0, 2.0])


class TestArrivalTimes:
    def test_equal_legs(self):
        t = arrival_times([[0, 0], [0, 1], [0, 2], [0, 3]])
        np.testing.assert_allclose(t, [0, 1 / 3, 2 / 3, 1], atol=1e-12)

    def test_ten_thirty(self):
        p0 = (0.0, 0.0)
        p1 = destination_point(p0, 90.0, 10.0)
        p2 = destination_point(p1, 90.0, 30.0)
        t = arrival_times([p0, p1, p2])
        np.testing.assert_allclose(t, [0.0, 0.25, 1.0], atol=1e-12)

    def test_repeated_point(self):
        t = arrival_times([[0, 0], [0, 1], [0, 1], [0, 2]])
        assert t[1] == t[2]
        np.testing.assert_allclose(t, [0, 0.5, 0.5, 1], atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateTrackError):
            arrival_times([[51, 0], [51, 0], [51, 0]])

    @given(st.lists(coord_st, min_size=2, max_size=8))
    def test_increments_sum_to_one(self, pts):
        pts = np.array(pts)
        if np.all(pts == pts[0]):
            return
        t = arrival_times(pts)
        assert t[0] == 0.0 and t[-1] == 1.0
        assert np.all(np.diff(t) >= 0)
        assert abs(np.diff(t).sum() - 1.0) < 1e-12
        np.testing.assert_allclose(t, oracle_times(pts), atol=1e-12)


class TestInterpolate:
    def test_endpoints(self):
        pt = _pt((52, 0), (52.5, 0.3), (53, -0.2))
        assert tuple(interpolate(pt, 0.0)) == (52.0, 0.0)
        assert tuple(interpolate(pt, 1.0)) == (53.0, -0.2)

    def test_midpoint(self):
        p = interpolate(_pt((0, 0), (0, 1)), 0.5)
        assert (p.lat_deg, p.lon_deg) == (0.0, 0.5)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            interpolate(_pt((0, 0), (0, 1)), 1.5)

    def test_knots_bit_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            d = int(rng.integers(1, 7))
            pts = np.column_stack([rng.uniform(48, 56, d + 1), rng.uniform(-4, 4, d + 1)])
            pt = PiecewiseTrack.from_control_points(pts)
            got = interpolate_many(pt, pt.arrival_times)
            assert np.array_equal(got, pts)

    def test_between_knots_on_segment(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            pts = np.column_stack([rng.uniform(48, 56, 4), rng.uniform(-4, 4, 4)])
            pt = PiecewiseTrack.from_control_points(pts)
            i = int(rng.integers(3))
            t = rng.uniform(pt.arrival_times[i], pt.arrival_times[i + 1])
            x = interpolate_many(pt, [t])[0]
            a, b = pts[i], pts[i + 1]
            cross = (b[0] - a[0]) * (x[1] - a[1]) - (b[1] - a[1]) * (x[0] - a[0])
            assert abs(cross) < 1e-12

    @given(st.floats(0, 1))
    def test_matches_oracle(self, t):
        pts = np.array([[52.0, 0.0], [52.4, 0.5], [52.9, 0.2], [53.1, -0.4]])
        pt = PiecewiseTrack.from_control_points(pts)
        np.testing.assert_allclose(interpolate_many(pt, [t])[0], oracle_position(pts, oracle_times(pts), t), atol=1e-12)


class TestResample:
    def test_uniform_recovers(self):
        pts = np.column_stack([np.linspace(51, 52, 11), np.sin(np.arange(11.0))])
        tr = Track(pts, np.arange(11.0) * 4.0)
        t, q = resample(tr, 11)
        np.testing.assert_allclose(q, pts, atol=1e-12)
        np.testing.assert_allclose(t, np.linspace(0, 1, 11))

    def test_two_points(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(9, 2)) + [52, 0]
        tr = Track(pts, np.concatenate([[0.0], np.cumsum(rng.uniform(1, 5, 8))]))
        _, q = resample(tr, 2)
        np.testing.assert_array_equal(q, pts[[0, -1]])

    def test_linear_in_time_collinear(self):
        rng = np.random.default_rng(4)
        times = np.concatenate([[0.0], np.sort(rng.uniform(0, 100, 30)), [100.0]])
        a, b = np.array([51.0, -1.0]), np.array([52.5, 0.7])
        pts = a + (times / 100.0)[:, None] * (b - a)
        _, q = resample(Track(pts, times), 17)
        cross = (b[0] - a[0]) * (q[:, 1] - a[1]) - (b[1] - a[1]) * (q[:, 0] - a[0])
        assert np.max(np.abs(cross)) < 1e-9

    def test_m_too_small(self):
        with pytest.raises(ValueError):
            resample(Track([[0, 0], [0, 1]], [0, 1]), 1)


class TestTurnAngle:
    def test_collinear(self):
        assert total_turn_angle_deg([[0, 0], [0, 1], [0, 2], [0, 3]]) == 0.0
        assert total_turn_angle_deg([[51, 0], [51.5, 0.5], [52, 1]]) == 0.0

    def test_dogleg(self):
        assert total_turn_angle_deg([[0, 0], [0, 1], [1, 1]]) == pytest.approx(90.0, abs=0.1)

    def test_s_shape(self):
        s = math.sqrt(0.5)
        pts = [[0, 0], [0, 1], [s, 1 + s], [s, 2 + s]]
        assert total_turn_angle_deg(pts) == pytest.approx(90.0, abs=0.1)

    def test_zero_length_leg_skipped(self):
        assert total_turn_angle_deg([[0, 0], [0, 1], [0, 1], [1, 1]]) == pytest.approx(90.0, abs=0.1)

    @given(st.lists(coord_st, min_size=2, max_size=7))
    def test_matches_oracle(self, pts):
        pts = np.array(pts)
        got = total_turn_angle_deg(pts)
        assert got >= 0
        assert got == pytest.approx(oracle_turn(pts), abs=1e-5)


class TestCost:
    def setup_method(self):
        self.pt = _pt((52.0, 0.0), (52.3, 0.4), (52.2, 0.9), (52.6, 1.2))
        self.track = sample_track(self.pt, 60)

    def test_perfect_fit(self):
        cfg = FitConfig(phi_u_deg=179.0)
        assert cost(self.pt.control_points, self.track, cfg) == pytest.approx(0.0, abs=1e-28)

    def test_penalty_isolated(self):
        turn = total_turn_angle_deg(self.pt.control_points)
        cfg = FitConfig(lam=0.37, phi_u_deg=turn / 2)
        v = cost(self.pt.control_points, self.track, cfg)
        assert v == pytest.approx(0.37, abs=1e-24)
        assert cost(self.pt.control_points, self.track, cfg, penalized=False) < 1e-24

    def test_anchor_mismatch(self):
        pts = self.pt.control_points.copy()
        pts[0, 0] += 1e-6
        with pytest.raises(ValueError):
            cost(pts, self.track, FitConfig())

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            cost(self.pt.control_points[:3], self.track, FitConfig())

    def test_compositional_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(5, 40))
            pts = np.column_stack([rng.uniform(51, 53, n), rng.uniform(-1, 1, n)])
            times = np.concatenate([[0.0], np.cumsum(rng.uniform(1, 10, n - 1))])
            tr = Track(pts, times)
            cp = np.column_stack([rng.uniform(51, 53, 4), rng.uniform(-1, 1, 4)])
            cp[0] = pts[0]
            cfg = FitConfig(lam=rng.uniform(0.1, 2), phi_u_deg=rng.uniform(10, 300))
            assert cost(cp, tr, cfg) == pytest.approx(oracle_cost(cp, tr, cfg.lam, cfg.phi_u_deg), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_penalty_never_lowers(self, seed):
        rng = np.random.default_rng(seed)
        cp = np.column_stack([rng.uniform(51, 53, 4), rng.uniform(-1, 1, 4)])
        cp[0] = self.track.points[0]
        cfg = FitConfig(lam=rng.uniform(0.01, 1), phi_u_deg=rng.uniform(1, 200))
        full = cost(cp, self.track, cfg)
        bare = cost(cp, self.track, cfg, penalized=False)
        assert 0 <= bare <= full
        assert bare == data_misfit(cp, self.track)


class TestFit:
    def test_round_trip_30_degree_turns(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            pt = random_piecewise(rng, min_turn=30.0, max_turn=30.0)
            res = fit(sample_track(pt, 200), FitConfig(seed=1))
            assert np.max(np.abs(res.track.control_points - pt.control_points)) < 1e-3
            assert res.objective < 1e-8

    def test_anchor_exact(self):
        rng = np.random.default_rng(6)
        pt = random_piecewise(rng)
        tr = sample_track(pt, 120, noise_deg=0.002, rng=rng)
        res = fit(tr, FitConfig())
        assert np.array_equal(interpolate_many(res.track, [0.0])[0], tr.points[0])

    def test_straight_line(self):
        a, b = np.array([51.0, -1.0]), np.array([53.0, 1.0])
        t = np.linspace(0, 1, 100)
        tr = Track(a + t[:, None] * (b - a), t * 600)
        res = fit(tr, FitConfig())
        assert res.turn_deg < 1.0
        assert math.sqrt(res.misfit / len(tr)) < 1e-6

    def test_sharp_turn_constrained(self):
        # one 90 degree corner; at most 45 degrees of turning allowed
        a = (52.0, 0.0)
        c = destination_point(a, 90.0, 40.0)
        e = destination_point(c, 0.0, 40.0)
        pts = [a, (c.lat_deg, c.lon_deg), (e.lat_deg, e.lon_deg)]
        tr = sample_track(_pt(*pts), 150)
        free = fit(tr, FitConfig(seed=2), penalized=False)
        assert free.turn_deg > 45.0
        cfg = FitConfig(lam=1e3, phi_u_deg=45.0, seed=2)
        res = fit(tr, cfg)
        assert res.turn_deg <= 45.0
        assert res.objective == pytest.approx(res.misfit)
        assert res.objective < cfg.lam
        assert free.misfit <= res.misfit

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        tr = sample_track(random_piecewise(rng), 100, noise_deg=0.003, rng=rng)
        a = fit(tr, FitConfig(seed=4))
        b = fit(tr, FitConfig(seed=4))
        assert np.array_equal(a.track.control_points, b.track.control_points)
        assert a.objective == b.objective

    def test_monotone_in_budget(self):
        rng = np.random.default_rng(9)
        tr = sample_track(random_piecewise(rng), 100, noise_deg=0.003, rng=rng)
        values = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FitBudgetWarning)
            for budget in (20, 50, 100, 300, 1000, 3000):
                values.append(fit(tr, FitConfig(budget=budget, seed=3)).objective)
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_budget_warning(self):
        rng = np.random.default_rng(10)
        tr = sample_track(random_piecewise(rng), 100, noise_deg=0.003, rng=rng)
        with pytest.warns(FitBudgetWarning):
            res = fit(tr, FitConfig(budget=15, restarts=1))
        assert not res.converged

    def test_degenerate(self):
        tr = Track(np.tile([52.0, 0.0], (10, 1)), np.arange(10.0))
        with pytest.raises(DegenerateTrackError):
            fit(tr, FitConfig())

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit(Track([[0, 0], [0, 1], [0, 2], [0, 3]], [0, 1, 2, 3]), FitConfig(degree=3))

    def test_restart_objectives_recorded(self):
        rng = np.random.default_rng(13)
        tr = sample_track(random_piecewise(rng), 80)
        res = fit(tr, FitConfig(restarts=4))
        assert len(res.restart_objectives) == 4
        assert res.objective == min(res.restart_objectives)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [dict(degree=0), dict(lam=0.0), dict(phi_u_deg=-1.0), dict(resample_count=4), dict(budget=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)


class TestCalibrate:
    def test_single(self):
        lam, phi = calibrate_from_fits([0.02], [35.0])
        assert lam == pytest.approx(0.2)
        assert phi == 35.0

    def test_straight_floor(self):
        assert calibrate_from_fits([1e-6, 2e-6], [0.0, 0.0])[1] == 5.0

    def test_median(self):
        assert calibrate_from_fits([0.01, 0.03], [10.0, 20.0]) == (pytest.approx(0.2), 20.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            calibrate_from_fits([], [])

    def test_from_tracks(self):
        rng = np.random.default_rng(14)
        tracks = [sample_track(random_piecewise(rng), 80, noise_deg=0.002, rng=rng) for _ in range(3)]
        cfg = FitConfig(restarts=2)
        fits = [fit(t, cfg, penalized=False) for t in tracks]
        assert calibrate(tracks, cfg) == calibrate_from_fits([f.misfit for f in fits], [f.turn_deg for f in fits])
