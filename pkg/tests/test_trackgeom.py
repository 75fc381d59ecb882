from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import brute_project, spline_track
from racesim.errors import ConfigError, ProjectionError
from racesim.trackgeom import (RacingLine, TrackModel, distance_to_boundary, load_racing_line_csv, load_track_csv,
                               reproject_init, save_racing_line_csv, save_track_csv, wrap_angle, FrenetPose)
from racesim.tracks import make_circle, make_oval, make_straight, offset_racing_line


def ds(line, a, b):
    return line.wrap_ds(a - b) if line.closed else a - b


def test_straight_projection_is_orthogonal():
    # [DERIVED] on a straight x axis, s = x and d = y
    line = make_straight(100.0)
    for x, y in [(0.0, 0.0), (12.3, 1.5), (99.9, -4.0), (50.0, 0.0)]:
        s, d = line.project(x, y)
        assert s == pytest.approx(x, abs=1e-12)
        assert d == pytest.approx(y, abs=1e-12)


def test_circle_forward_map_matches_polar_geometry():
    # [DERIVED] points of a dense circle: d > 0 is inward (left of CCW travel)
    track = make_circle(100.0, n=4000)
    for s in np.linspace(0, track.total_length, 7, endpoint=False):
        x, y, _ = track.to_cartesian(float(s), 3.0)
        assert math.hypot(x, y) == pytest.approx(97.0, abs=2e-3)


def test_circle_curvature_and_length():
    track = make_circle(100.0, n=4000)
    assert track.total_length == pytest.approx(2 * math.pi * 100.0, rel=1e-5)
    assert np.allclose(track.curvature, 0.01, rtol=1e-4)


def test_closed_seam_wraps_s():
    track = make_circle(50.0, n=1000)
    L = track.total_length
    assert track.normalize_s(L + 1.0) == pytest.approx(1.0)
    assert track.normalize_s(-1.0) == pytest.approx(L - 1.0)
    assert track.wrap_ds(L - 1.0) == pytest.approx(-1.0)
    x, y, _ = track.to_cartesian(L - 1e-7, 0.5)
    s, _ = track.project(x, y)
    assert min(s, L - s) < 1e-6


def test_open_line_rejects_out_of_range_s():
    with pytest.raises(ProjectionError):
        make_straight(10.0).normalize_s(11.0)


def test_projection_beyond_capture_raises():
    track = make_circle(100.0)
    with pytest.raises(ProjectionError):
        track.project(0.0, 0.0)


@pytest.mark.parametrize("make", [lambda: make_straight(300.0, 0.7), lambda: make_circle(80.0, 1500), spline_track],
                         ids=["straight", "circle", "spline"])
def test_round_trip_against_brute_force(make):
    # [DERIVED] 500 random points per track; oracle: exhaustive bisection scan
    line = make()
    rng = np.random.default_rng(3)
    for _ in range(500):
        s0 = float(rng.uniform(0, line.total_length))
        d0 = float(rng.uniform(-4.5, 4.5))
        mu0 = float(rng.uniform(-0.6, 0.6))
        x, y, yaw = line.to_cartesian(s0, d0, mu0)
        fp = line.to_frenet(x, y, yaw)
        so, do = brute_project(line, x, y)
        assert abs(ds(line, fp.s, so)) < 1e-6 and abs(fp.d - do) < 1e-6
        assert abs(ds(line, fp.s, s0)) < 1e-6 and abs(fp.d - d0) < 1e-6
        assert abs(wrap_angle(fp.mu - mu0)) < 1e-8


def test_ties_resolve_to_smallest_s():
    # [DERIVED] a point on the oval's long axis is 10 m from both straights;
    # the bottom straight (travelled first) has the smaller s
    track = make_oval(200.0, 10.0, width_left=4.0, width_right=4.0, spacing=1.0)
    s, d = track.project(20.0, 0.0)
    assert s == pytest.approx(20.0, abs=1e-9)
    assert d == pytest.approx(10.0, abs=1e-9)


def test_widths_and_boundary_distance():
    track = make_straight(100.0, width=5.0)
    assert track.widths_at(40.0) == (5.0, 5.0)
    assert distance_to_boundary(track, 40.0, 1.0) == pytest.approx(4.0)
    assert distance_to_boundary(track, 40.0, -6.0) == pytest.approx(-1.0)


def test_invalid_width_rejected():
    with pytest.raises(ConfigError):
        TrackModel([[0, 0], [1, 0], [2, 0]], 0.0, 1.0, closed=False)


def test_csv_round_trip(tmp_path):
    track = make_oval(200.0, 100.0, spacing=5.0)
    save_track_csv(track, tmp_path / "t.csv")
    back = load_track_csv(tmp_path / "t.csv")
    assert np.array_equal(back.points, track.points)
    assert back.total_length == pytest.approx(track.total_length)
    line = offset_racing_line(track, 1.0, 60.0, 15.0)
    save_racing_line_csv(line, tmp_path / "l.csv")
    back_line = load_racing_line_csv(tmp_path / "l.csv")
    assert np.array_equal(back_line.speed, line.speed)


def test_malformed_csv_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n0,0\n")
    with pytest.raises(ConfigError):
        load_track_csv(p)


def test_offset_line_speed_profile_respects_lateral_limit():
    # [DERIVED] v^2 kappa <= a_lat on the curves, capped at v_max on straights
    track = make_oval(300.0, 150.0)
    line = offset_racing_line(track, 0.0, 70.0, 15.0)
    assert np.all(line.speed ** 2 * np.abs(line.curvature) <= 15.0 + 1e-6)
    assert line.speed.max() == pytest.approx(70.0)


def test_reproject_init_maps_line_pose_onto_centerline():
    track = make_circle(100.0, n=3000)
    line = offset_racing_line(track, 2.0, 50.0, 20.0)
    cp = reproject_init(track, line, FrenetPose(10.0, 0.5, 0.0))
    x, y, _ = line.to_cartesian(10.0, 0.5)
    s, d = track.project(x, y)
    assert cp.s == pytest.approx(s) and cp.d == pytest.approx(d)
    assert cp.d == pytest.approx(2.5, abs=1e-2)


def test_racing_line_speed_interpolation():
    line = RacingLine([[0, 0], [10, 0], [20, 0]], [10.0, 20.0, 30.0], closed=False)
    assert line.speed_at(5.0) == pytest.approx(15.0)
