"""Synthetic tracks and racing lines used by the shipped scenarios and tests."""

from __future__ import annotations

import math

import numpy as np

from .trackgeom import RacingLine, ReferenceLine, TrackModel


def oval_points(straight: float, radius: float, spacing: float = 2.0) -> np.ndarray:
    """Counter-clockwise stadium oval starting mid bottom straight, heading +x."""
    half = straight / 2.0
    n_half = max(1, round(half / spacing))
    n_arc = max(8, round(math.pi * radius / spacing))
    pts = []
    # bottom straight, second half: (0, -R) -> (half, -R)
    for k in range(n_half):
        pts.append((half * k / n_half, -radius))
    # right semicircle around (half, 0)
    for k in range(n_arc):
        a = -math.pi / 2 + math.pi * k / n_arc
        pts.append((half + radius * math.cos(a), radius * math.sin(a)))
    # top straight heading -x
    for k in range(2 * n_half):
        pts.append((half - straight * k / (2 * n_half), radius))
    # left semicircle around (-half, 0)
    for k in range(n_arc):
        a = math.pi / 2 + math.pi * k / n_arc
        pts.append((-half + radius * math.cos(a), radius * math.sin(a)))
    # bottom straight, first half back to the origin
    for k in range(n_half):
        pts.append((-half + half * k / n_half, -radius))
    return np.asarray(pts)


def make_oval(straight: float = 450.0, radius: float = 300.0, width_left: float = 8.0,
              width_right: float = 8.0, spacing: float = 2.0) -> TrackModel:
    return TrackModel(oval_points(straight, radius, spacing), width_left, width_right)


def make_circle(radius: float = 100.0, n: int = 2000, width: float = 8.0) -> TrackModel:
    a = 2.0 * math.pi * np.arange(n) / n
    pts = np.column_stack([radius * np.cos(a), radius * np.sin(a)])
    return TrackModel(pts, width, width)


def make_straight(length: float = 100.0, spacing: float = 1.0, width: float = 5.0) -> TrackModel:
    n = round(length / spacing) + 1
    xs = np.linspace(0.0, length, n)
    return TrackModel(np.column_stack([xs, np.zeros(n)]), width, width, closed=False)


def make_lobed(radius: float = 150.0, amplitude: float = 0.15, lobes: int = 3, n: int = 3000,
               width: float = 6.0) -> TrackModel:
    """Smooth closed curve r(t) = R (1 + a cos(k t)), densely sampled."""
    t = 2.0 * math.pi * np.arange(n) / n
    r = radius * (1.0 + amplitude * np.cos(lobes * t))
    return TrackModel(np.column_stack([r * np.cos(t), r * np.sin(t)]), width, width)


def offset_racing_line(track: ReferenceLine, offset: float, v_max: float, a_lat_max: float,
                       spacing: float | None = None) -> RacingLine:
    """Racing line at a constant lateral offset with a curvature-limited speed profile."""
    if spacing is None:
        s_values = track.cum_s[:-1] if track.closed else track.cum_s
    else:
        s_values = np.arange(0.0, track.total_length, spacing)
    pts = np.array([track.to_cartesian(float(s), offset)[:2] for s in s_values])
    line = RacingLine(pts, v_max, closed=track.closed)
    kappa = np.abs(line.curvature)
    with np.errstate(divide="ignore"):
        v_curve = np.sqrt(a_lat_max / np.maximum(kappa, 1e-9))
    return RacingLine(pts, np.minimum(v_max, v_curve), closed=track.closed)
