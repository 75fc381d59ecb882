"""Oriented rectangle footprints and separating-axis overlap tests."""

from __future__ import annotations

import math

import numpy as np


def rectangle(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners (4x2, counter-clockwise) of a rectangle centred at (x, y) along yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def _axes(corners: np.ndarray) -> np.ndarray:
    e = np.array([corners[1] - corners[0], corners[2] - corners[1]])
    return e / np.linalg.norm(e, axis=1)[:, None]


def separation(a: np.ndarray, b: np.ndarray) -> float:
    """Signed separation of two convex rectangles along the best separating axis.

    Positive: gap width along the axis that separates them. Negative: minimum
    overlap over the four candidate axes (a penetration depth bound).
    """
    best = -math.inf
    for axis in np.vstack([_axes(a), _axes(b)]):
        pa, pb = a @ axis, b @ axis
        gap = max(pb.min() - pa.max(), pa.min() - pb.max())
        best = max(best, gap)
    return float(best)


def obb_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """True when the rectangles share interior area (touching counts as no overlap)."""
    return separation(a, b) < 0.0


def footprints_overlap(x1, y1, yaw1, l1, w1, x2, y2, yaw2, l2, w2) -> bool:
    return obb_overlap(rectangle(x1, y1, yaw1, l1, w1), rectangle(x2, y2, yaw2, l2, w2))
