"""Reference lines, tracks and Frenet/Cartesian conversion.

A reference line is a polyline whose vertex headings come from central
finite differences. Between two vertices the unit normal is the normalized
linear blend of the two vertex normals, so the frame rotates continuously
along the line. The forward map is

    (s, d) -> P(s) + d * n(s)

and the projection inverts it exactly: on each candidate segment we solve
for the parameter ``u`` at which ``p - P(u)`` is parallel to ``n(u)`` (a
quadratic in ``u``). On straight segments this is plain orthogonal segment
projection. Both directions agree to rounding error wherever ``|d|`` is below
the local radius of curvature. Among several feet the one with the smallest
``|d|`` wins, and ties go to the smallest ``s``.

Lateral offsets are positive to the left of the direction of travel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProjectionError

TIE_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class FrenetPose:
    s: float
    d: float = 0.0
    mu: float = 0.0


class ReferenceLine:
    """Closed or open polyline with arc length, headings and a projection index."""

    def __init__(self, points, closed: bool = True, capture_distance: float | None = None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ConfigError("reference line needs an (N, 2) array of points")
        if closed and len(pts) > 3 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if closed and len(pts) < 3:
            raise ConfigError("closed reference line needs at least 3 points")
        self.points = pts
        self.closed = closed
        n = len(pts)
        nxt = np.roll(pts, -1, axis=0) if closed else pts[1:]
        start = pts if closed else pts[:-1]
        seg = nxt - start
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ConfigError("reference line has repeated consecutive points")
        self.seg_vec = seg
        self.seg_len = seg_len
        self.cum_s = np.concatenate([[0.0], np.cumsum(seg_len)])  # one entry per segment start + end
        self.total_length = float(self.cum_s[-1])

        if closed:
            fwd = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
        else:
            fwd = np.empty_like(pts)
            fwd[1:-1] = pts[2:] - pts[:-2]
            fwd[0] = pts[1] - pts[0]
            fwd[-1] = pts[-1] - pts[-2]
        self.heading = np.arctan2(fwd[:, 1], fwd[:, 0])
        self.normals = np.column_stack([-np.sin(self.heading), np.cos(self.heading)])

        # per-vertex curvature from heading differences
        if closed:
            dh = np.array([wrap_angle(a) for a in np.roll(self.heading, -1) - np.roll(self.heading, 1)])
            ds = np.roll(self.cum_s[:-1], -1) - np.roll(self.cum_s[:-1], 1)
            ds[0] += self.total_length
            ds[-1] += self.total_length
        else:
            dh = np.zeros(n)
            ds = np.ones(n)
            if n > 2:
                dh[1:-1] = [wrap_angle(a) for a in self.heading[2:] - self.heading[:-2]]
                ds[1:-1] = self.cum_s[2:n] - self.cum_s[: n - 2]
        self.curvature = dh / ds

        self._seg_a = start
        self._na = self.normals if closed else self.normals[:-1]
        self._nb = np.roll(self.normals, -1, axis=0) if closed else self.normals[1:]
        self.capture_distance = float(capture_distance) if capture_distance else 50.0
        self._build_grid()

    # ------------------------------------------------------------------ index
    def _build_grid(self) -> None:
        cap = self.capture_distance
        self._cell = max(cap / 2.0, 4.0 * float(np.median(self.seg_len)), 1e-3)
        a = self._seg_a
        b = a + self.seg_vec
        lo = np.floor((np.minimum(a, b) - cap) / self._cell).astype(int)
        hi = np.floor((np.maximum(a, b) + cap) / self._cell).astype(int)
        grid: dict[tuple[int, int], list[int]] = {}
        for i in range(len(a)):
            for cx in range(lo[i, 0], hi[i, 0] + 1):
                for cy in range(lo[i, 1], hi[i, 1] + 1):
                    grid.setdefault((cx, cy), []).append(i)
        self._grid = {k: np.asarray(v, dtype=int) for k, v in grid.items()}

    def _candidates(self, x: float, y: float) -> np.ndarray:
        key = (math.floor(x / self._cell), math.floor(y / self._cell))
        return self._grid.get(key, np.empty(0, dtype=int))

    # ------------------------------------------------------------ utilities
    def normalize_s(self, s: float) -> float:
        if self.closed:
            s = math.fmod(s, self.total_length)
            if s < 0.0:
                s += self.total_length
            if s >= self.total_length:
                s = 0.0
            return s
        if s < -1e-9 or s > self.total_length + 1e-9:
            raise ProjectionError(f"s={s} outside open line [0, {self.total_length}]")
        return min(max(s, 0.0), self.total_length)

    def locate(self, s: float) -> tuple[int, float]:
        """Segment index and segment parameter u in [0, 1] of arc length s."""
        s = self.normalize_s(s)
        i = int(np.searchsorted(self.cum_s, s, side="right")) - 1
        i = min(max(i, 0), len(self.seg_len) - 1)
        u = (s - self.cum_s[i]) / self.seg_len[i]
        return i, min(max(u, 0.0), 1.0)

    def _frame(self, i: int, u: float) -> tuple[float, float, float, float]:
        a = self._seg_a[i]
        e = self.seg_vec[i]
        n = (1.0 - u) * self._na[i] + u * self._nb[i]
        norm = math.hypot(n[0], n[1])
        return a[0] + u * e[0], a[1] + u * e[1], n[0] / norm, n[1] / norm

    def point_at(self, s: float) -> tuple[float, float]:
        x, y, _, _ = self._frame(*self.locate(s))
        return x, y

    def heading_at(self, s: float) -> float:
        _, _, nx, ny = self._frame(*self.locate(s))
        return math.atan2(-nx, ny)

    def normal_at(self, s: float) -> tuple[float, float]:
        _, _, nx, ny = self._frame(*self.locate(s))
        return nx, ny

    def curvature_at(self, s: float) -> float:
        return self._interp_vertex(self.curvature, s)

    def _interp_vertex(self, values: np.ndarray, s: float) -> float:
        i, u = self.locate(s)
        j = (i + 1) % len(values) if self.closed else i + 1
        return float((1.0 - u) * values[i] + u * values[j])

    def wrap_ds(self, ds: float) -> float:
        """Signed arc-length difference wrapped to (-L/2, L/2] on closed lines."""
        if not self.closed:
            return ds
        half = 0.5 * self.total_length
        ds = math.fmod(ds + half, self.total_length)
        if ds <= 0.0:
            ds += self.total_length
        return ds - half

    # ----------------------------------------------------------- conversion
    def to_cartesian(self, s: float, d: float = 0.0, mu: float = 0.0) -> tuple[float, float, float]:
        px, py, nx, ny = self._frame(*self.locate(s))
        return px + d * nx, py + d * ny, wrap_angle(math.atan2(-nx, ny) + mu)

    def _solve(self, x: float, y: float, idx: np.ndarray):
        """Feet of (x, y) on segments ``idx``: arrays (seg, u, d), valid only."""
        a = self._seg_a[idx]
        e = self.seg_vec[idx]
        na = self._na[idx]
        dn = self._nb[idx] - na
        qx = x - a[:, 0]
        qy = y - a[:, 1]
        # (q - u e) x (na + u dn) = 0  ->  A u^2 + B u + C = 0
        A = -(e[:, 0] * dn[:, 1] - e[:, 1] * dn[:, 0])
        B = (qx * dn[:, 1] - qy * dn[:, 0]) - (e[:, 0] * na[:, 1] - e[:, 1] * na[:, 0])
        C = qx * na[:, 1] - qy * na[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            lin = -C / B
            disc = B * B - 4.0 * A * C
            sq = np.sqrt(np.maximum(disc, 0.0))
            q = -0.5 * (B + np.copysign(sq, B))
            r1 = q / A
            r2 = C / q
        small = np.abs(A) <= 1e-12 * np.maximum(np.abs(B), 1e-300)
        u1 = np.where(small, lin, r2)  # r2 is the root that tends to -C/B as A -> 0
        u2 = np.where(small, np.nan, r1)
        u2 = np.where(disc < 0.0, np.nan, u2)
        u1 = np.where(~small & (disc < 0.0), np.nan, u1)
        eps = 1e-12
        us = np.concatenate([u1, u2])
        segs = np.concatenate([idx, idx])
        ok = np.isfinite(us) & (us >= -eps) & (us <= 1.0 + eps)
        us = np.clip(us[ok], 0.0, 1.0)
        segs = segs[ok]
        if len(segs) == 0:
            return segs, us, us
        qx2 = np.concatenate([qx, qx])[ok]
        qy2 = np.concatenate([qy, qy])[ok]
        e2 = self.seg_vec[segs]
        n = (1.0 - us)[:, None] * self._na[segs] + us[:, None] * self._nb[segs]
        n /= np.hypot(n[:, 0], n[:, 1])[:, None]
        rx = qx2 - us * e2[:, 0]
        ry = qy2 - us * e2[:, 1]
        d = rx * n[:, 0] + ry * n[:, 1]
        # reject feet where the residual is not along the normal (spurious root)
        perp = np.abs(rx * n[:, 1] - ry * n[:, 0])
        good = perp <= 1e-6 * np.maximum(1.0, np.abs(d))
        return segs[good], us[good], d[good]

    def project(self, x: float, y: float, max_distance: float | None = None) -> tuple[float, float]:
        """(s, d) of the foot of (x, y); raises ProjectionError beyond capture."""
        cap = self.capture_distance if max_distance is None else max_distance
        segs, us, d = self._solve(x, y, self._candidates(x, y))
        if len(segs):
            keep = np.abs(d) <= cap
            segs, us, d = segs[keep], us[keep], d[keep]
        if not len(segs):
            raise ProjectionError(f"point ({x:.3f}, {y:.3f}) is farther than {cap} m from the line")
        s = self.cum_s[segs] + us * self.seg_len[segs]
        if self.closed:
            s = np.where(s >= self.total_length, s - self.total_length, s)
        ad = np.abs(d)
        best = ad.min()
        tied = ad <= best + TIE_TOL
        k = int(np.flatnonzero(tied)[np.argmin(s[tied])])
        return float(s[k]), float(d[k])

    def to_frenet(self, x: float, y: float, yaw: float = 0.0, max_distance: float | None = None) -> FrenetPose:
        s, d = self.project(x, y, max_distance)
        return FrenetPose(s, d, wrap_angle(yaw - self.heading_at(s)))


class TrackModel(ReferenceLine):
    """Track centerline with left/right widths (meters)."""

    def __init__(self, points, width_left, width_right, closed: bool = True, capture_distance=None):
        pts = np.asarray(points, dtype=float)
        wl = np.broadcast_to(np.asarray(width_left, dtype=float), (len(pts),)).copy()
        wr = np.broadcast_to(np.asarray(width_right, dtype=float), (len(pts),)).copy()
        if closed and len(pts) > 3 and np.allclose(pts[0], pts[-1]):
            pts, wl, wr = pts[:-1], wl[:-1], wr[:-1]
        if np.any(wl <= 0) or np.any(wr <= 0):
            raise ConfigError("track widths must be positive")
        self.width_left = wl
        self.width_right = wr
        if capture_distance is None:
            capture_distance = 2.0 * float(np.max(wl + wr))
        super().__init__(pts, closed=closed, capture_distance=capture_distance)

    @property
    def centerline(self) -> np.ndarray:
        return self.points

    def widths_at(self, s: float) -> tuple[float, float]:
        return self._interp_vertex(self.width_left, s), self._interp_vertex(self.width_right, s)

    def boundaries(self) -> tuple[np.ndarray, np.ndarray]:
        """Left and right edge polylines (vertex-wise)."""
        left = self.points + self.normals * self.width_left[:, None]
        right = self.points - self.normals * self.width_right[:, None]
        return left, right


class RacingLine(ReferenceLine):
    """Driving line with a target speed profile (m/s) per vertex."""

    def __init__(self, points, speed, closed: bool = True, capture_distance: float | None = 50.0):
        pts = np.asarray(points, dtype=float)
        v = np.broadcast_to(np.asarray(speed, dtype=float), (len(pts),)).copy()
        if closed and len(pts) > 3 and np.allclose(pts[0], pts[-1]):
            pts, v = pts[:-1], v[:-1]
        self.speed = v
        super().__init__(pts, closed=closed, capture_distance=capture_distance)

    def speed_at(self, s: float) -> float:
        return self._interp_vertex(self.speed, s)


# ------------------------------------------------------------- operations
def frenet_to_cartesian(line: ReferenceLine, pose: FrenetPose) -> tuple[float, float, float]:
    return line.to_cartesian(pose.s, pose.d, pose.mu)


def cartesian_to_frenet(line: ReferenceLine, x: float, y: float, yaw: float = 0.0,
                        max_distance: float | None = None) -> FrenetPose:
    return line.to_frenet(x, y, yaw, max_distance)


def reproject_init(center: ReferenceLine, traj: ReferenceLine, pose_on_traj: FrenetPose) -> FrenetPose:
    """Map a pose given on ``traj`` to the same physical pose w.r.t. ``center``.

    Two steps: Frenet to Cartesian on the trajectory, then projection onto
    the fixed centerline. The relative yaw picks up the heading difference
    between the two lines at that location.
    """
    x, y, yaw = frenet_to_cartesian(traj, pose_on_traj)
    return cartesian_to_frenet(center, x, y, yaw)


def distance_to_boundary(center: TrackModel, x: float, y: float) -> float:
    """Signed distance to the nearest track edge, positive inside."""
    s, d = center.project(x, y)
    wl, wr = center.widths_at(s)
    return min(wl - d, wr + d)


# -------------------------------------------------------------------- io
def _read_rows(path: Path, columns: tuple[str, ...]) -> np.ndarray:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(columns):
                raise ConfigError(f"{path}: expected header {','.join(columns)}")
            rows = [[float(r[c]) for c in reader.fieldnames] for r in reader]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if len(rows) < 3:
        raise ConfigError(f"{path}: need at least 3 rows")
    return np.asarray(rows, dtype=float)


def load_track_csv(path) -> TrackModel:
    rows = _read_rows(path, ("x", "y", "w_left", "w_right"))
    return TrackModel(rows[:, :2], rows[:, 2], rows[:, 3], closed=True)


def load_racing_line_csv(path) -> RacingLine:
    rows = _read_rows(path, ("x", "y", "v"))
    return RacingLine(rows[:, :2], rows[:, 2], closed=True)


def save_track_csv(track: TrackModel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "w_left", "w_right"])
        for (x, y), wl, wr in zip(track.points, track.width_left, track.width_right):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(wl)), repr(float(wr))])


def save_racing_line_csv(line: RacingLine, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "v"])
        for (x, y), v in zip(line.points, line.speed):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
