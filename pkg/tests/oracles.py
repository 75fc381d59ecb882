"""Independent brute-force oracles shared by the module and acceptance tests."""

from __future__ import annotations

import math

import numpy as np
from scipy.interpolate import CubicSpline

from racesim.trackgeom import TrackModel


def spline_track(n: int = 3000, width: float = 6.0, seed: int = 11) -> TrackModel:
    """Closed periodic cubic spline through a jittered circle of control points."""
    rng = np.random.default_rng(seed)
    k = 12
    a = 2 * math.pi * np.arange(k + 1) / k
    r = 200.0 * (1.0 + 0.12 * rng.uniform(-1, 1, k + 1))
    r[-1] = r[0]
    ctrl = np.column_stack([r * np.cos(a), r * np.sin(a)])
    ctrl[-1] = ctrl[0]
    cs = CubicSpline(a, ctrl, bc_type="periodic")
    t = 2 * math.pi * np.arange(n) / n
    return TrackModel(cs(t), width, width)


def brute_project(line, x: float, y: float, radius: float = 30.0, samples: int = 9) -> tuple[float, float]:
    """Foot of (x, y); see :func:`brute_project_many`."""
    s, d = brute_project_many(line, np.array([x]), np.array([y]), radius, samples)
    return float(s[0]), float(d[0])


def brute_project_many(line, xs: np.ndarray, ys: np.ndarray, radius: float = 30.0, samples: int = 9,
                       chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Feet of many points by scanning every nearby segment and bisecting the normal condition.

    On segment i the forward map is P(u) = a + u e with the frame normal the
    normalized blend of the two vertex normals. The foot solves
    (p - P(u)) x n(u) = 0; sign changes are bracketed on a uniform u grid and
    refined by bisection. Minimal |d| wins, ties to the smaller s.
    """
    nseg = len(line.seg_len)
    a = line.points[:nseg]
    e = line.seg_vec
    na = line.normals[:nseg]
    nb = np.roll(line.normals, -1, axis=0)[:nseg] if line.closed else line.normals[1:nseg + 1]
    mid = a + 0.5 * e
    reach = radius + line.seg_len.max()
    grid = np.linspace(0.0, 1.0, samples)
    out_s = np.full(len(xs), np.nan)
    out_d = np.full(len(xs), np.nan)
    for c0 in range(0, len(xs), chunk):
        P = np.column_stack([xs[c0:c0 + chunk], ys[c0:c0 + chunk]])
        dist = np.hypot(mid[None, :, 0] - P[:, None, 0], mid[None, :, 1] - P[:, None, 1])
        pid, seg = np.nonzero(dist <= reach)

        def f(k, u):
            i = seg[k]
            q = P[pid[k]] - (a[i] + u[:, None] * e[i])
            n = (1 - u[:, None]) * na[i] + u[:, None] * nb[i]
            return q[:, 0] * n[:, 1] - q[:, 1] * n[:, 0]

        fs = f(np.repeat(np.arange(len(seg)), samples), np.tile(grid, len(seg))).reshape(len(seg), samples)
        r, j = np.nonzero(fs[:, :-1] * fs[:, 1:] < 0)
        lo, hi, flo = grid[j], grid[j + 1], fs[r, j]
        for _ in range(60):
            m = 0.5 * (lo + hi)
            fm = f(r, m)
            same = (fm > 0) == (flo > 0)
            lo, flo, hi = np.where(same, m, lo), np.where(same, fm, flo), np.where(same, hi, m)
        zr, zj = np.nonzero(fs == 0.0)
        k = np.concatenate([r, zr])
        u = np.concatenate([0.5 * (lo + hi), grid[zj]])
        i, p = seg[k], pid[k]
        n = (1 - u[:, None]) * na[i] + u[:, None] * nb[i]
        n = n / np.hypot(n[:, 0], n[:, 1])[:, None]
        q = P[p] - (a[i] + u[:, None] * e[i])
        d = q[:, 0] * n[:, 0] + q[:, 1] * n[:, 1]
        s = line.cum_s[i] + u * line.seg_len[i]
        if line.closed:
            s = np.where(s >= line.total_length, s - line.total_length, s)
        best = np.full(len(P), np.inf)
        np.minimum.at(best, p, np.abs(d))
        tied = np.abs(d) <= best[p] + 1e-9
        s_best = np.full(len(P), np.inf)
        np.minimum.at(s_best, p[tied], s[tied])
        for row in range(len(P)):
            pick = np.flatnonzero(tied & (p == row) & (s == s_best[row]))
            if len(pick):
                out_s[c0 + row], out_d[c0 + row] = s[pick[0]], d[pick[0]]
    return out_s, out_d


def brute_nearest(ts: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Row index of the nearest timestamp by a full scan; ties to the earliest row."""
    out = np.empty(len(grid), dtype=int)
    for k, g in enumerate(grid):
        dist = [abs(g - t) for t in ts]
        out[k] = int(np.argmin(dist))
    return out


def _samples(q: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(0, 1, (n, 2))
    o, ex, ey = q[2], q[3] - q[2], q[1] - q[2]
    inner = o + u[:, :1] * ex + u[:, 1:] * ey
    t = np.linspace(0, 1, 2500)[:, None]
    edges = [q[k] + t * (q[(k + 1) % 4] - q[k]) for k in range(4)]
    return np.vstack([inner, *edges, q])


def sampled_overlap(a: np.ndarray, b: np.ndarray, n: int = 10_000, seed: int = 0) -> bool:
    """Point-sampling overlap oracle for two convex quads.

    Draws ``n`` interior points plus a dense boundary walk of each quad and
    reports whether any point of one lies strictly inside the other.
    """
    rng = np.random.default_rng(seed)
    return bool(np.any(_inside_depth(_samples(a, n, rng), b) > 0)
                or np.any(_inside_depth(_samples(b, n, rng), a) > 0))


def _inside_depth(pts: np.ndarray, quad: np.ndarray) -> np.ndarray:
    """Signed distance to the boundary of a convex CCW quad (positive inside)."""
    ds = []
    for k in range(4):
        p0, p1 = quad[k], quad[(k + 1) % 4]
        e = p1 - p0
        n = np.array([-e[1], e[0]]) / np.hypot(*e)  # inward for CCW
        ds.append((pts - p0) @ n)
    return np.min(ds, axis=0)
