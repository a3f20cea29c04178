"""Small planar helpers for 4-corner text boxes."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

Point = tuple[float, float]


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, poly: Sequence[Point]) -> np.ndarray:
    """Even-odd ray casting, vectorised over points."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
    return inside


def _point_segment_distance(p: Point, a: Point, b: Point) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    den = dx * dx + dy * dy
    t = 0.0 if den == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / den))
    return math.hypot(p[0] - ax - t * dx, p[1] - ay - t * dy)


def _orient(a: Point, b: Point, c: Point) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool:
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def polygon_distance(P: Sequence[Point], Q: Sequence[Point]) -> float:
    """Shortest distance between two simple polygons; 0 when they touch or overlap."""
    px = np.array([p[0] for p in P])
    py = np.array([p[1] for p in P])
    qx = np.array([q[0] for q in Q])
    qy = np.array([q[1] for q in Q])
    if points_in_polygon(px, py, Q).any() or points_in_polygon(qx, qy, P).any():
        return 0.0
    edges_p = [(P[i], P[(i + 1) % len(P)]) for i in range(len(P))]
    edges_q = [(Q[i], Q[(i + 1) % len(Q)]) for i in range(len(Q))]
    for a, b in edges_p:
        for c, d in edges_q:
            if _segments_cross(a, b, c, d):
                return 0.0
    best = math.inf
    for p in P:
        for a, b in edges_q:
            best = min(best, _point_segment_distance(p, a, b))
    for q in Q:
        for a, b in edges_p:
            best = min(best, _point_segment_distance(q, a, b))
    return best


def rotated_box(start: Point, angle_deg: float, width: float, height: float) -> tuple[Point, Point, Point, Point]:
    """Corners of a text box whose baseline starts at ``start`` (left-middle).

    ``angle_deg`` follows the sheet convention: clockwise from screen-up, so
    90 runs left to right.
    """
    t = math.radians(angle_deg)
    ux, uy = math.sin(t), -math.cos(t)
    nx, ny = -uy, ux
    x0 = start[0] - nx * height / 2.0
    y0 = start[1] - ny * height / 2.0
    p1 = (x0, y0)
    p2 = (x0 + ux * width, y0 + uy * width)
    p3 = (p2[0] + nx * height, p2[1] + ny * height)
    p4 = (x0 + nx * height, y0 + ny * height)
    return p1, p2, p3, p4
