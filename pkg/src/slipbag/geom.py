"""2D geometry kernel: hulls, areas, minimum-area rectangles and rasterization.

Coordinates are in centimetres. Polygons are stored counter-clockwise as an
``(n, 2)`` float array. Masks are numpy boolean arrays of shape ``(H, W)``:
rows run along the workspace's second axis, columns along its first axis.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class DegenerateInput(ValueError):
    """Fewer than three points, or all points collinear."""


class EmptyRaster(ValueError):
    """Polygon covers no pixel centre of the grid."""


class Point2(NamedTuple):
    x: float
    y: float


def as_points(points: Iterable[Sequence[float]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        arr = arr.reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite coordinates")
    return arr


def _shift(a: np.ndarray) -> np.ndarray:
    """``np.roll(a, -1, axis=0)`` without the generic overhead."""
    out = np.empty_like(a)
    out[:-1] = a[1:]
    out[-1] = a[0]
    return out


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, _shift(y)) - np.dot(_shift(x), y))


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon with counter-clockwise vertices."""

    vertices: np.ndarray

    def __post_init__(self):
        v = as_points(self.vertices)
        if len(v) < 3:
            raise DegenerateInput("polygon needs at least 3 vertices")
        if _signed_area(v) <= 0:
            raise ValueError("polygon vertices must be counter-clockwise")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def from_any_orientation(cls, points) -> "Polygon":
        v = as_points(points)
        if _signed_area(v) < 0:
            v = v[::-1]
        return cls(v)

    @property
    def points(self) -> list[Point2]:
        return [Point2(float(x), float(y)) for x, y in self.vertices]

    @property
    def area(self) -> float:
        return polygon_area(self)

    @property
    def centroid(self) -> Point2:
        return polygon_centroid(self)

    def is_simple(self) -> bool:
        """O(n^2) check that no two non-adjacent edges intersect."""
        v = self.vertices
        n = len(v)
        for i in range(n):
            a, b = v[i], v[(i + 1) % n]
            for j in range(i + 1, n):
                if j == i or (j + 1) % n == i or j == (i + 1) % n:
                    continue
                if _segments_intersect(a, b, v[j], v[(j + 1) % n]):
                    return False
        return True

    def transformed(self, matrix: np.ndarray, offset=(0.0, 0.0)) -> "Polygon":
        """Apply ``x -> matrix @ x + offset``; orientation is restored if flipped."""
        v = self.vertices @ np.asarray(matrix, dtype=float).T + np.asarray(offset, dtype=float)
        return Polygon.from_any_orientation(v)


@dataclass(frozen=True)
class OrientedRect:
    """Rectangle with half extents ``a >= b``; ``angle`` is the direction of the ``a`` axis."""

    center: Point2
    angle: float
    half_extents: tuple[float, float]

    def __post_init__(self):
        a, b = self.half_extents
        if not (a >= b > 0):
            raise ValueError(f"need a >= b > 0, got {self.half_extents}")
        object.__setattr__(self, "center", Point2(float(self.center[0]), float(self.center[1])))

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([c, s]), np.array([-s, c])

    @property
    def area(self) -> float:
        a, b = self.half_extents
        return 4.0 * a * b

    @property
    def corners(self) -> np.ndarray:
        e1, e2 = self.axes
        a, b = self.half_extents
        c = np.asarray(self.center)
        return np.array([c - a * e1 - b * e2, c + a * e1 - b * e2,
                         c + a * e1 + b * e2, c - a * e1 + b * e2])

    def to_polygon(self) -> Polygon:
        return Polygon(self.corners)


def workspace_rect(width: float = 90.0, depth: float = 60.0) -> OrientedRect:
    """Axis-aligned workspace with its lower-left corner at the origin."""
    a, b = max(width, depth) / 2, min(width, depth) / 2
    angle = 0.0 if width >= depth else math.pi / 2
    return OrientedRect(Point2(width / 2, depth / 2), angle, (a, b))


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4):
        return True

    def on_seg(a, b, c, d):
        return d == 0 and min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return on_seg(q1, q2, p1, d1) or on_seg(q1, q2, p2, d2) or on_seg(p1, p2, q1, d3) or on_seg(p1, p2, q2, d4)


def _column_extremes(pts: np.ndarray) -> np.ndarray:
    """Keep only the lowest and highest point of each x column (input sorted by x, then y)."""
    x = pts[:, 0]
    first = np.flatnonzero(np.r_[True, x[1:] != x[:-1]])
    last = np.r_[first[1:] - 1, len(x) - 1]
    keep = np.unique(np.concatenate([first, last]))
    return pts[keep]


def _akl_toussaint(pts: np.ndarray) -> np.ndarray:
    """Drop points strictly inside the octagon of extreme points (order preserved)."""
    x, y = pts[:, 0], pts[:, 1]
    idx = [np.argmin(x), np.argmin(x - y), np.argmin(y), np.argmax(x + y),
           np.argmax(x), np.argmax(x - y), np.argmax(y), np.argmin(x + y)]
    # ccw order: left, lower-left... walk the directions in angular order
    order = [idx[0], idx[7], idx[2], idx[5], idx[4], idx[3], idx[6], idx[1]]
    ring = []
    for i in order:
        if not ring or ring[-1] != i:
            ring.append(i)
    if len(ring) > 1 and ring[0] == ring[-1]:
        ring.pop()
    if len(ring) < 3:
        return pts
    poly = pts[ring]
    if _signed_area(poly) <= 0:
        return pts
    inside = np.ones(len(pts), dtype=bool)
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        inside &= (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) > 0
    return pts[~inside]


def convex_hull(points) -> Polygon:
    """Andrew's monotone chain; collinear boundary points are dropped."""
    pts = as_points(points)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) > 1:
        pts = pts[np.r_[True, (np.diff(pts, axis=0) != 0).any(axis=1)]]
    if len(pts) < 3:
        raise DegenerateInput("convex hull needs at least 3 distinct points")
    # points strictly between two others on a vertical line are never strict hull vertices
    pts = _column_extremes(pts)
    if len(pts) > 64:
        pts = _akl_toussaint(pts)
    seq = pts.tolist()

    def half(seq):
        out: list[list[float]] = []
        for p in seq:
            while len(out) >= 2:
                (ox, oy), (ax, ay) = out[-2], out[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(seq)
    upper = half(seq[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInput("all points are collinear")
    return Polygon(np.array(hull))


def polygon_area(p: Polygon) -> float:
    return _signed_area(p.vertices)


def polygon_centroid(p: Polygon) -> Point2:
    v = p.vertices
    x, y = v[:, 0], v[:, 1]
    x1, y1 = _shift(x), _shift(y)
    cr = x * y1 - x1 * y
    a = cr.sum() / 2
    return Point2(float(((x + x1) * cr).sum() / (6 * a)), float(((y + y1) * cr).sum() / (6 * a)))


def points_in_polygon(points, p: Polygon | np.ndarray) -> np.ndarray:
    """Even-odd test. Points exactly on an edge may fall either way."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    v = p.vertices if isinstance(p, Polygon) else np.asarray(p, dtype=float)
    if len(pts) * len(v) <= 200_000:
        xi, yi = v[:, 0], v[:, 1]
        xj, yj = np.roll(xi, 1), np.roll(yi, 1)
        ok = yi != yj
        xi, yi, xj, yj = xi[ok], yi[ok], xj[ok], yj[ok]
        y, x = pts[:, 1:2], pts[:, 0:1]
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (y - yi) / (yj - yi) + xi
        return ((crosses & (x < xint)).sum(axis=1) % 2).astype(bool)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    xj, yj = v[-1]
    for xi, yi in v:
        if yi != yj:
            crosses = (yi > y) != (yj > y)
            xint = (xj - xi) * (y - yi) / (yj - yi) + xi
            inside ^= crosses & (x < xint)
        xj, yj = xi, yi
    return inside


def contains_point(p: Polygon, q, tol: float = 1e-9) -> bool:
    """Boundary-inclusive point-in-polygon."""
    q = np.asarray(q, dtype=float)
    if points_in_polygon(q[None], p)[0]:
        return True
    return distance_to_boundary(p, q) <= tol


def distance_to_boundary(p: Polygon, q) -> float:
    q = np.asarray(q, dtype=float)
    a = p.vertices
    b = np.roll(a, -1, axis=0)
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", q - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return float(np.min(np.hypot(*(closest - q).T)))


def _norm_angle(theta: float, period: float) -> float:
    t = math.fmod(theta, period)
    if t < 0:
        t += period
    if period - t < 1e-12:
        t = 0.0
    return t


def min_area_rect(points) -> OrientedRect:
    """Minimum-area enclosing rectangle by rotating calipers over hull edges.

    Area ties are broken by the smaller aspect ratio, which keeps ``elongation``
    invariant under rotation, then by the smallest long-axis angle in ``[0, pi)``.
    """
    hull = convex_hull(points).vertices
    edges = _shift(hull) - hull
    U = edges / np.hypot(edges[:, 0], edges[:, 1])[:, None]
    Wn = np.stack([-U[:, 1], U[:, 0]], axis=1)
    pu, pw = hull @ U.T, hull @ Wn.T           # (n_vertices, n_edges)
    lo_u, hi_u, lo_w, hi_w = pu.min(0), pu.max(0), pw.min(0), pw.max(0)
    du, dw = hi_u - lo_u, hi_w - lo_w
    area = du * dw
    best_area = area.min()
    cands = np.flatnonzero(area <= best_area + 1e-12 * max(abs(best_area), 1e-300))
    best = None
    for i in cands:
        edge_angle = math.atan2(U[i, 1], U[i, 0])
        if du[i] >= dw[i]:
            a, b, ang = du[i] / 2, dw[i] / 2, edge_angle
        else:
            a, b, ang = dw[i] / 2, du[i] / 2, edge_angle + math.pi / 2
        ang = _norm_angle(ang, math.pi / 2 if abs(a - b) <= 1e-12 * max(a, 1.0) else math.pi)
        key = (a / b, ang)
        if best is None or key[0] < best[0][0] * (1 - 1e-9) or (
                key[0] <= best[0][0] * (1 + 1e-9) and ang < best[0][1]):
            center = U[i] * (lo_u[i] + hi_u[i]) / 2 + Wn[i] * (lo_w[i] + hi_w[i]) / 2
            best = (key, center, float(a), float(b))
    (_, ang), center, a, b = best
    return OrientedRect(Point2(*center), ang, (a, b))


def elongation(points) -> float:
    """Aspect ratio a/b of the minimum-area enclosing rectangle."""
    a, b = min_area_rect(points).half_extents
    return a / b


# -- rasterization ---------------------------------------------------------------------------


def pixel_size(grid: tuple[int, int], workspace: OrientedRect) -> tuple[float, float]:
    W, H = grid
    a, b = workspace.half_extents
    return 2 * a / W, 2 * b / H


def pixel_centers(grid: tuple[int, int], workspace: OrientedRect) -> np.ndarray:
    """World coordinates of every pixel centre, shape ``(H, W, 2)``. Read-only and cached."""
    return _pixel_centers(tuple(grid), workspace)


@functools.lru_cache(maxsize=16)
def _pixel_centers(grid: tuple[int, int], workspace: OrientedRect) -> np.ndarray:
    W, H = grid
    a, b = workspace.half_extents
    cols = -a + (np.arange(W) + 0.5) * (2 * a / W)
    rows = -b + (np.arange(H) + 0.5) * (2 * b / H)
    lu, lv = np.meshgrid(cols, rows)
    e1, e2 = workspace.axes
    c = np.asarray(workspace.center)
    out = c + lu[..., None] * e1 + lv[..., None] * e2
    out.setflags(write=False)
    return out


def world_to_pixel(points, grid: tuple[int, int], workspace: OrientedRect) -> np.ndarray:
    """Fractional (col, row) coordinates; pixel (c, r) spans [c, c+1) x [r, r+1)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    W, H = grid
    a, b = workspace.half_extents
    e1, e2 = workspace.axes
    d = pts - np.asarray(workspace.center)
    return np.stack([(d @ e1 + a) * W / (2 * a), (d @ e2 + b) * H / (2 * b)], axis=1)


def pixel_to_world(rc, grid: tuple[int, int], workspace: OrientedRect) -> np.ndarray:
    """Centre of pixel(s) given as (row, col) integer pairs."""
    rc = np.asarray(rc, dtype=float).reshape(-1, 2)
    W, H = grid
    a, b = workspace.half_extents
    e1, e2 = workspace.axes
    lu = -a + (rc[:, 1] + 0.5) * (2 * a / W)
    lv = -b + (rc[:, 0] + 0.5) * (2 * b / H)
    return np.asarray(workspace.center) + lu[:, None] * e1 + lv[:, None] * e2


def _scanline_fill(v: np.ndarray, W: int, H: int) -> np.ndarray:
    """Even-odd test of every pixel centre against polygon ``v`` given in pixel coordinates.

    Same crossing rule as ``points_in_polygon``, evaluated one row at a time.
    """
    xi, yi = v[:, 0], v[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    Y = (np.arange(H) + 0.5)[:, None]
    crosses = (yi > Y) != (yj > Y)
    r, e = np.nonzero(crosses)
    y = Y[r, 0]
    xint = (xj[e] - xi[e]) * (y - yi[e]) / (yj[e] - yi[e]) + xi[e]
    # crossing at xint flips every centre strictly left of it
    k = np.searchsorted(np.arange(W) + 0.5, xint, side="left")
    flips = np.zeros((H, W + 1), dtype=np.int64)
    np.add.at(flips, (r, k), 1)
    suffix = np.cumsum(flips[:, ::-1], axis=1)[:, ::-1]
    return (suffix[:, 1:] % 2).astype(bool)


def rasterize(p: Polygon, grid: tuple[int, int], workspace: OrientedRect,
              allow_empty: bool = False) -> np.ndarray:
    """Mark each pixel whose centre lies inside ``p``. Returns a bool ``(H, W)`` mask."""
    W, H = grid
    mask = np.zeros((H, W), dtype=bool)
    frac = world_to_pixel(p.vertices, grid, workspace)
    if len(frac):
        mask = _scanline_fill(frac, W, H)
    if not allow_empty and not mask.any():
        raise EmptyRaster("polygon covers no pixel centre")
    return mask


def rasterize_polyline(points, grid: tuple[int, int], workspace: OrientedRect,
                       closed: bool = False) -> np.ndarray:
    """Mark every pixel touched by a densely sampled polyline."""
    W, H = grid
    mask = np.zeros((H, W), dtype=bool)
    frac = world_to_pixel(points, grid, workspace)
    if len(frac) == 0:
        return mask
    if closed and len(frac) > 1:
        frac = np.vstack([frac, frac[:1]])
    if len(frac) > 1:
        seg = np.diff(frac, axis=0)
        n = np.maximum(np.ceil(np.abs(seg).max(axis=1) * 3).astype(int), 1)
        idx = np.repeat(np.arange(len(seg)), n)
        t = (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + 1) / np.repeat(n, n)
        pts = np.vstack([frac[:1], frac[idx] + t[:, None] * seg[idx]])
    else:
        pts = frac
    cols = np.floor(pts[:, 0]).astype(int)
    rows = np.floor(pts[:, 1]).astype(int)
    ok = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    mask[rows[ok], cols[ok]] = True
    return mask


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2 * math.pi)
    if t <= 0:
        t += 2 * math.pi
    return t - math.pi


def clip_halfplane(p: Polygon, point, normal) -> Polygon | None:
    """Keep the part of ``p`` where ``(x - point) . normal >= 0`` (Sutherland-Hodgman)."""
    v = p.vertices
    d = (v - np.asarray(point, dtype=float)) @ np.asarray(normal, dtype=float)
    out = []
    n = len(v)
    for i in range(n):
        j = (i + 1) % n
        if d[i] >= 0:
            out.append(v[i])
        if (d[i] >= 0) != (d[j] >= 0):
            t = d[i] / (d[i] - d[j])
            out.append(v[i] + t * (v[j] - v[i]))
    if len(out) < 3:
        return None
    out = np.array(out)
    if _signed_area(out) <= 1e-9:
        return None
    return Polygon(out)
