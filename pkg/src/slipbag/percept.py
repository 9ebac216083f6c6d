"""Synthetic overhead sensing and the perception quantities the policies use.

The segmenter is replaced by a generative noise model: the rim is rendered
as a contiguous arc covering ``rim_recall`` of its true length, spurious rim
pixels form one compact blob, and depth is the true surface height plus bias
and noise. ``Observation.depth`` holds surface *height* above the table in mm,
so "deeper" means a smaller value; ``depth_bias > 0`` reads deeper than truth.
"""
from __future__ import annotations

import enum
import functools
import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .bagsim import BagState, Upside
from .geom import (
    DegenerateInput, OrientedRect, Point2, convex_hull, elongation, pixel_centers,
    pixel_size, pixel_to_world, points_in_polygon, polygon_area, polygon_centroid,
    rasterize, rasterize_polyline, min_area_rect, workspace_rect, world_to_pixel, wrap_angle,
)


class NoBagVisible(ValueError):
    pass


class ModeUnavailable(ValueError):
    pass


class PixelClass(enum.IntEnum):
    Background = 0
    Bag = 1
    Rim = 2
    Handle = 3


@dataclass(frozen=True)
class PerceptionNoise:
    rim_recall: float = 0.8
    rim_spurious: float = 0.0
    handle_visible_prob: float = 0.8
    depth_bias: float = -2.0
    depth_sd: float = 1.0
    hole_depth_overshoot: float = 0.0
    hole_fraction: float = 0.2

    def __post_init__(self):
        for name in ("rim_recall", "rim_spurious", "handle_visible_prob", "hole_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.depth_sd < 0:
            raise ValueError("depth_sd must be non-negative")


NOISELESS = PerceptionNoise(rim_recall=1.0, rim_spurious=0.0, handle_visible_prob=1.0,
                            depth_bias=0.0, depth_sd=0.0, hole_depth_overshoot=0.0)


@dataclass(frozen=True)
class RenderParams:
    grid: tuple[int, int] = (128, 128)
    workspace: OrientedRect = workspace_rect()
    forward_angle: float = math.pi / 2
    wrinkle_amp: float = 10.0       # mm at loosened = 0
    upright_height: float = 60.0    # mm, walls of a standing bag
    opening_floor: float = 15.0     # mm, layers folded into an open bag
    handle_radius: float = 2.5      # cm


DEFAULT_RENDER = RenderParams()


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Observation:
    """One synthetic camera frame: class labels ``(H, W)`` and a height field in mm.

    ``depth`` may be given as a zero-argument callable; it is then evaluated on
    first access, so policies that never look at depth do not pay for it.
    """

    def __init__(self, labels: np.ndarray, depth: np.ndarray | Callable[[], np.ndarray],
                 grid: tuple[int, int], workspace: OrientedRect, timestamp: float = 0.0,
                 forward_angle: float = math.pi / 2):
        self.labels = _frozen(np.asarray(labels))
        self._depth = depth
        self.grid = tuple(grid)
        self.workspace = workspace
        self.timestamp = timestamp
        self.forward_angle = forward_angle

    @functools.cached_property
    def depth(self) -> np.ndarray:
        d = self._depth() if callable(self._depth) else self._depth
        self._depth = None
        return _frozen(np.array(d, dtype=float))

    @functools.cached_property
    def bag_mask(self) -> np.ndarray:
        return _frozen(self.labels != PixelClass.Background)

    @functools.cached_property
    def rim_mask(self) -> np.ndarray:
        return _frozen(self.labels == PixelClass.Rim)

    @functools.cached_property
    def handle_mask(self) -> np.ndarray:
        return _frozen(self.labels == PixelClass.Handle)

    @property
    def pixel_area(self) -> float:
        px, py = pixel_size(self.grid, self.workspace)
        return px * py

    def to_world(self, rc) -> np.ndarray:
        return pixel_to_world(rc, self.grid, self.workspace)

    def to_pixel(self, p) -> tuple[int, int]:
        """(row, col) of the pixel containing world point ``p``, clamped to the grid."""
        c, r = world_to_pixel(p, self.grid, self.workspace)[0]
        W, H = self.grid
        return min(max(int(math.floor(r)), 0), H - 1), min(max(int(math.floor(c)), 0), W - 1)

    def hull_pixels(self, mask: np.ndarray) -> np.ndarray:
        """(row, col) of the leftmost and rightmost pixel of every row; enough for any hull."""
        rows = np.flatnonzero(mask.any(axis=1))
        if len(rows) == 0:
            return np.zeros((0, 2), dtype=int)
        sub = mask[rows]
        left = sub.argmax(axis=1)
        right = sub.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
        rc = np.stack([np.repeat(rows, 2), np.stack([left, right], 1).ravel()], 1)
        keep = np.ones(len(rc), dtype=bool)
        keep[1::2] = right != left
        return rc[keep]

    def hull_points(self, mask: np.ndarray, corners: bool = False) -> np.ndarray:
        """World points whose convex hull equals that of the mask's pixel centres (or corners)."""
        sub = np.zeros_like(mask)
        rc = self.hull_pixels(mask)
        sub[rc[:, 0], rc[:, 1]] = True
        return self.pixel_corners(sub) if corners else self.to_world(rc)

    def pixel_corners(self, mask: np.ndarray) -> np.ndarray:
        """World coordinates of the four corners of every pixel in ``mask``."""
        rc = np.argwhere(mask).astype(float)
        if len(rc) == 0:
            return np.zeros((0, 2))
        offs = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])
        corners = (rc[:, None, :] + offs[None]).reshape(-1, 2)
        # pixel_to_world maps integer (row, col) to the centre, so corners are +-0.5 away
        return pixel_to_world(corners, self.grid, self.workspace)


@dataclass(frozen=True)
class OpeningMetrics:
    S: float
    A_CH: float
    E_CH: float
    opening_angle: float


# -- rendering ----------------------------------------------------------------------------------


def _arc_subset(points: np.ndarray, fraction: float, closed: bool, rng) -> np.ndarray:
    """Contiguous piece of a polyline covering ``fraction`` of its length."""
    if fraction >= 1.0 or len(points) < 2:
        return points if fraction > 0 else points[:0]
    if fraction <= 0.0:
        return points[:0]
    pts = np.vstack([points, points[:1]]) if closed else points
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    keep = fraction * total
    start = float(rng.uniform(0, total)) if closed else float(rng.uniform(0, total - keep))
    if closed:
        pts = np.vstack([pts, pts[1:]])
        cum = np.concatenate([cum, total + cum[1:]])
    stops = np.linspace(start, start + keep, max(int(math.ceil(keep / 0.2)), 2))
    x = np.interp(stops, cum, pts[:, 0])
    y = np.interp(stops, cum, pts[:, 1])
    return np.stack([x, y], axis=1)


def true_rim(s: BagState) -> tuple[np.ndarray, bool]:
    """Rim polyline visible from above, and whether it is closed."""
    if s.upside == Upside.Up:
        return s.opening_poly.vertices, True
    if s.upside == Upside.Down:
        return np.zeros((0, 2)), False
    return np.asarray(s.rim_arc), False


def rim_raster(points: np.ndarray, closed: bool, bag: np.ndarray, grid, workspace) -> np.ndarray:
    if len(points) == 0:
        return np.zeros_like(bag)
    line = rasterize_polyline(points, grid, workspace, closed=closed)
    # 3x3 dilation done on the few line pixels directly
    r, c = np.nonzero(line)
    d = np.array([-1, 0, 1])
    R = (r[:, None, None] + d[None, :, None]).repeat(3, axis=2).ravel()
    C = (c[:, None, None] + d[None, None, :]).repeat(3, axis=1).ravel()
    H, W = bag.shape
    ok = (R >= 0) & (R < H) & (C >= 0) & (C < W)
    out = np.zeros_like(bag)
    out[R[ok], C[ok]] = True
    return out & bag


def _spurious_blob(bag: np.ndarray, rim: np.ndarray, k: int, rng) -> np.ndarray:
    out = np.zeros_like(bag)
    cand = np.argwhere(bag & ~rim)
    if k <= 0 or len(cand) == 0:
        return out
    seed = cand[rng.integers(len(cand))]
    d = np.hypot(*(cand - seed).T)
    pick = cand[np.argsort(d, kind="stable")[:k]]
    out[pick[:, 0], pick[:, 1]] = True
    return out


def _true_height(s: BagState, centers: np.ndarray, bag: np.ndarray, rp: RenderParams) -> np.ndarray:
    h = np.zeros(bag.shape)
    pts = centers[bag]
    if len(pts) == 0:
        return h
    hu, hv = s.half_extents_local
    uv = s.local(pts) / np.array([2 * max(hu, 1e-6), 2 * max(hv, 1e-6)])
    wr = s.wrinkles
    d2 = (uv[:, :1] - wr[:, 0]) ** 2 + (uv[:, 1:] - wr[:, 1]) ** 2
    w = np.exp(-d2 / (2 * wr[:, 2] ** 2)) @ wr[:, 3]
    if s.upside == Upside.Up:
        z = rp.upright_height + rp.wrinkle_amp * w
        inside = rasterize(s.opening_poly, rp.grid, rp.workspace, allow_empty=True)[bag]
        z[inside] = rp.opening_floor + rp.wrinkle_amp * w[inside]
    else:
        z = s.z_bot_cfg + s.gap_cfg + rp.wrinkle_amp * (1.0 - s.loosened) * w
    h[bag] = z
    return h


def render_observation(s: BagState, noise: PerceptionNoise, rng: np.random.Generator,
                       params: RenderParams = DEFAULT_RENDER, timestamp: float = 0.0) -> Observation:
    grid, ws = params.grid, params.workspace
    W, H = grid
    bag = rasterize(s.footprint, grid, ws, allow_empty=True)
    labels = bag.astype(np.uint8)

    handle = np.zeros_like(bag)
    if s.material.has_handles:
        centers_all = pixel_centers(grid, ws)
        pad = params.handle_radius
        for center, latent in zip(s.handle_centers(), s.handle_visible):
            if not latent or rng.random() >= noise.handle_visible_prob:
                continue
            box = world_to_pixel(np.asarray(center) + pad * np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]]), grid, ws)
            c0, r0 = np.clip(np.floor(box.min(axis=0)).astype(int), 0, None)
            c1, r1 = np.ceil(box.max(axis=0)).astype(int) + 1
            win = centers_all[r0:r1, c0:c1]
            d = np.hypot(win[..., 0] - center[0], win[..., 1] - center[1])
            handle[r0:r1, c0:c1] |= d <= params.handle_radius
        handle &= bag
    labels[handle] = PixelClass.Handle

    pts, closed = true_rim(s)
    arc = _arc_subset(pts, noise.rim_recall, closed, rng) if len(pts) else pts
    rim = rim_raster(arc, closed and noise.rim_recall >= 1.0, bag, grid, ws)
    if noise.rim_spurious > 0:
        k = int(round(noise.rim_spurious * np.count_nonzero(bag)))
        rim |= _spurious_blob(bag, rim, k, rng)
    labels[rim] = PixelClass.Rim

    depth_rng = np.random.default_rng(rng.integers(2 ** 63))

    def depth() -> np.ndarray:
        h = _true_height(s, pixel_centers(grid, ws), bag, params)
        # the table itself is measured well; only bag pixels are corrupted
        n_bag = int(np.count_nonzero(bag))
        offset = np.full(n_bag, -noise.depth_bias)
        if noise.depth_sd > 0:
            offset += depth_rng.normal(0.0, noise.depth_sd, n_bag)
        if s.material.has_holes and noise.hole_depth_overshoot > 0:
            holes = depth_rng.random(n_bag) < noise.hole_fraction
            offset -= np.where(holes, noise.hole_depth_overshoot, 0.0)
        h[bag] += offset
        return h

    return Observation(labels, depth, grid, ws, timestamp, params.forward_angle)


# -- metrics ------------------------------------------------------------------------------------


def _centroid(o: Observation, mask: np.ndarray) -> np.ndarray:
    return o.to_world(np.argwhere(mask).mean(axis=0, keepdims=True))[0]


def opening_metrics(o: Observation, A_max: float) -> OpeningMetrics:
    bag = o.bag_mask
    n_bag = int(np.count_nonzero(bag))
    if n_bag == 0:
        raise NoBagVisible("no bag pixels")
    S = n_bag * o.pixel_area / A_max
    rim = o.rim_mask
    if np.count_nonzero(rim) < 3:
        return OpeningMetrics(S, 0.0, math.inf, math.nan)
    corners = o.hull_points(rim, corners=True)
    try:
        hull = convex_hull(corners)
        A = polygon_area(hull) / A_max
        E = elongation(hull.vertices)
    except DegenerateInput:
        A, E = 0.0, math.inf
    d = _centroid(o, rim) - _centroid(o, bag)
    angle = wrap_angle(math.atan2(d[1], d[0]) - o.forward_angle) if np.hypot(*d) > 1e-9 else math.nan
    return OpeningMetrics(S, A, E, angle)


# -- grasp point selection ----------------------------------------------------------------------


class GraspMode(str, enum.Enum):
    UniformOnBag = "UniformOnBag"
    UniformBoundary = "UniformBoundary"
    HandleCenter = "HandleCenter"
    BottomCenter = "BottomCenter"
    BagCenter = "BagCenter"
    LeftRightEndpoints = "LeftRightEndpoints"
    OpeningCenter = "OpeningCenter"
    RimCenterForSlip = "RimCenterForSlip"
    PinPullPoints = "PinPullPoints"


def _nearest_on_mask(o: Observation, mask: np.ndarray, p) -> Point2:
    rc = np.argwhere(mask)
    if len(rc) == 0:
        raise ModeUnavailable("empty mask")
    world = o.to_world(rc)
    i = int(np.argmin(np.hypot(*(world - np.asarray(p)).T)))
    return Point2(*world[i])


def _on_mask(o: Observation, mask: np.ndarray, p) -> bool:
    r, c = o.to_pixel(p)
    return bool(mask[r, c])


def _boundary(bag: np.ndarray) -> np.ndarray:
    return bag & ~ndimage.binary_erosion(bag, structure=ndimage.generate_binary_structure(2, 1))


def _left_right(o: Observation) -> tuple[Point2, Point2]:
    bag = o.bag_mask
    r = int(round(np.argwhere(bag)[:, 0].mean()))
    cols = np.flatnonzero(bag[r])
    if len(cols) == 0:
        rows = np.flatnonzero(bag.any(axis=1))
        r = int(rows[np.argmin(np.abs(rows - r))])
        cols = np.flatnonzero(bag[r])
    left, right = o.to_world([(r, cols.min()), (r, cols.max())])
    return Point2(*left), Point2(*right)


def _handle_centers(o: Observation) -> list[Point2]:
    lab, n = ndimage.label(o.handle_mask)
    if n == 0:
        return []
    sizes = ndimage.sum(np.ones_like(lab), lab, index=range(1, n + 1))
    order = np.argsort(-np.asarray(sizes), kind="stable")
    out = []
    for i in order:
        comp = lab == (i + 1)
        c = _centroid(o, comp)
        out.append(c if _on_mask(o, o.bag_mask, c) else _nearest_on_mask(o, comp, c))
    return [Point2(*p) for p in out]


def bottom_center(o: Observation) -> Point2:
    """Centre of the bag bottom: the midpoint of the two rectangle corners farthest from the rim,
    pulled toward the bag centre until it lands on the bag."""
    bag, rim = o.bag_mask, o.rim_mask
    if not rim.any():
        raise ModeUnavailable("BottomCenter needs rim pixels")
    rect = min_area_rect(o.hull_points(bag))
    corners = rect.corners
    rim_pts = o.to_world(np.argwhere(rim))
    dist = np.array([np.hypot(*(rim_pts - c).T).min() for c in corners])
    far = corners[np.argsort(-dist, kind="stable")[:2]]
    mid = far.mean(axis=0)
    center = _centroid(o, bag)
    qs = mid + np.linspace(0.0, 1.0, 101)[:, None] * (center - mid)
    cr = world_to_pixel(qs, o.grid, o.workspace)
    W, H = o.grid
    cols = np.clip(np.floor(cr[:, 0]).astype(int), 0, W - 1)
    rows = np.clip(np.floor(cr[:, 1]).astype(int), 0, H - 1)
    hit = np.flatnonzero(bag[rows, cols])
    if len(hit):
        return Point2(*o.to_world([(rows[hit[0]], cols[hit[0]])])[0])
    return _nearest_on_mask(o, bag, center)


def select_grasp_point(o: Observation, mode: GraspMode | str, rng: np.random.Generator,
                       slip_inset: float = 1.5):
    """Grasp location(s) for a primitive. Pair-valued modes return a tuple of two points."""
    mode = GraspMode(mode)
    bag = o.bag_mask
    if not bag.any():
        raise NoBagVisible("no bag pixels")

    if mode == GraspMode.UniformOnBag:
        rc = np.argwhere(bag)
        return Point2(*o.to_world(rc[rng.integers(len(rc))][None])[0])

    if mode == GraspMode.UniformBoundary:
        rc = np.argwhere(_boundary(bag))
        return Point2(*o.to_world(rc[rng.integers(len(rc))][None])[0])

    if mode == GraspMode.HandleCenter:
        handles = _handle_centers(o)
        if handles:
            return handles[int(rng.integers(len(handles)))]
        return select_grasp_point(o, GraspMode.UniformBoundary, rng)

    if mode == GraspMode.BottomCenter:
        return bottom_center(o)

    if mode == GraspMode.BagCenter:
        c = _centroid(o, bag)
        return Point2(*o.to_world([o.to_pixel(c)])[0]) if _on_mask(o, bag, c) else _nearest_on_mask(o, bag, c)

    if mode == GraspMode.LeftRightEndpoints:
        return _left_right(o)

    if mode == GraspMode.OpeningCenter:
        rim = o.rim_mask
        if np.count_nonzero(rim) < 3:
            raise ModeUnavailable("OpeningCenter needs rim pixels")
        try:
            c = polygon_centroid(convex_hull(o.hull_points(rim)))
        except DegenerateInput:
            c = _centroid(o, rim)
        return Point2(*o.to_world([o.to_pixel(c)])[0]) if _on_mask(o, bag, c) else _nearest_on_mask(o, bag, c)

    if mode == GraspMode.RimCenterForSlip:
        rim = o.rim_mask
        if not rim.any():
            raise ModeUnavailable("rim not visible")
        rim_c = _centroid(o, rim)
        near = np.asarray(_nearest_on_mask(o, rim, rim_c))
        towards = _centroid(o, bag) - near
        n = float(np.hypot(*towards))
        q = near + (towards / n * slip_inset if n > 1e-9 else 0.0)
        return Point2(*o.to_world([o.to_pixel(q)])[0]) if _on_mask(o, bag, q) else Point2(*near)

    if mode == GraspMode.PinPullPoints:
        handles = _handle_centers(o)
        if len(handles) >= 2:
            return handles[0], handles[1]
        return _left_right(o)

    raise ModeUnavailable(str(mode))


# -- depth heuristics ---------------------------------------------------------------------------


class DepthHeuristic(str, enum.Enum):
    MinDepth = "MinDepth"
    MaxSobelGradient = "MaxSobelGradient"


def sobel_magnitude(depth: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(depth, axis=1, mode="nearest")
    gy = ndimage.sobel(depth, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def depth_heuristics(o: Observation, kind: DepthHeuristic | str, erode_px: int = 2) -> Point2:
    kind = DepthHeuristic(kind)
    bag = o.bag_mask
    if not bag.any():
        raise NoBagVisible("no bag pixels")
    if kind == DepthHeuristic.MinDepth:
        score = np.where(bag, o.depth, np.inf)
        idx = int(np.argmin(score))
    else:
        region = ndimage.binary_erosion(bag, structure=np.ones((3, 3), bool), iterations=erode_px)
        if not region.any():
            region = bag
        score = np.where(region, sobel_magnitude(o.depth), -np.inf)
        idx = int(np.argmax(score))
    r, c = divmod(idx, o.grid[0])
    return Point2(*o.to_world([(r, c)])[0])


def perceived_grasp_height(o: Observation, p, h_min: float) -> float:
    r, c = o.to_pixel(p)
    return max(float(o.depth[r, c]), h_min)


# -- export -------------------------------------------------------------------------------------


def write_pgm(o: Observation, directory: str, stem: str = "obs") -> list[str]:
    """One 8-bit PGM per class mask plus a 16-bit depth PGM in 0.1 mm units."""
    os.makedirs(directory, exist_ok=True)
    W, H = o.grid
    paths = []
    for cls in PixelClass:
        path = os.path.join(directory, f"{stem}_{cls.name.lower()}.pgm")
        data = np.where(o.labels == cls, 255, 0).astype(np.uint8)
        with open(path, "wb") as f:
            f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
            f.write(data.tobytes())
        paths.append(path)
    path = os.path.join(directory, f"{stem}_depth.pgm")
    d = np.clip(np.round(o.depth * 10.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        f.write(d.tobytes())
    paths.append(path)
    return paths


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    W, H, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    raw = data[pos + 1:]  # exactly one whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(raw, dtype=dtype, count=W * H).reshape(H, W)
