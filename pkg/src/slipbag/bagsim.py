"""Latent bag state and stochastic effect models for the action primitives.

A bag is a layered 2D object: a footprint polygon on the table, a rim band
along one edge (the opening side), optional handles, an opening region and a
per-configuration pair of layer heights that decides how many layers a
gripper closing at height ``h`` picks up.

All transitions are pure: they take a state and a ``numpy.random.Generator``
and return a new state.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .geom import (
    OrientedRect, Point2, Polygon, clip_halfplane, contains_point, distance_to_boundary,
    points_in_polygon, polygon_area, rotation, workspace_rect, wrap_angle,
)


class GraspOffBag(ValueError):
    pass


class OutOfWorkspace(ValueError):
    pass


class NoGraspHeld(RuntimeError):
    pass


class MaterialKind(str, enum.Enum):
    ThinPlastic = "ThinPlastic"
    ThickPlastic = "ThickPlastic"
    Drawstring = "Drawstring"
    HandBag = "HandBag"
    FoldedCloth = "FoldedCloth"
    Dress = "Dress"
    Hat = "Hat"


BAG_KINDS = (MaterialKind.ThinPlastic, MaterialKind.ThickPlastic,
             MaterialKind.Drawstring, MaterialKind.HandBag)
PLASTIC_KINDS = (MaterialKind.ThinPlastic, MaterialKind.ThickPlastic)
FABRIC_KINDS = (MaterialKind.Drawstring, MaterialKind.HandBag)


class Upside(str, enum.Enum):
    Up = "Up"        # standing, opening faces the camera
    Down = "Down"    # standing, opening against the table
    Side = "Side"    # lying flat, opening faces sideways


class Layers(enum.IntEnum):
    Zero = 0
    One = 1
    Two = 2


@dataclass(frozen=True)
class Material:
    """Physical preset of one bag (or garment) category.

    Layer heights are in millimetres. ``z_bot_*`` and ``layer_gap_*`` describe
    the spread over bag configurations; ``attempt_sd`` and ``gap_attempt_sd``
    are the extra per-grasp jitter from small state changes between grasps.
    """

    kind: MaterialKind
    has_holes: bool = False
    has_handles: bool = True
    inflatable: bool = False
    stiffness: float = 0.5
    slip_1layer_prob: float = 0.1
    layer_gap_mean: float = 3.0
    layer_gap_sd: float = 1.2
    z_bot_mean: float = 2.5
    z_bot_sd: float = 1.3
    attempt_sd: float = 0.5
    gap_attempt_sd: float = 0.3
    length: float = 45.0          # cm, flat extent along the opening axis
    width: float = 35.0           # cm, flat extent along the rim
    slip_out_prob: float = 0.03   # losing a one-layer grasp while rotating/inserting
    full_opening_frac: float = 0.6

    def __post_init__(self):
        for name in ("stiffness", "slip_1layer_prob", "slip_out_prob", "full_opening_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("layer_gap_mean", "layer_gap_sd", "z_bot_mean", "z_bot_sd", "length", "width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.attempt_sd < 0 or self.gap_attempt_sd < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def A_max(self) -> float:
        return self.length * self.width

    @property
    def is_fabric(self) -> bool:
        return self.kind in FABRIC_KINDS

    @property
    def is_plastic(self) -> bool:
        return self.kind in PLASTIC_KINDS


MATERIALS: dict[MaterialKind, Material] = {
    MaterialKind.ThinPlastic: Material(
        MaterialKind.ThinPlastic, inflatable=True, stiffness=0.2, slip_1layer_prob=0.1,
        layer_gap_mean=3.0, layer_gap_sd=1.0, length=45.0, width=35.0, slip_out_prob=0.02),
    MaterialKind.ThickPlastic: Material(
        MaterialKind.ThickPlastic, inflatable=True, stiffness=0.6, slip_1layer_prob=0.15,
        layer_gap_mean=4.0, layer_gap_sd=1.3, length=45.0, width=40.0, slip_out_prob=0.05),
    MaterialKind.Drawstring: Material(
        MaterialKind.Drawstring, has_holes=True, has_handles=False, stiffness=0.4,
        slip_1layer_prob=0.1, layer_gap_mean=5.0, layer_gap_sd=1.6, length=45.0, width=35.0,
        slip_out_prob=0.03),
    MaterialKind.HandBag: Material(
        MaterialKind.HandBag, stiffness=0.7, slip_1layer_prob=0.15, layer_gap_mean=6.0,
        layer_gap_sd=2.0, length=45.0, width=50.0, slip_out_prob=0.05),
    MaterialKind.FoldedCloth: Material(
        MaterialKind.FoldedCloth, has_handles=False, stiffness=0.3, slip_1layer_prob=0.1,
        layer_gap_mean=2.0, layer_gap_sd=0.6, length=30.0, width=30.0),
    MaterialKind.Dress: Material(
        MaterialKind.Dress, has_handles=False, stiffness=0.3, slip_1layer_prob=0.1,
        layer_gap_mean=2.5, layer_gap_sd=0.8, length=50.0, width=40.0),
    MaterialKind.Hat: Material(
        MaterialKind.Hat, has_handles=False, stiffness=0.5, slip_1layer_prob=0.1,
        layer_gap_mean=3.0, layer_gap_sd=1.0, length=30.0, width=25.0),
}


@dataclass(frozen=True)
class EffectParams:
    """Calibration constants of the primitive effect models (ranges are Uniform bounds)."""

    workspace_width: float = 90.0
    workspace_depth: float = 60.0
    init_loosened: tuple[float, float] = (0.05, 0.4)
    init_opening_frac: tuple[float, float] = (0.0, 0.05)
    init_opening_aspect: tuple[float, float] = (2.0, 6.0)
    init_center_sd: float = 3.0
    init_upside_probs: tuple[float, float, float] = (0.1, 0.1, 0.8)  # Up, Down, Side
    handle_hidden_prob: float = 0.3
    crumple_noise: float = 0.15
    crumple_aspect_sd: float = 0.25
    shake_loosen: tuple[float, float] = (0.10, 0.25)
    shake_angle_deg: float = 40.0
    shake_translate_sd: float = 2.0
    compress_open: tuple[float, float] = (0.05, 0.15)
    compress_up_prob: float = 0.5
    compress_aspect_factor: tuple[float, float] = (0.7, 0.95)
    flip_prob: float = 0.8
    flip_side_prob: float = 0.3
    rotate_noise_deg: float = 3.0
    dilate_flat_extent: tuple[float, float] = (0.05, 0.12)
    dilate_flat_loosen: float = 0.05
    dilate_open_gain: tuple[float, float] = (0.08, 0.2)
    dilate_open_loss: tuple[float, float] = (0.05, 0.15)
    dilate_open_tol: float = 3.0
    dilate_open_spread: tuple[float, float] = (0.0, 0.05)   # footprint area gain per good dilation
    dilate_spread_cap: float = 0.85                          # of A_max
    dilate_aspect_factor: tuple[float, float] = (0.6, 0.85)
    dilate_offcenter_prob: float = 0.15
    dilate_offcenter_shift: tuple[float, float] = (3.0, 8.0)
    dilate_hide_handle_prob: float = 0.05
    fling_fabric: tuple[float, float] = (0.2, 0.4)
    fling_other: tuple[float, float] = (0.05, 0.1)
    fling_angle_sd_deg: float = 10.0
    cyclic_vertex_jitter: float = 0.35
    cyclic_area_jitter: float = 0.005
    cyclic_loosen: float = 0.02
    trajectory_seconds: float = 5.0
    primitive_seconds: float = 10.0
    gripper_tilt_deg: float = 50.0
    grasp_tol: float = 1.5
    insert_axis_deg: float = 0.0
    p_side_base: float = 0.95
    misalign_penalty: float = 0.3
    plastic_handle_penalty: float = 0.07
    insert_align_tol_deg: float = 25.0
    object_radius: float = 4.5
    place_sd: float = 1.5
    lift_r_good: float = 8.0
    lift_retain_prob: float = 0.3
    min_layer_gap: float = 0.2

    @property
    def workspace(self) -> OrientedRect:
        return workspace_rect(self.workspace_width, self.workspace_depth)


DEFAULT_EFFECTS = EffectParams()


@dataclass(frozen=True, eq=False)
class BagState:
    """Ground-truth bag. ``opening_dir`` is the world angle from the bag centre to its rim."""

    material: Material
    footprint: Polygon
    loosened: float
    opening_dir: float
    upside: Upside
    opening_area: float            # cm^2
    opening_aspect: float          # >= 1
    handle_visible: tuple[bool, ...]
    z_bot_cfg: float               # mm
    gap_cfg: float                 # mm
    wrinkles: np.ndarray = field(repr=False)   # (k, 4): u, v, sigma, amplitude in bag-normalized units
    objects_inside: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loosened <= 1.0:
            raise ValueError("loosened must be in [0, 1]")
        if self.objects_inside < 0:
            raise ValueError("objects_inside must be non-negative")

    @property
    def A_max(self) -> float:
        return self.material.A_max

    @functools.cached_property
    def area(self) -> float:
        return polygon_area(self.footprint)

    @functools.cached_property
    def center(self) -> np.ndarray:
        c = np.asarray(self.footprint.centroid, dtype=float)
        c.setflags(write=False)
        return c

    @functools.cached_property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors along the opening direction (u) and along the rim (v)."""
        c, s = math.cos(self.opening_dir), math.sin(self.opening_dir)
        return np.array([c, s]), np.array([-s, c])

    def local(self, pts) -> np.ndarray:
        """World points to bag-frame (u, v) coordinates about the centroid."""
        u, v = self.axes
        d = np.asarray(pts, dtype=float).reshape(-1, 2) - self.center
        return np.stack([d @ u, d @ v], axis=1)

    def world(self, uv) -> np.ndarray:
        u, v = self.axes
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        return self.center + uv[:, :1] * u + uv[:, 1:] * v

    @functools.cached_property
    def half_extents_local(self) -> tuple[float, float]:
        uv = self.local(self.footprint.vertices)
        return float(np.abs(uv[:, 0]).max()), float(np.abs(uv[:, 1]).max())

    @functools.cached_property
    def rim_arc(self) -> list[Point2]:
        """True rim: footprint vertices in the top band, ordered along the rim, inset by 1 cm."""
        uv = self.local(self.footprint.vertices)
        umax, umin = uv[:, 0].max(), uv[:, 0].min()
        sel = uv[uv[:, 0] >= umax - 0.12 * (umax - umin)]
        if len(sel) < 2:
            sel = uv[np.argsort(-uv[:, 0])[:2]]
        sel = sel[np.argsort(sel[:, 1])].copy()
        sel[:, 0] -= 1.0
        return [Point2(*p) for p in self.world(sel)]

    @property
    def rim_centroid(self) -> Point2:
        if self.upside == Upside.Up:
            return Point2(*self.center)
        arc = np.asarray(self.rim_arc)
        return Point2(*arc.mean(axis=0))

    @functools.cached_property
    def opening_semi_axes(self) -> tuple[float, float]:
        """(along rim, across rim) semi-axes of the opening ellipse, clamped to fit the footprint."""
        hu, hv = self.half_extents_local
        area = max(self.opening_area, 1e-6)
        sa = math.sqrt(area * self.opening_aspect / math.pi)
        sb = math.sqrt(area / (math.pi * self.opening_aspect))
        k = min(1.0, 0.95 * hv / sa, 0.95 * hu / sb)
        return sa * k, sb * k

    @functools.cached_property
    def opening_poly(self) -> Polygon:
        sa, sb = self.opening_semi_axes
        t = np.linspace(0, 2 * math.pi, 32, endpoint=False)
        uv = np.stack([sb * np.sin(t), sa * np.cos(t)], axis=1)
        return Polygon.from_any_orientation(self.world(uv))

    @property
    def effective_opening_area(self) -> float:
        sa, sb = self.opening_semi_axes
        return math.pi * sa * sb

    def handle_centers(self) -> list[Point2]:
        if not self.material.has_handles:
            return []
        hu, hv = self.half_extents_local
        if self.upside == Upside.Up:
            sa, _ = self.opening_semi_axes
            v = min(sa + 2.0, 0.9 * hv)
            uv = [(0.0, v), (0.0, -v)]
        elif self.material.kind == MaterialKind.HandBag:
            uv = [(0.75 * hu, 0.15 * hv), (0.75 * hu, -0.15 * hv)]
        else:
            uv = [(0.8 * hu, 0.6 * hv), (0.8 * hu, -0.6 * hv)]
        return [Point2(*p) for p in self.world(uv)]


# -- action primitives -------------------------------------------------------------------------


@dataclass(frozen=True)
class Shake:
    grasp: Point2
    k_s: int = 3
    amplitude: float = 0.7 * math.pi
    freq: float = 0.4


@dataclass(frozen=True)
class Fold:
    grasp: Point2
    d: float = 28.0


@dataclass(frozen=True)
class Compress:
    grasp: Point2
    k_c: int = 4
    pause: float = 0.9
    alpha: float = math.pi / 7


@dataclass(frozen=True)
class Flip:
    alpha: float = math.pi / 4


@dataclass(frozen=True)
class Rotate:
    angle: float
    bimanual: bool = False


@dataclass(frozen=True)
class DilateFlatten:
    axis: float = 0.0


@dataclass(frozen=True)
class DilateOpening:
    center: Point2
    alpha: float = math.pi / 3
    theta: float = 0.0
    d: float = 12.0
    torque_limit: float = 0.05
    offset: float = 0.02


@dataclass(frozen=True)
class Fling:
    left: Point2
    right: Point2


@dataclass(frozen=True)
class Recenter:
    pass


@dataclass(frozen=True)
class PinPull:
    pin: Point2
    pull: Point2


ActionPrimitive = Union[Shake, Fold, Compress, Flip, Rotate, DilateFlatten,
                        DilateOpening, Fling, Recenter, PinPull]


@dataclass(frozen=True)
class GraspOutcome:
    layers: Layers
    held: bool
    z_bot: float
    z_top: float
    point: Point2 = Point2(0.0, 0.0)
    height: float = 0.0


@dataclass(frozen=True)
class InteractionTrace:
    """What the camera saw during one cyclic trajectory."""

    true_layers: Layers
    held: bool
    duration_s: float
    gripper_tilt_deg: float


# -- construction -------------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _sample_layers(material: Material, rng: np.random.Generator, size: int | None = None):
    """Per-configuration layer heights; the per-attempt jitter supplies the rest of the variance."""
    sd_b = math.sqrt(max(material.z_bot_sd ** 2 - material.attempt_sd ** 2, 0.0))
    sd_g = math.sqrt(max(material.layer_gap_sd ** 2 - material.gap_attempt_sd ** 2, 0.0))
    if size is None:
        return float(rng.normal(material.z_bot_mean, sd_b)), float(rng.normal(material.layer_gap_mean, sd_g))
    return rng.normal(material.z_bot_mean, sd_b, size), rng.normal(material.layer_gap_mean, sd_g, size)


def _crumpled_footprint(material: Material, loosened: float, center, theta: float,
                        rng: np.random.Generator, fx: EffectParams) -> Polygon:
    """Perturbed rectangle with area ``loosened * A_max`` (star-shaped, hence simple)."""
    su = math.sqrt(loosened) * math.exp(rng.normal(0.0, fx.crumple_aspect_sd))
    su = min(max(su, loosened), 1.0)
    sv = loosened / su
    hu, hv = material.length / 2 * su, material.width / 2 * sv
    n_side = 5
    t = np.linspace(-1, 1, n_side, endpoint=False)
    side = [np.stack([np.full(n_side, hu), hv * t], 1),            # rim edge (u = +hu)
            np.stack([-hu * t, np.full(n_side, hv)], 1),
            np.stack([np.full(n_side, -hu), -hv * t], 1),
            np.stack([hu * t, np.full(n_side, -hv)], 1)]
    uv = np.vstack(side)
    amp = fx.crumple_noise * (1.0 - loosened)
    uv = uv * (1.0 + amp * rng.uniform(-1, 1, size=(len(uv), 1)))
    poly = Polygon.from_any_orientation(uv)
    uv = uv * math.sqrt(loosened * material.A_max / polygon_area(poly))
    c, s = math.cos(theta), math.sin(theta)
    world = np.asarray(center, dtype=float) + uv @ np.array([[c, s], [-s, c]])
    return Polygon.from_any_orientation(world)


def _wrinkles(rng: np.random.Generator, k: int = 6) -> np.ndarray:
    return np.column_stack([rng.uniform(-0.5, 0.5, k), rng.uniform(-0.5, 0.5, k),
                            rng.uniform(0.08, 0.25, k), rng.uniform(0.3, 1.0, k)])


def new_bag(material: Material, seed: int | np.random.Generator = 0,
            effects: EffectParams = DEFAULT_EFFECTS) -> BagState:
    """Random crumpled bag dropped near the workspace centre."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fx = effects
    loosened = _uniform(rng, fx.init_loosened)
    theta = float(rng.uniform(0, 2 * math.pi))
    ws = fx.workspace
    center = np.asarray(ws.center) + rng.normal(0, fx.init_center_sd, 2)
    footprint = _crumpled_footprint(material, loosened, center, theta, rng, fx)
    upside = [Upside.Up, Upside.Down, Upside.Side][int(rng.choice(3, p=fx.init_upside_probs))]
    z_bot, gap = _sample_layers(material, rng)
    n_handles = 2 if material.has_handles else 0
    return BagState(
        material=material,
        footprint=footprint,
        loosened=loosened,
        opening_dir=theta,
        upside=upside,
        opening_area=_uniform(rng, fx.init_opening_frac) * material.A_max,
        opening_aspect=_uniform(rng, fx.init_opening_aspect),
        handle_visible=tuple(bool(rng.random() >= fx.handle_hidden_prob) for _ in range(n_handles)),
        z_bot_cfg=z_bot,
        gap_cfg=gap,
        wrinkles=_wrinkles(rng),
    )


def flat_bag(material: Material, seed: int | np.random.Generator = 0,
             effects: EffectParams = DEFAULT_EFFECTS,
             loosened: tuple[float, float] = (0.88, 0.98),
             opening_dir: float = math.pi / 2, dir_sd_deg: float = 5.0) -> BagState:
    """A bag already spread out on its side with the opening roughly facing ``opening_dir``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = new_bag(material, rng, effects)
    lo = _uniform(rng, loosened)
    theta = opening_dir + math.radians(dir_sd_deg) * float(rng.normal())
    fp = _crumpled_footprint(material, lo, effects.workspace.center, theta, rng, effects)
    return replace(s, footprint=fp, loosened=lo, opening_dir=theta, upside=Upside.Side)


# -- transitions --------------------------------------------------------------------------------


def _require_on_bag(s: BagState, p, fx: EffectParams) -> None:
    if not contains_point(s.footprint, p, tol=fx.grasp_tol):
        raise GraspOffBag(f"grasp point {tuple(p)} is not on the bag")


def _rotate_state(s: BagState, angle: float) -> BagState:
    R = rotation(angle)
    c = s.center
    fp = Polygon(c + (s.footprint.vertices - c) @ R.T)
    return replace(s, footprint=fp, opening_dir=s.opening_dir + angle)


def _translate(s: BagState, delta) -> BagState:
    return replace(s, footprint=Polygon(s.footprint.vertices + np.asarray(delta, dtype=float)))


def _relaid(s: BagState, loosened: float, dtheta: float, shift, rng, fx: EffectParams) -> BagState:
    """The bag was lifted and put down again: new crumple shape and layer configuration."""
    theta = s.opening_dir + dtheta
    fp = _crumpled_footprint(s.material, loosened, s.center + np.asarray(shift), theta, rng, fx)
    z_bot, gap = _sample_layers(s.material, rng)
    return replace(
        s, footprint=fp, loosened=loosened, opening_dir=theta, upside=Upside.Side,
        opening_area=_uniform(rng, fx.init_opening_frac) * s.A_max,
        opening_aspect=_uniform(rng, fx.init_opening_aspect),
        handle_visible=tuple(bool(rng.random() >= fx.handle_hidden_prob) for _ in s.handle_visible),
        z_bot_cfg=z_bot, gap_cfg=gap, wrinkles=_wrinkles(rng))


def _stretch_local(s: BagState, along_u: bool, factor: float) -> BagState:
    uv = s.local(s.footprint.vertices)
    uv[:, 0 if along_u else 1] *= factor
    return replace(s, footprint=Polygon.from_any_orientation(s.world(uv)))


def _cap_opening(s: BagState, area: float) -> float:
    return float(min(max(area, 0.0), s.material.full_opening_frac * s.A_max))


def apply_primitive(s: BagState, a: ActionPrimitive, rng: np.random.Generator,
                    effects: EffectParams = DEFAULT_EFFECTS) -> BagState:
    fx = effects
    if isinstance(a, Shake):
        _require_on_bag(s, a.grasp, fx)
        loosened = min(1.0, s.loosened + _uniform(rng, fx.shake_loosen))
        dtheta = math.radians(fx.shake_angle_deg) * float(rng.uniform(-1, 1))
        return _relaid(s, loosened, dtheta, rng.normal(0, fx.shake_translate_sd, 2), rng, fx)

    if isinstance(a, Fling):
        _require_on_bag(s, a.left, fx)
        _require_on_bag(s, a.right, fx)
        gain = fx.fling_fabric if s.material.is_fabric else fx.fling_other
        loosened = min(1.0, s.loosened + _uniform(rng, gain))
        dtheta = math.radians(fx.fling_angle_sd_deg) * float(rng.normal())
        return _relaid(s, loosened, dtheta, (0.0, 0.0), rng, fx)

    if isinstance(a, Fold):
        _require_on_bag(s, a.grasp, fx)
        g = np.asarray(a.grasp, dtype=float)
        direction = s.center - g
        norm = float(np.hypot(*direction))
        if norm < 1e-9:
            return s
        n = direction / norm
        # the grasped flap travels d, so the crease sits halfway
        kept = clip_halfplane(s.footprint, g + n * (a.d / 2), n)
        if kept is None or polygon_area(kept) >= s.area:
            return s
        return replace(s, footprint=kept)

    if isinstance(a, Compress):
        _require_on_bag(s, a.grasp, fx)
        m = s.material
        if not m.inflatable or m.has_holes:
            return s
        area = _cap_opening(s, s.opening_area + _uniform(rng, fx.compress_open) * s.A_max)
        aspect = max(1.0, s.opening_aspect * _uniform(rng, fx.compress_aspect_factor))
        upside = s.upside
        if upside != Upside.Up and rng.random() < fx.compress_up_prob:
            upside = Upside.Up
        return replace(s, opening_area=area, opening_aspect=aspect, upside=upside)

    if isinstance(a, Flip):
        upside = s.upside
        r = rng.random()
        if upside == Upside.Up and r < fx.flip_prob:
            upside = Upside.Down
        elif upside == Upside.Down and r < fx.flip_prob:
            upside = Upside.Up
        elif upside == Upside.Side:
            upside = Upside.Up if r < fx.flip_side_prob else Upside.Down if r < 2 * fx.flip_side_prob else upside
        s = replace(s, upside=upside)
        return _rotate_state(s, float(rng.uniform(0, 2 * math.pi)))

    if isinstance(a, Rotate):
        return _rotate_state(s, a.angle + math.radians(fx.rotate_noise_deg) * float(rng.normal()))

    if isinstance(a, DilateFlatten):
        # the bag stretches along whichever of its own axes lies closest to the dilation axis
        along_u = abs(math.cos(a.axis - s.opening_dir)) >= abs(math.sin(a.axis - s.opening_dir))
        hu, hv = s.half_extents_local
        ext = 2 * (hu if along_u else hv)
        factor = (ext + _uniform(rng, fx.dilate_flat_extent) * math.sqrt(s.A_max)) / ext
        factor = min(factor, max(1.0, s.A_max / s.area))
        s = _stretch_local(s, along_u, factor)
        return replace(s, loosened=min(1.0, s.loosened + fx.dilate_flat_loosen))

    if isinstance(a, DilateOpening):
        _require_on_bag(s, a.center, fx)
        err = float(np.hypot(*(np.asarray(a.center) - s.center)))
        if err <= fx.dilate_open_tol:
            area = _cap_opening(s, s.opening_area + _uniform(rng, fx.dilate_open_gain) * s.A_max)
            aspect = max(1.0, 1.0 + (s.opening_aspect - 1.0) * _uniform(rng, fx.dilate_aspect_factor))
            # pushing the walls apart also spreads the bag seen from above
            gain = min(1.0 + _uniform(rng, fx.dilate_open_spread),
                       max(1.0, fx.dilate_spread_cap * s.A_max / s.area))
            c = s.center
            s = replace(s, footprint=Polygon(c + (s.footprint.vertices - c) * math.sqrt(gain)))
        else:
            area = _cap_opening(s, s.opening_area - _uniform(rng, fx.dilate_open_loss) * s.A_max)
            aspect = s.opening_aspect / _uniform(rng, fx.dilate_aspect_factor)
        visible = tuple(v and rng.random() >= fx.dilate_hide_handle_prob for v in s.handle_visible)
        s = replace(s, opening_area=area, opening_aspect=aspect, handle_visible=visible)
        if rng.random() < fx.dilate_offcenter_prob:
            ang = float(rng.uniform(0, 2 * math.pi))
            s = _translate(s, _uniform(rng, fx.dilate_offcenter_shift) * np.array([math.cos(ang), math.sin(ang)]))
        return s

    if isinstance(a, Recenter):
        return _translate(s, np.asarray(fx.workspace.center) - s.center)

    if isinstance(a, PinPull):
        return s

    raise TypeError(f"unknown primitive {a!r}")


def attempt_interval(m: Material, z_bot_cfg, gap_cfg, eps_bot, eps_gap,
                     effects: EffectParams = DEFAULT_EFFECTS):
    """Layer interval for one attempt given standard-normal jitter draws (array friendly)."""
    z_bot = np.asarray(z_bot_cfg + m.attempt_sd * np.asarray(eps_bot))
    z_bot = np.where(z_bot <= 0, 0.05, z_bot)
    gap = np.maximum(effects.min_layer_gap, gap_cfg + m.gap_attempt_sd * np.asarray(eps_gap))
    if z_bot.ndim == 0:
        return float(z_bot), float(z_bot + gap)
    return z_bot, z_bot + gap


def layers_at(h, z_bot, z_top):
    """0 above the top layer, 1 between the layers, 2 at or below the bottom layer."""
    h = np.asarray(h)
    return np.where(h > z_top, 0, np.where(h > z_bot, 1, 2))


def attempt_grasp(s: BagState, p, h: float, rng: np.random.Generator,
                  effects: EffectParams = DEFAULT_EFFECTS) -> GraspOutcome:
    """Close the gripper at height ``h`` (mm) over point ``p``."""
    ws = effects.workspace
    if not contains_point(ws.to_polygon(), p):
        raise OutOfWorkspace(f"{tuple(p)} is outside the workspace")
    z_bot, z_top = attempt_interval(s.material, s.z_bot_cfg, s.gap_cfg,
                                    float(rng.normal()), float(rng.normal()), effects)
    layers = Layers(int(layers_at(h, z_bot, z_top)))
    m = s.material
    held = layers != Layers.Zero
    if layers == Layers.One and rng.random() < m.slip_1layer_prob * m.stiffness:
        held = False
    return GraspOutcome(layers, held, z_bot, z_top, Point2(float(p[0]), float(p[1])), float(h))


def execute_cyclic_trajectory(s: BagState, g: GraspOutcome, rng: np.random.Generator,
                              effects: EffectParams = DEFAULT_EFFECTS) -> tuple[BagState, InteractionTrace]:
    """Back-up-forward-down loop with the other gripper pinning; the bag nearly returns."""
    fx = effects
    v = s.footprint.vertices
    r = fx.cyclic_vertex_jitter * np.sqrt(rng.uniform(0, 1, len(v)))
    ang = rng.uniform(0, 2 * math.pi, len(v))
    moved = v + np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    target = s.area * (1.0 + float(rng.uniform(-fx.cyclic_area_jitter, fx.cyclic_area_jitter)))
    try:
        fp = Polygon.from_any_orientation(moved)
        c = np.asarray(fp.centroid)
        fp = Polygon(c + (fp.vertices - c) * math.sqrt(target / fp.area))
    except ValueError:
        fp = s.footprint
    loosened = min(1.0, max(0.0, s.loosened + float(rng.uniform(-fx.cyclic_loosen, fx.cyclic_loosen))))
    trace = InteractionTrace(g.layers, g.held, fx.trajectory_seconds, fx.gripper_tilt_deg)
    return replace(s, footprint=fp, loosened=loosened), trace


class InsertVia(str, enum.Enum):
    Side = "Side"
    Top = "Top"


def insert_objects(s: BagState, n: int, via: InsertVia | str, target, rng: np.random.Generator,
                   grasp_held: bool = False, effects: EffectParams = DEFAULT_EFFECTS,
                   success_scale: float = 1.0) -> tuple[BagState, int]:
    """Insert ``n`` objects; returns the new state and the number that went in."""
    if n < 1:
        raise ValueError("n must be >= 1")
    fx = effects
    via = InsertVia(via)
    if via == InsertVia.Side:
        if not grasp_held:
            raise NoGraspHeld("sideways insertion needs a held single-layer grasp")
        p = fx.p_side_base
        misalign = abs(wrap_angle(s.opening_dir - math.radians(fx.insert_axis_deg)))
        if misalign > math.radians(fx.insert_align_tol_deg):
            p -= fx.misalign_penalty
        if s.material.is_plastic and s.material.has_handles:
            p -= fx.plastic_handle_penalty
        p = min(max(p * success_scale, 0.0), 1.0)
        inserted = int(rng.binomial(n, p))
    else:
        if s.upside != Upside.Up:
            inserted = 0
        else:
            opening = s.opening_poly
            pts = np.asarray(target, dtype=float) + rng.normal(0, fx.place_sd, (n, 2))
            inside = points_in_polygon(pts, opening)
            clear = np.array([distance_to_boundary(opening, q) >= fx.object_radius for q in pts])
            inserted = int(np.count_nonzero(inside & clear))
    return replace(s, objects_inside=s.objects_inside + inserted), inserted


def lift_bag(s: BagState, pin, pull, rng: np.random.Generator,
             effects: EffectParams = DEFAULT_EFFECTS) -> int:
    """Pin-pull lift; returns how many objects stay in the bag."""
    if s.objects_inside == 0:
        return 0
    good = [np.asarray(h) for h in s.handle_centers()] + [np.asarray(s.rim_centroid)]

    def near(q) -> bool:
        q = np.asarray(q, dtype=float)
        return any(float(np.hypot(*(q - g))) <= effects.lift_r_good for g in good)

    if near(pin) and near(pull):
        return s.objects_inside
    return int(rng.binomial(s.objects_inside, effects.lift_retain_prob))


def in_workspace(s: BagState, effects: EffectParams = DEFAULT_EFFECTS) -> bool:
    ws = effects.workspace.to_polygon()
    return bool(points_in_polygon(s.footprint.vertices, ws).all())
