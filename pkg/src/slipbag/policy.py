"""Task policies: SLIP-Bagging, AutoBag, and the baselines.

Each policy drives a ``BagState`` through observe / decide / act steps and
returns an ``EpisodeResult``. Nothing here raises for task failure; every
failure becomes a tag on the result.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .bagsim import (
    BAG_KINDS, BagState, GraspOffBag, Compress, DilateFlatten, DilateOpening, Fling, Flip, InsertVia, Layers,
    MaterialKind, Recenter, Rotate, Shake, attempt_grasp, flat_bag, in_workspace,
    insert_objects, lift_bag, new_bag, apply_primitive,
)
from .config import (
    AutoBagThresholds, BaselineParams, FlattenThresholds, PolicyParams, SimConfig,
)
from .geom import min_area_rect, wrap_angle
from .percept import (
    GraspMode, ModeUnavailable, Observation, OpeningMetrics, PerceptionNoise,
    DepthHeuristic, depth_heuristics, opening_metrics, perceived_grasp_height,
    render_observation, select_grasp_point,
)
from .slip import CLASSIFIER_PRESETS, run_slip

__all__ = [
    "AutoBagThresholds", "BaselineKind", "BaselineParams", "EpisodeResult", "FailureTag",
    "FlattenAction", "FlattenResult", "FlattenThresholds", "POLICIES", "PolicyParams",
    "AutoBagVariant", "autobag_stage_action", "flatten", "flatten_branch", "run_autobag",
    "run_baseline", "run_episode", "run_slip_bagging", "run_slip_only",
]


class FailureTag(str, enum.Enum):
    None_ = "None"
    A_FlattenOrient = "A_FlattenOrient"
    B_GraspStuck = "B_GraspStuck"
    C_SlipOut = "C_SlipOut"
    D_InsertHit = "D_InsertHit"
    E_LiftDrop = "E_LiftDrop"
    FalseAccept = "FalseAccept"
    ActionCapExceeded = "ActionCapExceeded"
    NotApplicable = "NotApplicable"


@dataclass
class EpisodeResult:
    policy: str
    material: str
    flatten_success: bool = False
    reached_slip: bool = False
    single_layer_success: bool = False
    objects_inserted: int = 0
    objects_contained: int = 0
    n_objects: int = 6
    flatten_actions: int = 0
    slip_iterations: int = 0
    failure_tag: FailureTag = FailureTag.None_
    wall_time_sim: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.failure_tag = FailureTag(self.failure_tag)

    @property
    def full_success(self) -> bool:
        return self.n_objects > 0 and self.objects_contained == self.n_objects

    def to_row(self) -> dict:
        row = asdict(self)
        row["failure_tag"] = self.failure_tag.value
        row["full_success"] = self.full_success
        return row

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)] + ["full_success"]


# -- flattening ---------------------------------------------------------------------------------


class FlattenAction(str, enum.Enum):
    Shake = "Shake"
    Dilate = "Dilate"
    Fling = "Fling"
    Rotate = "Rotate"
    Done = "Done"


def flatten_branch(S: float, opening_angle: float, is_fabric: bool,
                   th: FlattenThresholds = FlattenThresholds()) -> FlattenAction:
    """Which primitive the flattening step machine picks for one observation.

    An unknown opening angle (no rim visible) on a large bag is treated as a
    bag lying face down, which only a re-lay can fix.
    """
    if S < th.p_small:
        return FlattenAction.Shake
    if S < th.p_large:
        return FlattenAction.Fling if is_fabric else FlattenAction.Dilate
    if math.isnan(opening_angle):
        return FlattenAction.Shake
    if abs(opening_angle) > th.alpha:
        return FlattenAction.Rotate
    return FlattenAction.Done


@dataclass
class FlattenResult:
    success: bool
    actions: int
    recenters: int
    metrics: OpeningMetrics | None = None


def _observe(s: BagState, cfg: SimConfig, noise: PerceptionNoise, rng) -> Observation:
    return render_observation(s, noise, rng, cfg.render)


def _recenter_if_needed(s: BagState, cfg: SimConfig, rng) -> tuple[BagState, bool]:
    if in_workspace(s, cfg.effects):
        return s, False
    c = np.asarray(cfg.effects.workspace.center)
    if float(np.hypot(*(s.center - c))) < 1.0:
        return s, False
    return apply_primitive(s, Recenter(), rng, cfg.effects), True


def _short_axis_rotation(o: Observation, target: float) -> float:
    """Rotation that brings the observed bag's shorter axis onto ``target`` (mod pi)."""
    rect = min_area_rect(o.hull_points(o.bag_mask))
    short = rect.angle + math.pi / 2
    return _axis_delta(short, target)


def _axis_delta(axis: float, target: float) -> float:
    d = wrap_angle(target - axis)
    if d > math.pi / 2:
        d -= math.pi
    elif d <= -math.pi / 2:
        d += math.pi
    return d


def flatten(s: BagState, th: FlattenThresholds, noise: PerceptionNoise, rng: np.random.Generator,
            cfg: SimConfig = SimConfig()) -> tuple[BagState, FlattenResult]:
    pp, fx = cfg.policy, cfg.effects
    actions = recenters = 0
    while True:
        s, moved = _recenter_if_needed(s, cfg, rng)
        recenters += moved
        o = _observe(s, cfg, noise, rng)
        m = opening_metrics(o, s.A_max)
        step = flatten_branch(m.S, m.opening_angle, s.material.is_fabric, th)
        if step == FlattenAction.Done:
            return s, FlattenResult(True, actions, recenters, m)
        if actions >= pp.action_cap:
            return s, FlattenResult(False, actions, recenters, m)
        if step == FlattenAction.Shake:
            prims = [Shake(select_grasp_point(o, GraspMode.UniformBoundary, rng))]
        elif step == FlattenAction.Fling:
            prims = [Fling(*select_grasp_point(o, GraspMode.LeftRightEndpoints, rng))]
        elif step == FlattenAction.Dilate:
            rot = _short_axis_rotation(o, 0.0)
            prims = [Rotate(rot)] if abs(rot) > pp.dilate_align_tol else []
            prims.append(DilateFlatten(axis=0.0))
        else:
            prims = [Rotate(-m.opening_angle)]
        for a in prims:
            if actions >= pp.action_cap:
                break
            try:
                s = apply_primitive(s, a, rng, fx)
            except GraspOffBag:
                pass
            actions += 1


# -- SLIP-Bagging -------------------------------------------------------------------------------


def _clock(cfg: SimConfig, actions: int, iterations: int, extra: int = 0) -> float:
    fx = cfg.effects
    return fx.primitive_seconds * (actions + extra) + fx.trajectory_seconds * iterations


def _side_insert_and_lift(s: BagState, r: EpisodeResult, cfg: SimConfig, rng,
                          success_scale: float = 1.0) -> EpisodeResult:
    """Rotate sideways, insert through the side opening, lift with both arms at the rim."""
    m = s.material
    if rng.random() < m.slip_out_prob:
        r.failure_tag = FailureTag.C_SlipOut
        return r
    s = apply_primitive(s, Rotate(cfg.policy.sideways_angle), rng, cfg.effects)
    s, inserted = insert_objects(s, cfg.n_objects, InsertVia.Side, None, rng, grasp_held=True,
                                 effects=cfg.effects, success_scale=success_scale)
    r.objects_inserted = inserted
    rim = s.rim_centroid
    r.objects_contained = lift_bag(s, rim, rim, rng, cfg.effects)
    if inserted < cfg.n_objects:
        r.failure_tag = FailureTag.D_InsertHit
    elif r.objects_contained < inserted:
        r.failure_tag = FailureTag.E_LiftDrop
    return r


def run_slip_bagging(s: BagState, cfg: SimConfig, rng: np.random.Generator,
                     seed: int = 0) -> EpisodeResult:
    kind = s.material.kind
    noise = cfg.noise_for(kind)
    r = EpisodeResult("SlipBagging", kind.value, n_objects=cfg.n_objects, seed=seed)
    s, fr = flatten(s, cfg.flatten, noise, rng, cfg)
    r.flatten_actions, r.flatten_success = fr.actions, fr.success
    if not fr.success:
        r.failure_tag = FailureTag.A_FlattenOrient
        r.wall_time_sim = _clock(cfg, fr.actions + fr.recenters, 0)
        return r
    r.reached_slip = True
    try:
        s, sr = run_slip(s, GraspMode.RimCenterForSlip, cfg.slip, cfg.classifier_model(), noise,
                         rng, cfg.effects, cfg.render)
    except ModeUnavailable:
        r.failure_tag = FailureTag.A_FlattenOrient
        r.wall_time_sim = _clock(cfg, fr.actions + fr.recenters, 0)
        return r
    r.slip_iterations = sr.iterations_used
    r.wall_time_sim = _clock(cfg, fr.actions + fr.recenters, sr.iterations_used, extra=3)
    if sr.false_accept:
        r.failure_tag = FailureTag.FalseAccept
        return r
    if not sr.success:
        r.failure_tag = FailureTag.B_GraspStuck
        return r
    r.single_layer_success = True
    return _side_insert_and_lift(s, r, cfg, rng)


# -- AutoBag ------------------------------------------------------------------------------------


class AutoBagVariant(str, enum.Enum):
    Full = "Full"
    NoStage2 = "NoStage2"


class AutoBagStep(str, enum.Enum):
    Shake = "Shake"
    Flip = "Flip"
    Compress = "Compress"
    Rotate = "Rotate"
    DilateOpening = "DilateOpening"
    Insert = "Insert"


def stage1_pass(m: OpeningMetrics, th: AutoBagThresholds) -> bool:
    return m.S >= th.S1 and m.A_CH >= th.A1 and th.elongation_ok(m.E_CH, th.E1)


def stage2_pass(m: OpeningMetrics, th: AutoBagThresholds) -> bool:
    return stage1_pass(m, th) and m.A_CH >= th.A2 and th.elongation_ok(m.E_CH, th.E2)


def autobag_stage_action(m: OpeningMetrics, rim_pixels: int, th: AutoBagThresholds,
                         variant: AutoBagVariant | str = AutoBagVariant.Full,
                         min_rim_pixels: int = 3) -> AutoBagStep:
    """Stage logic for one observation. Stage 2 alignment is decided separately."""
    variant = AutoBagVariant(variant)
    if not stage1_pass(m, th):
        if m.S < th.S1:
            return AutoBagStep.Shake
        if rim_pixels < min_rim_pixels:
            return AutoBagStep.Flip
        return AutoBagStep.Compress
    if variant == AutoBagVariant.NoStage2 or stage2_pass(m, th):
        return AutoBagStep.Insert
    return AutoBagStep.DilateOpening


def _rim_long_axis_rotation(o: Observation, target: float) -> float:
    rim = np.argwhere(o.rim_mask)
    if len(rim) < 3:
        return 0.0
    try:
        rect = min_area_rect(o.hull_points(o.rim_mask, corners=True))
    except ValueError:
        return 0.0
    return _axis_delta(rect.angle, target)


def _pinpull_lift(s: BagState, cfg: SimConfig, noise: PerceptionNoise, rng) -> int:
    o = _observe(s, cfg, noise, rng)
    pin, pull = select_grasp_point(o, GraspMode.PinPullPoints, rng)
    return lift_bag(s, pin, pull, rng, cfg.effects)


def _top_insert_and_lift(s: BagState, target, r: EpisodeResult, cfg: SimConfig,
                         noise: PerceptionNoise, rng) -> EpisodeResult:
    s, inserted = insert_objects(s, cfg.n_objects, InsertVia.Top, target, rng, effects=cfg.effects)
    r.objects_inserted = inserted
    r.objects_contained = _pinpull_lift(s, cfg, noise, rng) if inserted else 0
    if inserted < cfg.n_objects:
        r.failure_tag = FailureTag.D_InsertHit
    elif r.objects_contained < inserted:
        r.failure_tag = FailureTag.E_LiftDrop
    return r


def run_autobag(s: BagState, cfg: SimConfig, variant: AutoBagVariant | str,
                rng: np.random.Generator, seed: int = 0) -> EpisodeResult:
    variant = AutoBagVariant(variant)
    kind = s.material.kind
    noise = cfg.noise_for(kind)
    th, pp, fx = cfg.autobag, cfg.policy, cfg.effects
    name = "AutoBag" if variant == AutoBagVariant.Full else "AutoBagNoStage2"
    r = EpisodeResult(name, kind.value, n_objects=cfg.n_objects, seed=seed)
    actions = recenters = 0
    while True:
        s, moved = _recenter_if_needed(s, cfg, rng)
        recenters += moved
        o = _observe(s, cfg, noise, rng)
        m = opening_metrics(o, s.A_max)
        step = autobag_stage_action(m, int(np.count_nonzero(o.rim_mask)), th, variant,
                                    pp.min_rim_pixels)
        if step == AutoBagStep.Insert:
            break
        if actions >= pp.action_cap:
            r.flatten_actions = actions
            r.failure_tag = FailureTag.ActionCapExceeded
            r.wall_time_sim = _clock(cfg, actions + recenters, 0)
            return r
        try:
            if step == AutoBagStep.Shake:
                a = Shake(select_grasp_point(o, GraspMode.HandleCenter, rng))
            elif step == AutoBagStep.Flip:
                a = Flip()
            elif step == AutoBagStep.Compress:
                a = Compress(select_grasp_point(o, GraspMode.BottomCenter, rng))
            else:
                rot = _rim_long_axis_rotation(o, math.pi / 2)
                if abs(rot) > pp.stage2_align_tol:
                    a = Rotate(rot)
                else:
                    c = select_grasp_point(o, GraspMode.OpeningCenter, rng)
                    a = DilateOpening(c, d=pp.dilate_open_d, torque_limit=pp.dilate_open_torque)
            s = apply_primitive(s, a, rng, fx)
        except (GraspOffBag, ModeUnavailable):
            pass
        actions += 1
    r.flatten_actions = actions
    r.flatten_success = True
    r.wall_time_sim = _clock(cfg, actions + recenters, 0, extra=2)
    try:
        target = select_grasp_point(o, GraspMode.OpeningCenter, rng)
    except ModeUnavailable:
        r.failure_tag = FailureTag.D_InsertHit
        return r
    return _top_insert_and_lift(s, target, r, cfg, noise, rng)


# -- baselines ----------------------------------------------------------------------------------


class BaselineKind(str, enum.Enum):
    PerceivedDepth = "PerceivedDepth"
    HandleGrasp = "HandleGrasp"
    MinDepthPlace = "MinDepthPlace"
    SobelPlace = "SobelPlace"
    PinPullSide = "PinPullSide"
    FlingOpen = "FlingOpen"


PREFLATTENED = (BaselineKind.PerceivedDepth, BaselineKind.HandleGrasp)


def run_baseline(s: BagState, kind: BaselineKind | str, cfg: SimConfig, rng: np.random.Generator,
                 seed: int = 0) -> EpisodeResult:
    """Baselines. PerceivedDepth and HandleGrasp expect ``s`` to be already flattened."""
    kind = BaselineKind(kind)
    mat = s.material
    noise = cfg.noise_for(mat.kind)
    bp: BaselineParams = cfg.baseline
    r = EpisodeResult(kind.value, mat.kind.value, n_objects=cfg.n_objects, seed=seed)

    if kind == BaselineKind.PerceivedDepth:
        r.flatten_success = r.reached_slip = True
        o = _observe(s, cfg, noise, rng)
        try:
            p = select_grasp_point(o, GraspMode.RimCenterForSlip, rng)
        except ModeUnavailable:
            r.failure_tag = FailureTag.A_FlattenOrient
            return r
        h = perceived_grasp_height(o, p, cfg.slip.h_min)
        g = attempt_grasp(s, p, h, rng, cfg.effects)
        r.slip_iterations = 1
        r.wall_time_sim = _clock(cfg, 0, 1, extra=3)
        if not (g.layers == Layers.One and g.held):
            r.failure_tag = FailureTag.B_GraspStuck
            return r
        r.single_layer_success = True
        return _side_insert_and_lift(s, r, cfg, rng)

    if kind == BaselineKind.HandleGrasp:
        r.flatten_success = r.reached_slip = True
        r.wall_time_sim = _clock(cfg, 0, 0, extra=3)
        if not mat.has_handles:
            r.failure_tag = FailureTag.NotApplicable
            return r
        if mat.kind != MaterialKind.HandBag:
            # side handles: lifting them never opens the bag
            r.failure_tag = FailureTag.D_InsertHit
            return r
        if rng.random() < bp.handbag_handle_error:
            r.failure_tag = FailureTag.B_GraspStuck
            return r
        r.single_layer_success = True
        return _side_insert_and_lift(s, r, cfg, rng, success_scale=bp.handle_insert_scale)

    if kind in (BaselineKind.MinDepthPlace, BaselineKind.SobelPlace):
        o = _observe(s, cfg, noise, rng)
        h = DepthHeuristic.MinDepth if kind == BaselineKind.MinDepthPlace else DepthHeuristic.MaxSobelGradient
        target = depth_heuristics(o, h)
        r.wall_time_sim = _clock(cfg, 0, 0, extra=2)
        return _top_insert_and_lift(s, target, r, cfg, noise, rng)

    if kind == BaselineKind.PinPullSide:
        r.wall_time_sim = _clock(cfg, 1, 0, extra=2)
        if rng.random() >= bp.pinpull_separation_prob:
            r.failure_tag = FailureTag.B_GraspStuck
            return r
        r.single_layer_success = True
        return _side_insert_and_lift(s, r, cfg, rng)

    # FlingOpen: 2 horizontal shakes and 3 vertical flings holding both handles
    r.wall_time_sim = _clock(cfg, 5, 0, extra=2)
    if not mat.has_handles:
        r.failure_tag = FailureTag.NotApplicable
        return r
    both_single = all(rng.random() < bp.fling_one_layer_prob for _ in range(2))
    if not both_single:
        r.failure_tag = FailureTag.B_GraspStuck
        return r
    r.single_layer_success = r.flatten_success = True
    if rng.random() >= bp.fling_survive_prob:
        r.failure_tag = FailureTag.D_InsertHit
        return r
    r.objects_inserted = r.objects_contained = cfg.n_objects
    return r


# -- garments -----------------------------------------------------------------------------------


def run_slip_only(s: BagState, cfg: SimConfig, rng: np.random.Generator, seed: int = 0) -> EpisodeResult:
    """SLIP alone on a spread-out object, using the per-object classifier preset when one exists."""
    kind = s.material.kind
    noise = cfg.noise_for(kind)
    model = CLASSIFIER_PRESETS.get(kind.value, cfg.classifier_model())
    r = EpisodeResult("SlipOnly", kind.value, n_objects=0, seed=seed, flatten_success=True,
                      reached_slip=True)
    mode = GraspMode.RimCenterForSlip if kind in BAG_KINDS else GraspMode.BagCenter
    try:
        s, sr = run_slip(s, mode, cfg.slip, model, noise, rng, cfg.effects, cfg.render)
    except ModeUnavailable:
        r.failure_tag = FailureTag.A_FlattenOrient
        return r
    r.slip_iterations = sr.iterations_used
    r.single_layer_success = sr.success
    r.wall_time_sim = _clock(cfg, 0, sr.iterations_used)
    if sr.false_accept:
        r.failure_tag = FailureTag.FalseAccept
    elif not sr.success:
        r.failure_tag = FailureTag.B_GraspStuck
    return r


# -- dispatch -----------------------------------------------------------------------------------


POLICIES = ("SlipBagging", "PerceivedDepth", "HandleGrasp", "AutoBag", "AutoBagNoStage2",
            "MinDepthPlace", "SobelPlace", "PinPullSide", "FlingOpen", "SlipOnly")


def initial_state(policy: str, kind: MaterialKind | str, cfg: SimConfig,
                  rng: np.random.Generator) -> BagState:
    mat = cfg.material(kind)
    if policy in ("PerceivedDepth", "HandleGrasp", "SlipOnly"):
        return flat_bag(mat, rng, cfg.effects)
    return new_bag(mat, rng, cfg.effects)


def run_episode(policy: str, kind: MaterialKind | str, cfg: SimConfig, seed: int) -> EpisodeResult:
    """One seeded episode of ``policy`` on a fresh object of material ``kind``."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    rng = np.random.default_rng(seed)
    s = initial_state(policy, kind, cfg, rng)
    if policy == "SlipBagging":
        return run_slip_bagging(s, cfg, rng, seed)
    if policy == "AutoBag":
        return run_autobag(s, cfg, AutoBagVariant.Full, rng, seed)
    if policy == "AutoBagNoStage2":
        return run_autobag(s, cfg, AutoBagVariant.NoStage2, rng, seed)
    if policy == "SlipOnly":
        return run_slip_only(s, cfg, rng, seed)
    return run_baseline(s, policy, cfg, rng, seed)

