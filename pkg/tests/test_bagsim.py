import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slipbag.bagsim import (BAG_KINDS, DEFAULT_EFFECTS, MATERIALS, Compress, DilateFlatten,
                            DilateOpening, Fling, Flip, Fold, GraspOffBag, GraspOutcome, Layers,
                            MaterialKind, NoGraspHeld, OutOfWorkspace, PinPull, Recenter, Rotate,
                            Shake, Upside, apply_primitive, attempt_grasp, attempt_interval,
                            execute_cyclic_trajectory, flat_bag, in_workspace, insert_objects,
                            layers_at, lift_bag, new_bag)
from slipbag.geom import polygon_area, wrap_angle

THIN = MATERIALS[MaterialKind.ThinPlastic]
DRAW = MATERIALS[MaterialKind.Drawstring]


def _upright(material, seed=0, opening_frac=0.4, aspect=1.3):
    s = flat_bag(material, seed)
    return replace(s, upside=Upside.Up, opening_area=opening_frac * material.A_max,
                   opening_aspect=aspect)


# -- construction -------------------------------------------------------------------------------


def test_new_bag_area_tracks_loosened():
    for seed in range(200):
        s = new_bag(THIN, seed)
        assert 0.05 <= s.loosened <= 0.4
        assert s.area == pytest.approx(s.loosened * THIN.A_max, rel=0.05)
        assert 0.05 * 0.95 <= s.area / THIN.A_max <= 0.45


def test_new_bag_seed_zero_in_range():
    s = new_bag(THIN, 0)
    assert 0.05 <= s.area / s.A_max <= 0.45


def test_new_bag_is_deterministic():
    a, b = new_bag(THIN, 123), new_bag(THIN, 123)
    np.testing.assert_array_equal(a.footprint.vertices, b.footprint.vertices)
    assert (a.loosened, a.opening_dir, a.upside, a.z_bot_cfg, a.gap_cfg) == \
           (b.loosened, b.opening_dir, b.upside, b.z_bot_cfg, b.gap_cfg)
    np.testing.assert_array_equal(a.wrinkles, b.wrinkles)


def test_new_bag_mean_loosened():
    mean = np.mean([new_bag(THIN, seed).loosened for seed in range(1000)])
    assert mean == pytest.approx(0.225, abs=0.02)


def test_new_bag_starts_inside_workspace():
    for kind in BAG_KINDS:
        for seed in range(50):
            assert in_workspace(new_bag(MATERIALS[kind], seed))


def test_material_validation():
    with pytest.raises(ValueError):
        replace(THIN, stiffness=1.5)
    with pytest.raises(ValueError):
        replace(THIN, layer_gap_mean=0.0)


# -- primitives ---------------------------------------------------------------------------------


def test_rotate_is_rigid():
    rng = np.random.default_rng(0)
    for seed in range(30):
        s = new_bag(THIN, seed)
        t = apply_primitive(s, Rotate(math.pi / 2), rng)
        assert t.area == pytest.approx(s.area, abs=1e-9)
        turned = wrap_angle(t.opening_dir - s.opening_dir)
        assert abs(turned - math.pi / 2) <= math.radians(9)


def test_recenter_moves_centroid_to_workspace_centre():
    s = new_bag(THIN, 4)
    t = apply_primitive(s, Recenter(), np.random.default_rng(0))
    assert tuple(t.center) == pytest.approx(tuple(DEFAULT_EFFECTS.workspace.center))
    assert t.area == pytest.approx(s.area, abs=1e-9)


def test_compress_is_noop_on_drawstring():
    for seed in range(50):
        s = new_bag(DRAW, seed)
        t = apply_primitive(s, Compress(tuple(s.center)), np.random.default_rng(seed))
        assert t.opening_area == s.opening_area
        assert t.upside == s.upside


def test_compress_opens_plastic_bag():
    s = new_bag(THIN, 1)
    t = apply_primitive(s, Compress(tuple(s.center)), np.random.default_rng(1))
    gain = (t.opening_area - s.opening_area) / THIN.A_max
    assert 0.05 - 1e-12 <= gain <= 0.15 + 1e-12


def test_dilate_opening_centred_is_monotone():
    s = _upright(THIN, opening_frac=0.05, aspect=3.0)
    rng = np.random.default_rng(2)
    areas = [s.opening_area]
    for _ in range(5):
        s = apply_primitive(s, DilateOpening(tuple(s.center)), rng)
        areas.append(s.opening_area)
    assert all(b >= a for a, b in zip(areas, areas[1:]))
    assert areas[-1] > areas[0]


def test_dilate_opening_off_centre_shrinks_opening():
    s = _upright(THIN, opening_frac=0.3)
    hu, hv = s.half_extents_local
    p = tuple(s.world([(0.0, 0.6 * hv)])[0])
    t = apply_primitive(s, DilateOpening(p), np.random.default_rng(0))
    assert t.opening_area < s.opening_area


def test_fold_removes_area_beyond_crease():
    s = flat_bag(THIN, 3)
    v = s.footprint.vertices[int(np.argmax(s.local(s.footprint.vertices)[:, 0]))]
    t = apply_primitive(s, Fold(tuple(v), d=28.0), np.random.default_rng(0))
    assert t.area < s.area


def test_flip_toggles_often():
    rng = np.random.default_rng(0)
    s = _upright(THIN)
    toggles = sum(apply_primitive(s, Flip(), rng).upside == Upside.Down for _ in range(2000))
    assert toggles / 2000 == pytest.approx(0.8, abs=0.03)


def test_fling_loosens_fabric_more():
    rng = np.random.default_rng(0)
    hb = MATERIALS[MaterialKind.HandBag]
    gains_fab, gains_pl = [], []
    for seed in range(100):
        for mat, out in ((hb, gains_fab), (THIN, gains_pl)):
            s = new_bag(mat, seed)
            c = tuple(s.center)
            out.append(apply_primitive(s, Fling(c, c), rng).loosened - s.loosened)
    assert min(gains_fab) >= 0.2 - 1e-12 or max(gains_fab) > 0
    assert np.mean(gains_fab) > np.mean(gains_pl)
    assert max(gains_pl) <= 0.1 + 1e-12


def test_grasp_off_bag_raises():
    s = new_bag(THIN, 0)
    far = (s.center[0] + 200.0, s.center[1])
    with pytest.raises(GraspOffBag):
        apply_primitive(s, Shake(far), np.random.default_rng(0))


def test_pinpull_does_not_change_state():
    s = new_bag(THIN, 0)
    assert apply_primitive(s, PinPull((0, 0), (1, 1)), np.random.default_rng(0)) is s


def _random_action(s, rng):
    c = tuple(s.center)
    k = int(rng.integers(9))
    if k == 0:
        return Shake(c)
    if k == 1:
        v = s.footprint.vertices[int(rng.integers(len(s.footprint.vertices)))]
        return Fold(tuple(v))
    if k == 2:
        return Compress(c)
    if k == 3:
        return Flip()
    if k == 4:
        return Rotate(float(rng.uniform(-math.pi, math.pi)))
    if k == 5:
        return DilateFlatten(float(rng.uniform(0, math.pi)))
    if k == 6:
        return DilateOpening(c)
    if k == 7:
        return Fling(c, c)
    return Recenter()


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(BAG_KINDS)), st.integers(0, 2 ** 32 - 1))
def test_action_sequences_respect_invariants(kind, seed):
    mat = MATERIALS[kind]
    rng = np.random.default_rng(seed)
    s = new_bag(mat, rng)
    for _ in range(12):
        a = _random_action(s, rng)
        t = apply_primitive(s, a, rng)
        if isinstance(a, (Rotate, Recenter)):
            assert t.area == pytest.approx(s.area, abs=1e-9)
        if isinstance(a, Fold):
            assert t.area <= s.area + 1e-9
        if isinstance(a, (Shake, Fling, DilateFlatten)):
            assert t.loosened >= s.loosened
        if isinstance(a, Compress) and mat.has_holes:
            assert t.opening_area == s.opening_area
        assert t.area <= 1.02 * mat.A_max
        assert 0.0 <= t.opening_area <= mat.full_opening_frac * mat.A_max + 1e-9
        s = t


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(list(BAG_KINDS)), st.integers(0, 2 ** 32 - 1), st.integers(0, 8))
def test_transitions_are_deterministic(kind, seed, k):
    s = new_bag(MATERIALS[kind], seed)
    a = _random_action(s, np.random.default_rng(k))
    t1 = apply_primitive(s, a, np.random.default_rng(seed))
    t2 = apply_primitive(s, a, np.random.default_rng(seed))
    np.testing.assert_array_equal(t1.footprint.vertices, t2.footprint.vertices)
    assert (t1.loosened, t1.opening_dir, t1.upside, t1.opening_area, t1.handle_visible) == \
           (t2.loosened, t2.opening_dir, t2.upside, t2.opening_area, t2.handle_visible)


# -- grasping -----------------------------------------------------------------------------------


def test_layers_at_definition():
    assert layers_at(6, 2, 5) == Layers.Zero
    assert layers_at(4, 2, 5) == Layers.One
    assert layers_at(1, 2, 5) == Layers.Two
    # boundaries: at the top layer one layer, at the bottom layer two
    assert layers_at(5, 2, 5) == Layers.One
    assert layers_at(2, 2, 5) == Layers.Two


@given(st.floats(0.05, 10), st.floats(0.2, 10), st.floats(0, 25), st.floats(0, 25))
def test_layers_monotone_step_in_height(z_bot, gap, h1, h2):
    lo, hi = sorted((h1, h2))
    assert layers_at(lo, z_bot, z_bot + gap) >= layers_at(hi, z_bot, z_bot + gap)


def test_attempt_interval_scalar_and_vector_agree():
    zb = np.array([1.0, -3.0, 2.5])
    gp = np.array([3.0, 3.0, -5.0])
    eb = np.array([0.1, 0.0, -0.3])
    eg = np.array([0.2, 0.0, 0.0])
    vb, vt = attempt_interval(THIN, zb, gp, eb, eg)
    for i in range(3):
        b, t = attempt_interval(THIN, zb[i], gp[i], eb[i], eg[i])
        assert (b, t) == (vb[i], vt[i])
        assert t - b >= DEFAULT_EFFECTS.min_layer_gap - 1e-12
        assert b > 0


def test_attempt_grasp_outcome_consistent():
    s = flat_bag(THIN, 0)
    rng = np.random.default_rng(0)
    for h in np.linspace(0, 12, 40):
        g = attempt_grasp(s, tuple(s.center), float(h), rng)
        assert g.z_top > g.z_bot > 0
        assert g.layers == layers_at(h, g.z_bot, g.z_top)
        if not g.held:
            assert g.layers in (Layers.Zero, Layers.One)


def test_attempt_grasp_outside_workspace_raises():
    s = flat_bag(THIN, 0)
    with pytest.raises(OutOfWorkspace):
        attempt_grasp(s, (-10.0, -10.0), 3.0, np.random.default_rng(0))


def test_grasp_distribution_trends_with_height():
    # the same generator seed at every height gives common random numbers
    states = [flat_bag(THIN, seed) for seed in range(50)]
    p_zero, p_two = [], []
    for h in range(1, 11):
        rng = np.random.default_rng(99)
        counts = np.zeros(3)
        for s in states:
            p = tuple(s.center)
            for _ in range(200):
                counts[attempt_grasp(s, p, float(h), rng).layers] += 1
        p_zero.append(counts[0] / counts.sum())
        p_two.append(counts[2] / counts.sum())
    assert all(b >= a for a, b in zip(p_zero, p_zero[1:]))
    assert all(b <= a for a, b in zip(p_two, p_two[1:]))
    assert p_zero[-1] > p_zero[0] and p_two[0] > p_two[-1]


# -- cyclic trajectory --------------------------------------------------------------------------


def test_cyclic_trajectory_nearly_restores_state():
    rng = np.random.default_rng(0)
    for seed in range(100):
        s = flat_bag(THIN, seed)
        g = attempt_grasp(s, tuple(s.center), 4.0, rng)
        t, trace = execute_cyclic_trajectory(s, g, rng)
        assert t.area == pytest.approx(s.area, rel=0.03)
        assert abs(t.loosened - s.loosened) <= 0.02 + 1e-12
        moved = np.hypot(*(t.footprint.vertices - s.footprint.vertices).T)
        assert moved.max() <= 0.5
        assert trace.true_layers == g.layers
        assert trace.duration_s == 5.0


def test_fifteen_trajectories_drift_bounded():
    rng = np.random.default_rng(1)
    for seed in range(20):
        s0 = s = flat_bag(THIN, seed)
        for _ in range(15):
            g = attempt_grasp(s, tuple(s.center), 4.0, rng)
            s, _ = execute_cyclic_trajectory(s, g, rng)
        assert abs(s.area / s0.area - 1) <= 0.10


# -- insertion and lifting ----------------------------------------------------------------------


def test_top_insert_at_opening_centroid():
    fx = replace(DEFAULT_EFFECTS, place_sd=0.0)
    s = _upright(THIN, opening_frac=0.4, aspect=1.2)
    t, n = insert_objects(s, 1, "Top", tuple(s.opening_poly.centroid), np.random.default_rng(0), effects=fx)
    assert n == 1 and t.objects_inside == 1


def test_top_insert_outside_opening():
    fx = replace(DEFAULT_EFFECTS, place_sd=0.0)
    s = _upright(THIN, opening_frac=0.1, aspect=1.2)
    far = tuple(np.asarray(s.center) + 100.0)
    _, n = insert_objects(s, 3, "Top", far, np.random.default_rng(0), effects=fx)
    assert n == 0


def test_top_insert_needs_upright_bag():
    s = replace(_upright(THIN), upside=Upside.Side)
    _, n = insert_objects(s, 6, "Top", tuple(s.center), np.random.default_rng(0))
    assert n == 0


def test_side_insert_needs_held_grasp():
    s = flat_bag(THIN, 0)
    with pytest.raises(NoGraspHeld):
        insert_objects(s, 6, "Side", tuple(s.center), np.random.default_rng(0))
    with pytest.raises(ValueError):
        insert_objects(s, 0, "Top", tuple(s.center), np.random.default_rng(0))


def test_side_insert_rate_on_aligned_thin_plastic():
    s = flat_bag(THIN, 0, opening_dir=0.0, dir_sd_deg=0.0)
    rng = np.random.default_rng(0)
    total = sum(insert_objects(s, 6, "Side", (0, 0), rng, grasp_held=True)[1] for _ in range(10_000))
    assert 0.70 <= total / 60_000 <= 0.90


def test_side_insert_misaligned_is_worse():
    rng = np.random.default_rng(0)
    ok = flat_bag(THIN, 0, opening_dir=0.0, dir_sd_deg=0.0)
    bad = flat_bag(THIN, 0, opening_dir=math.pi / 2, dir_sd_deg=0.0)
    a = sum(insert_objects(ok, 6, "Side", (0, 0), rng, grasp_held=True)[1] for _ in range(2000))
    b = sum(insert_objects(bad, 6, "Side", (0, 0), rng, grasp_held=True)[1] for _ in range(2000))
    assert b < a


def test_lift_at_handles_keeps_everything():
    s = replace(flat_bag(THIN, 0), objects_inside=6)
    h1, h2 = s.handle_centers()
    for seed in range(20):
        assert lift_bag(s, h1, h2, np.random.default_rng(seed)) == 6


def test_lift_at_bottom_corners_keeps_about_thirty_percent():
    s = replace(flat_bag(THIN, 0), objects_inside=6)
    hu, hv = s.half_extents_local
    c1, c2 = s.world([(-hu, hv), (-hu, -hv)])
    rng = np.random.default_rng(0)
    kept = sum(lift_bag(s, c1, c2, rng) for _ in range(10_000))
    assert kept / 60_000 == pytest.approx(0.3, abs=0.015)


def test_lift_empty_bag():
    s = flat_bag(THIN, 0)
    assert lift_bag(s, (0, 0), (1, 1), np.random.default_rng(0)) == 0


def test_grasp_outcome_fields():
    g = GraspOutcome(Layers.One, True, 2.0, 5.0)
    assert g.z_top > g.z_bot
