import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slipbag.bagsim import (MATERIALS, GraspOutcome, InteractionTrace, Layers, MaterialKind,
                            Upside, flat_bag)
from slipbag.percept import NOISELESS, ModeUnavailable
from slipbag.slip import (CLASSIFIER_PRESETS, Bisection, BracketCollapse, ClassifierModel,
                          DecayingStep, FixedStep, SlipParams, Strategy, classify, iteration_bound,
                          make_adjuster, next_height, run_slip, slip_loop, static_interval_slip)

IDENT = ClassifierModel.identity()
LONG = SlipParams(trial_max=1, iter_max=50, total_iteration_cap=50)


def _trace(layers):
    return InteractionTrace(Layers(layers), layers != 0, 5.0, 50.0)


# -- classifier ---------------------------------------------------------------------------------


def test_identity_classifier():
    rng = np.random.default_rng(0)
    for true in (0, 1, 2):
        assert classify(_trace(true), IDENT, rng) == true


def _freq(model, true, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    return np.bincount([classify(_trace(true), model, rng) for _ in range(n)], minlength=3) / n


def test_folded_cloth_two_layer_recall():
    assert _freq(CLASSIFIER_PRESETS["FoldedCloth"], 2)[2] == pytest.approx(0.62, abs=0.02)


def test_bag_preset_accuracy():
    for true in (0, 1, 2):
        assert _freq(CLASSIFIER_PRESETS["bag"], true, seed=true)[true] == pytest.approx(0.90, abs=0.02)


def test_confusion_validation():
    with pytest.raises(ValueError):
        ClassifierModel(np.eye(2))
    with pytest.raises(ValueError):
        ClassifierModel(np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        ClassifierModel(np.array([[1.1, -0.1, 0], [0, 1, 0], [0, 0, 1]]))


@given(st.floats(0, 1))
def test_constructed_models_are_row_stochastic(e):
    for m in (ClassifierModel.symmetric(e), ClassifierModel.bag_like(e),
              ClassifierModel.from_recalls(e, 1 - e, e)):
        np.testing.assert_allclose(m.confusion.sum(axis=1), 1.0, atol=1e-12)
        assert (m.confusion >= 0).all()


def test_garment_recalls():
    assert CLASSIFIER_PRESETS["FoldedCloth"].recalls == (1.0, 1.0, 0.62)
    assert CLASSIFIER_PRESETS["Dress"].recalls == (1.0, 0.75, 0.75)
    assert CLASSIFIER_PRESETS["Hat"].recalls == (1.0, 0.83, 0.25)


# -- height updates -----------------------------------------------------------------------------


def test_fixed_step_examples():
    adj = FixedStep(SlipParams())
    assert next_height(adj, 10.0, 0) == 9.0
    assert next_height(adj, 10.0, 2) == 13.0


def test_bisection_example():
    adj = Bisection(SlipParams(), lo=2.0, hi=10.0)
    assert next_height(adj, 6.0, 0) == 4.0
    assert (adj.lo, adj.hi) == (2.0, 6.0)


def test_bisection_collapse():
    adj = Bisection(SlipParams(), lo=5.0, hi=5.05)
    with pytest.raises(BracketCollapse):
        adj.next(5.02, 0)


def test_decaying_steps_shrink():
    adj = DecayingStep(SlipParams(gamma=0.5))
    h = adj.next(10.0, 0)
    h = adj.next(h, 0)
    assert h == pytest.approx(10.0 - 1.0 - 0.5)
    assert adj.next(10.0, 2) == pytest.approx(13.0)
    assert adj.next(10.0, 2) == pytest.approx(11.5)


def test_heights_are_clamped():
    adj = FixedStep(SlipParams())
    assert adj.next(0.5, 0) == 0.0
    assert adj.next(19.0, 2) == 20.0


def test_one_layer_prediction_does_not_move():
    with pytest.raises(ValueError):
        FixedStep(SlipParams()).next(5.0, 1)


def test_params_validation():
    with pytest.raises(ValueError):
        SlipParams(dh_minus=0.0)
    with pytest.raises(ValueError):
        SlipParams(gamma=1.0)
    with pytest.raises(ValueError):
        SlipParams(trial_max=0)
    assert SlipParams().trial_max * SlipParams().iter_max == SlipParams().total_iteration_cap == 15


# -- hand-traced runs ---------------------------------------------------------------------------


def test_trace_descends_from_ten():
    r = static_interval_slip(2.0, 5.0, 10.0, LONG, IDENT, np.random.default_rng(0))
    assert r.success and r.iterations_used == 6
    assert r.heights == [10.0, 9.0, 8.0, 7.0, 6.0, 5.0]
    assert [s.predicted for s in r.height_trace] == [0, 0, 0, 0, 0, 1]


def test_trace_starts_below_bottom_layer():
    r = static_interval_slip(2.0, 5.0, 1.0, LONG, IDENT, np.random.default_rng(0))
    assert r.success and r.iterations_used == 2
    assert r.heights == [1.0, 4.0]
    assert r.height_trace[0].predicted == 2


def test_trace_single_iteration_cap():
    p = SlipParams(trial_max=1, iter_max=1)
    r = static_interval_slip(2.0, 5.0, 10.0, p, IDENT, np.random.default_rng(0))
    assert not r.success and r.iterations_used == 1 and r.trials_used == 1
    assert r.outcome == "exhausted"


def _rigid_bag(z_bot, gap):
    mat = replace(MATERIALS[MaterialKind.ThinPlastic], attempt_sd=0.0, gap_attempt_sd=0.0,
                  slip_1layer_prob=0.0)
    return replace(flat_bag(mat, 0), z_bot_cfg=z_bot, gap_cfg=gap)


def test_run_slip_on_rigid_bag_matches_hand_trace():
    s = _rigid_bag(2.0, 3.0)
    p = replace(LONG, h0_rule="Fixed", h_fixed=10.0)
    _, r = run_slip(s, "RimCenterForSlip", p, IDENT, NOISELESS, np.random.default_rng(0))
    assert r.heights == [10.0, 9.0, 8.0, 7.0, 6.0, 5.0]
    assert r.success and r.final_grasp.layers == Layers.One and r.final_grasp.held


def test_run_slip_without_rim_is_unavailable():
    s = replace(_rigid_bag(2.0, 3.0), upside=Upside.Down)
    with pytest.raises(ModeUnavailable):
        run_slip(s, "RimCenterForSlip", SlipParams(), IDENT, NOISELESS, np.random.default_rng(0))


def test_run_slip_perceived_depth_start():
    s = _rigid_bag(2.0, 3.0)
    _, r = run_slip(s, "RimCenterForSlip", SlipParams(h_min=2.0), IDENT, NOISELESS,
                    np.random.default_rng(0))
    # noiseless depth is the top surface plus wrinkles, never below it
    assert r.heights[0] >= 5.0 - 1e-9
    assert r.success


# -- properties ---------------------------------------------------------------------------------


instances = st.tuples(st.floats(0.1, 8.0), st.floats(1.0, 8.0), st.floats(0.0, 12.0))


@settings(max_examples=300, deadline=None)
@given(instances)
def test_perfect_classifier_converges_within_bound(inst):
    z_bot, gap, above = inst
    z_top = z_bot + gap
    h0 = min(z_top + above, 20.0)
    r = static_interval_slip(z_bot, z_top, h0, LONG, IDENT, np.random.default_rng(0))
    assert r.success
    assert r.iterations_used <= iteration_bound(h0, z_bot, 1.0)


@settings(max_examples=200, deadline=None)
@given(instances, st.sampled_from(list(Strategy)), st.floats(0, 0.4), st.integers(0, 2 ** 32 - 1))
def test_trace_accounting(inst, strategy, err, seed):
    z_bot, gap, above = inst
    p = SlipParams(strategy=strategy)
    r = static_interval_slip(z_bot, z_bot + gap, min(z_bot + gap + above, 20.0), p,
                             ClassifierModel.symmetric(err), np.random.default_rng(seed))
    assert r.iterations_used == len(r.height_trace) <= p.total_iteration_cap
    assert r.trials_used <= p.trial_max
    for t in range(p.trial_max):
        assert sum(s.trial == t for s in r.height_trace) <= p.iter_max
    if r.success:
        assert r.height_trace[-1].true_layers == 1 and r.height_trace[-1].held
        assert r.final_grasp.layers == Layers.One
    if r.false_accept:
        assert not r.success and r.height_trace[-1].true_layers != 1
    assert all(0.0 <= s.h <= 20.0 for s in r.height_trace)
    if strategy == Strategy.FixedStep:
        for a, b in zip(r.height_trace, r.height_trace[1:]):
            if a.predicted == 0:
                assert b.h == pytest.approx(max(a.h - 1.0, 0.0))
            elif a.predicted == 2:
                assert b.h == pytest.approx(min(a.h + 3.0, 20.0))


def test_false_accept_is_reported():
    always_one = ClassifierModel(np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]], dtype=float))
    r = static_interval_slip(2.0, 5.0, 10.0, LONG, always_one, np.random.default_rng(0))
    assert not r.success and r.false_accept and r.outcome == "false_accept"
    assert r.iterations_used == 1


def test_slipped_one_layer_grasp_retries_same_height():
    seq = iter([False, True])

    def grasp(_, h):
        held = next(seq)
        g = GraspOutcome(Layers.One, held, 2.0, 5.0, height=h)
        return g, InteractionTrace(Layers.One, held, 5.0, 50.0)

    r = slip_loop(lambda t: None, lambda _: 4.0, grasp, LONG, IDENT, np.random.default_rng(0))
    assert r.success and r.heights == [4.0, 4.0]


def _scripted(z_bot, z_top, lies):
    """Grasps against a fixed interval; iteration ``k`` in ``lies`` reports a wrong count."""
    k = [0]

    def grasp(_, h):
        layers = Layers.Zero if h > z_top else Layers.One if h > z_bot else Layers.Two
        seen = lies.get(k[0], layers)
        k[0] += 1
        g = GraspOutcome(layers, layers != Layers.Zero, z_bot, z_top, height=h)
        return g, InteractionTrace(Layers(seen), g.held, 5.0, 50.0)
    return grasp


def test_bisection_succeeds_with_correct_bracket():
    p = replace(LONG, strategy=Strategy.Bisection, iter_max=15, total_iteration_cap=15)
    r = slip_loop(lambda t: None, lambda _: 10.0, _scripted(2.0, 5.0, {}), p, IDENT,
                  np.random.default_rng(0))
    assert r.success


def test_one_misclassification_breaks_bisection_but_not_fixed_step():
    # the first grasp misses but is read as two layers
    lies = {0: 2}
    p = SlipParams(trial_max=1, iter_max=15, total_iteration_cap=15)
    fixed = slip_loop(lambda t: None, lambda _: 10.0, _scripted(2.0, 5.0, lies),
                      replace(p, strategy=Strategy.FixedStep), IDENT, np.random.default_rng(0))
    bis = slip_loop(lambda t: None, lambda _: 10.0, _scripted(2.0, 5.0, lies),
                    replace(p, strategy=Strategy.Bisection), IDENT, np.random.default_rng(0))
    assert fixed.success
    assert not bis.success
    assert all(s.h >= 10.0 for s in bis.height_trace)


def test_height_persists_across_trials():
    p = SlipParams(trial_max=3, iter_max=2)
    r = static_interval_slip(2.0, 5.0, 10.0, p, IDENT, np.random.default_rng(0))
    assert r.heights == [10.0, 9.0, 8.0, 7.0, 6.0, 5.0]
    assert [s.trial for s in r.height_trace] == [0, 0, 1, 1, 2, 2]


def test_rederive_option_restarts_height():
    p = SlipParams(trial_max=2, iter_max=2, rederive_h0_per_trial=True)
    r = static_interval_slip(2.0, 5.0, 10.0, p, IDENT, np.random.default_rng(0))
    assert r.heights == [10.0, 9.0, 10.0, 9.0]


def test_zero_iterations_never_grasps():
    r = static_interval_slip(2.0, 5.0, 4.0, SlipParams(iter_max=0), IDENT, np.random.default_rng(0))
    assert not r.success and r.iterations_used == 0


def test_result_serializes_to_json():
    r = static_interval_slip(2.0, 5.0, 7.0, LONG, IDENT, np.random.default_rng(0))
    d = json.loads(json.dumps(r.to_dict()))
    assert d["success"] is True
    assert [s["h"] for s in d["height_trace"]] == [7.0, 6.0, 5.0]
    assert d["final_grasp"]["layers"] == 1


def test_make_adjuster_dispatch():
    assert isinstance(make_adjuster(SlipParams(strategy="Bisection")), Bisection)
    assert isinstance(make_adjuster(SlipParams(strategy="DecayingStep")), DecayingStep)
    assert iteration_bound(10.0, 2.0, 1.0) == 9
    assert math.isclose(iteration_bound(2.5, 2.0, 1.0), 2)
