"""Single-layer grasping by interactive perception.

The robot grasps at a height, runs a closed trajectory, asks a video
classifier how many layers moved, and adjusts the height until it holds
exactly one layer. The classifier is modelled by a confusion matrix over
the true layer count.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .bagsim import (
    DEFAULT_EFFECTS, BagState, EffectParams, GraspOutcome, InteractionTrace, Layers,
    attempt_grasp, execute_cyclic_trajectory,
)
from .percept import (
    DEFAULT_RENDER, GraspMode, ModeUnavailable, PerceptionNoise, RenderParams,
    perceived_grasp_height, render_observation, select_grasp_point,
)


class BracketCollapse(RuntimeError):
    """Bisection interval shrank below resolution without finding one layer."""


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    """Row = true layers (0/1/2), column = predicted layers."""

    confusion: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=float)
        if c.shape != (3, 3):
            raise ValueError("confusion must be 3x3")
        if (c < 0).any() or not np.allclose(c.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")
        c.setflags(write=False)
        object.__setattr__(self, "confusion", c)

    @classmethod
    def identity(cls) -> "ClassifierModel":
        return cls(np.eye(3))

    @classmethod
    def symmetric(cls, error: float) -> "ClassifierModel":
        """Accuracy ``1 - error`` on every class, errors split evenly."""
        c = np.full((3, 3), error / 2)
        np.fill_diagonal(c, 1.0 - error)
        return cls(c)

    @classmethod
    def bag_like(cls, error: float) -> "ClassifierModel":
        """Accuracy ``1 - error``; a still gripper is mostly mistaken for two layers, and the reverse."""
        e = error
        return cls(np.array([
            [1 - e, 0.2 * e, 0.8 * e],
            [e / 2, 1 - e, e / 2],
            [0.2 * e, 0.8 * e, 1 - e],
        ]))

    @classmethod
    def from_recalls(cls, r0: float, r1: float, r2: float) -> "ClassifierModel":
        """Garment presets: missed 2-layer grasps look like 1 layer, other misses split evenly."""
        return cls(np.array([
            [r0, (1 - r0) / 2, (1 - r0) / 2],
            [(1 - r1) / 2, r1, (1 - r1) / 2],
            [0.0, 1 - r2, r2],
        ]))

    @property
    def recalls(self) -> tuple[float, float, float]:
        return tuple(float(x) for x in np.diag(self.confusion))


CLASSIFIER_PRESETS: dict[str, ClassifierModel] = {
    "identity": ClassifierModel.identity(),
    # 90% per-class accuracy; a still bag rarely looks like a one-layer lift
    "bag": ClassifierModel.bag_like(0.1),
    "FoldedCloth": ClassifierModel.from_recalls(1.00, 1.00, 0.62),
    "Dress": ClassifierModel.from_recalls(1.00, 0.75, 0.75),
    "Hat": ClassifierModel.from_recalls(1.00, 0.83, 0.25),
}


def classify(trace: InteractionTrace, m: ClassifierModel, rng: np.random.Generator) -> int:
    row = m.confusion[int(trace.true_layers)]
    return int(rng.choice(3, p=row))


class Strategy(str, enum.Enum):
    FixedStep = "FixedStep"
    DecayingStep = "DecayingStep"
    Bisection = "Bisection"


class H0Rule(str, enum.Enum):
    PerceivedDepth = "PerceivedDepth"
    Fixed = "Fixed"


@dataclass(frozen=True)
class SlipParams:
    h0_rule: H0Rule = H0Rule.PerceivedDepth
    h_min: float = 2.0
    h_fixed: float = 10.0
    dh_minus: float = 1.0
    dh_plus: float = 3.0
    strategy: Strategy = Strategy.FixedStep
    gamma: float = 0.8
    trial_max: int = 3
    iter_max: int = 5
    total_iteration_cap: int = 15
    h_floor: float = 0.0
    h_ceiling: float = 20.0
    bisection_resolution: float = 0.1
    rederive_h0_per_trial: bool = False

    def __post_init__(self):
        object.__setattr__(self, "h0_rule", H0Rule(self.h0_rule))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.dh_minus <= 0 or self.dh_plus <= 0:
            raise ValueError("height steps must be positive")
        if self.trial_max < 1 or self.iter_max < 0 or self.total_iteration_cap < 0:
            raise ValueError("invalid iteration caps")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if self.h_ceiling <= self.h_floor:
            raise ValueError("h_ceiling must exceed h_floor")


class HeightAdjuster:
    """Stateful height-update rule. Subclasses implement ``_step``."""

    def __init__(self, params: SlipParams):
        self.params = params

    def clamp(self, h: float) -> float:
        return min(max(h, self.params.h_floor), self.params.h_ceiling)

    def next(self, h: float, predicted: int) -> float:
        if predicted not in (0, 2):
            raise ValueError("only 0- and 2-layer predictions move the gripper")
        return self.clamp(self._step(h, predicted))

    def _step(self, h: float, predicted: int) -> float:
        raise NotImplementedError


class FixedStep(HeightAdjuster):
    def _step(self, h, predicted):
        return h - self.params.dh_minus if predicted == 0 else h + self.params.dh_plus


class DecayingStep(HeightAdjuster):
    def __init__(self, params: SlipParams):
        super().__init__(params)
        self.down = params.dh_minus
        self.up = params.dh_plus

    def _step(self, h, predicted):
        if predicted == 0:
            h, self.down = h - self.down, self.down * self.params.gamma
        else:
            h, self.up = h + self.up, self.up * self.params.gamma
        return h


class Bisection(HeightAdjuster):
    def __init__(self, params: SlipParams, lo: float | None = None, hi: float | None = None):
        super().__init__(params)
        self.lo = params.h_floor if lo is None else lo
        self.hi = params.h_ceiling if hi is None else hi

    def _step(self, h, predicted):
        if predicted == 0:
            self.hi = h
        else:
            self.lo = h
        if self.hi - self.lo < self.params.bisection_resolution:
            raise BracketCollapse(f"bracket ({self.lo:.3f}, {self.hi:.3f}) collapsed")
        return (self.lo + self.hi) / 2


def make_adjuster(params: SlipParams) -> HeightAdjuster:
    return {Strategy.FixedStep: FixedStep, Strategy.DecayingStep: DecayingStep,
            Strategy.Bisection: Bisection}[params.strategy](params)


def next_height(adjuster: HeightAdjuster, h: float, predicted: int) -> float:
    return adjuster.next(h, predicted)


@dataclass(frozen=True)
class SlipStep:
    trial: int
    iteration: int
    h: float
    predicted: int
    true_layers: int
    held: bool


@dataclass
class SlipResult:
    success: bool
    iterations_used: int
    trials_used: int
    height_trace: list[SlipStep] = field(default_factory=list)
    final_grasp: GraspOutcome | None = None
    false_accept: bool = False
    outcome: str = "exhausted"   # success | false_accept | exhausted | bracket_collapse | no_rim

    @property
    def heights(self) -> list[float]:
        return [s.h for s in self.height_trace]

    def to_dict(self) -> dict:
        g = self.final_grasp
        return {
            "success": self.success,
            "iterations_used": self.iterations_used,
            "trials_used": self.trials_used,
            "false_accept": self.false_accept,
            "outcome": self.outcome,
            "height_trace": [asdict(s) for s in self.height_trace],
            "final_grasp": None if g is None else {
                "layers": int(g.layers), "held": g.held, "z_bot": g.z_bot, "z_top": g.z_top,
                "x": g.point.x, "y": g.point.y, "h": g.height},
        }


def slip_loop(sample_location: Callable[[int], object],
              initial_height: Callable[[object], float],
              grasp_and_move: Callable[[object, float], tuple[GraspOutcome, InteractionTrace]],
              params: SlipParams, m: ClassifierModel, rng: np.random.Generator) -> SlipResult:
    """Core grasp / move / classify / adjust loop, independent of how grasps are simulated.

    ``sample_location(trial)`` may raise ``ModeUnavailable``; such a trial is
    spent without iterations. The height carries over between trials unless
    ``params.rederive_h0_per_trial`` is set.
    """
    adjuster = make_adjuster(params)
    result = SlipResult(False, 0, 0)
    h: float | None = None
    located_any = False
    for trial in range(params.trial_max):
        if result.iterations_used >= params.total_iteration_cap:
            break
        result.trials_used += 1
        try:
            loc = sample_location(trial)
        except ModeUnavailable:
            continue
        located_any = True
        if h is None or params.rederive_h0_per_trial:
            h = adjuster.clamp(initial_height(loc))
        for it in range(params.iter_max):
            if result.iterations_used >= params.total_iteration_cap:
                break
            g, trace = grasp_and_move(loc, h)
            n = classify(trace, m, rng)
            result.iterations_used += 1
            result.height_trace.append(SlipStep(trial, it, h, n, int(g.layers), g.held))
            result.final_grasp = g
            if n == 1:
                if g.layers == Layers.One and g.held:
                    result.success = True
                    result.outcome = "success"
                    return result
                if g.layers != Layers.One:
                    result.false_accept = True
                    result.outcome = "false_accept"
                    return result
                continue  # one layer but it slipped out: retry at the same height
            try:
                h = adjuster.next(h, n)
            except BracketCollapse:
                result.outcome = "bracket_collapse"
                return result
    if not located_any:
        raise ModeUnavailable("rim never visible across all trials")
    return result


def run_slip(s: BagState, grasp_mode: GraspMode | str, params: SlipParams, m: ClassifierModel,
             noise: PerceptionNoise, rng: np.random.Generator,
             effects: EffectParams = DEFAULT_EFFECTS,
             render: RenderParams = DEFAULT_RENDER) -> tuple[BagState, SlipResult]:
    """Single-layer grasp loop on a simulated bag. Returns the final state and the full trace."""
    state = [s]
    obs = {}

    def sample_location(trial):
        o = render_observation(state[0], noise, rng, render)
        p = select_grasp_point(o, grasp_mode, rng)
        obs["last"] = (o, p)
        return p

    def initial_height(p):
        if params.h0_rule == H0Rule.Fixed:
            return params.h_fixed
        o, _ = obs["last"]
        return perceived_grasp_height(o, p, params.h_min)

    def grasp_and_move(p, h):
        g = attempt_grasp(state[0], p, h, rng, effects)
        state[0], trace = execute_cyclic_trajectory(state[0], g, rng, effects)
        return g, trace

    result = slip_loop(sample_location, initial_height, grasp_and_move, params, m, rng)
    return state[0], result


def static_interval_slip(z_bot: float, z_top: float, h0: float, params: SlipParams,
                         m: ClassifierModel, rng: np.random.Generator) -> SlipResult:
    """SLIP against a fixed layer interval: no geometry, no jitter, no slip-out."""

    def grasp_and_move(_, h):
        layers = Layers.Zero if h > z_top else Layers.One if h > z_bot else Layers.Two
        g = GraspOutcome(layers, layers != Layers.Zero, z_bot, z_top, height=h)
        return g, InteractionTrace(layers, g.held, 5.0, 50.0)

    return slip_loop(lambda t: None, lambda _: h0, grasp_and_move, params, m, rng)


def iteration_bound(h0: float, z_bot: float, dh_minus: float) -> int:
    return int(math.ceil((h0 - z_bot) / dh_minus)) + 1
