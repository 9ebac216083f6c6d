"""Aggregate simulation configuration with dotted-key overrides.

Every calibration constant in the package is reachable from ``SimConfig``,
for example ``slip.dh_minus``, ``effects.p_side_base``,
``noise.Drawstring.hole_depth_overshoot`` or ``materials.HandBag.slip_out_prob``.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from .bagsim import DEFAULT_EFFECTS, MATERIALS, EffectParams, Material, MaterialKind
from .percept import DEFAULT_RENDER, PerceptionNoise, RenderParams
from .slip import CLASSIFIER_PRESETS, ClassifierModel, SlipParams


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path that failed."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class FlattenThresholds:
    p_small: float = 0.45
    p_large: float = 0.85
    alpha: float = math.radians(15.0)

    def __post_init__(self):
        if not 0 < self.p_small < self.p_large <= 1:
            raise ValueError("need 0 < p_small < p_large <= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


class ElongationGate(str, enum.Enum):
    """How E_CH is compared against its gate: rounder openings pass under AtMost."""
    AtMost = "AtMost"
    AtLeast = "AtLeast"


@dataclass(frozen=True)
class AutoBagThresholds:
    S1: float = 0.55
    A1: float = 0.15
    E1: float = 4.5
    A2: float = 0.45
    E2: float = 2.88
    E_gate: ElongationGate = ElongationGate.AtMost

    def __post_init__(self):
        object.__setattr__(self, "E_gate", ElongationGate(self.E_gate))
        if min(self.S1, self.A1, self.E1, self.A2, self.E2) <= 0:
            raise ValueError("thresholds must be positive")
        tighter_E = self.E2 < self.E1 if self.E_gate == ElongationGate.AtMost else self.E2 > self.E1
        if not (self.A2 > self.A1 and tighter_E):
            raise ValueError("stage 2 gate must be stricter than stage 1")

    def elongation_ok(self, E: float, gate: float) -> bool:
        return E <= gate if self.E_gate == ElongationGate.AtMost else E >= gate


@dataclass(frozen=True)
class BaselineParams:
    handbag_handle_error: float = 0.35
    pinpull_separation_prob: float = 0.05
    fling_one_layer_prob: float = 0.5
    fling_survive_prob: float = 0.4
    handle_insert_scale: float = 0.9


@dataclass(frozen=True)
class PolicyParams:
    action_cap: int = 30
    recenter_margin: float = 0.0       # recenter when any vertex leaves the workspace shrunk by this (cm)
    dilate_align_tol: float = math.radians(15.0)
    stage2_align_tol: float = math.radians(15.0)
    sideways_angle: float = -math.pi / 2   # forward (+y) to lateral (+x)
    dilate_open_d: float = 10.0
    dilate_open_torque: float = 0.02
    min_rim_pixels: int = 3


def default_noise(kind: MaterialKind) -> PerceptionNoise:
    if kind == MaterialKind.Drawstring:
        return PerceptionNoise(hole_depth_overshoot=4.0)
    return PerceptionNoise()


UNSEEN_NOISE = PerceptionNoise(rim_recall=0.6)


@dataclass(frozen=True)
class SimConfig:
    effects: EffectParams = DEFAULT_EFFECTS
    render: RenderParams = DEFAULT_RENDER
    slip: SlipParams = SlipParams()
    classifier: str = "bag"
    flatten: FlattenThresholds = FlattenThresholds()
    autobag: AutoBagThresholds = AutoBagThresholds()
    baseline: BaselineParams = BaselineParams()
    policy: PolicyParams = PolicyParams()
    n_objects: int = 6
    materials: Mapping[str, Material] = field(
        default_factory=lambda: {k.value: m for k, m in MATERIALS.items()})
    noise: Mapping[str, PerceptionNoise] = field(
        default_factory=lambda: {k.value: default_noise(k) for k in MaterialKind})

    def material(self, kind: MaterialKind | str) -> Material:
        return self.materials[MaterialKind(kind).value]

    def noise_for(self, kind: MaterialKind | str) -> PerceptionNoise:
        return self.noise[MaterialKind(kind).value]

    def classifier_model(self) -> ClassifierModel:
        return CLASSIFIER_PRESETS[self.classifier]


def _coerce(key: str, value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(key, f"expected bool, got {value!r}")
    if isinstance(current, enum.Enum):
        try:
            return type(current)(value)
        except ValueError as e:
            raise ConfigError(key, str(e)) from None
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(key, f"expected int, got {value!r}") from None
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(key, f"expected int, got {value!r}")
        return value
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected number, got {value!r}") from None
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(current):
            raise ConfigError(key, f"expected sequence of length {len(current)}")
        return tuple(_coerce(key, v, c) for v, c in zip(value, current))
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected string, got {value!r}")
        return value
    raise ConfigError(key, "not an overridable leaf")


@dataclass(frozen=True)
class _Leaf:
    value: Any
    key: str


def _first_key(tree: Mapping[str, Any]) -> str:
    node = tree[min(tree)]
    return node.key if isinstance(node, _Leaf) else _first_key(node)


def _apply(obj: Any, tree: Mapping[str, Any], prefix: str) -> Any:
    """Replace every leaf of ``tree`` in ``obj``, validating each dataclass once."""
    updates = {}
    for head in sorted(tree):
        node = tree[head]
        full = node.key if isinstance(node, _Leaf) else prefix + head
        if isinstance(obj, Mapping):
            if head not in obj:
                raise ConfigError(full, f"unknown key {head!r}")
            cur = obj[head]
        elif dataclasses.is_dataclass(obj):
            if head not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(full, f"unknown key {head!r}")
            cur = getattr(obj, head)
        else:
            raise ConfigError(full, f"cannot descend into {type(obj).__name__}")
        if isinstance(node, _Leaf):
            updates[head] = _coerce(node.key, node.value, cur)
        else:
            updates[head] = _apply(cur, node, full + ".")
    if isinstance(obj, Mapping):
        return {**obj, **updates}
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as e:
        raise ConfigError(_first_key(tree), str(e)) from None


def apply_overrides(cfg: SimConfig, overrides: Mapping[str, Any]) -> SimConfig:
    """Return a copy of ``cfg`` with each dotted key replaced.

    All keys below one dataclass are set together before it is validated, so a
    group such as ``autobag.E1`` and ``autobag.E2`` may move past each other.
    """
    tree: dict[str, Any] = {}
    for key in sorted(overrides):
        parts = key.split(".")
        if not key or any(not p for p in parts):
            raise ConfigError(key, "malformed key")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if isinstance(node, _Leaf):
                raise ConfigError(key, "conflicts with a shorter key")
        if parts[-1] in node:
            raise ConfigError(key, "conflicts with a longer key")
        node[parts[-1]] = _Leaf(overrides[key], key)
    cfg = _apply(cfg, tree, "")
    if cfg.classifier not in CLASSIFIER_PRESETS:
        raise ConfigError("classifier", f"unknown preset {cfg.classifier!r}")
    return cfg


def flatten_keys(obj: Any, prefix: str = "") -> dict[str, Any]:
    """All overridable leaves as a flat dotted map (used by ``presets``)."""
    out: dict[str, Any] = {}
    if isinstance(obj, Mapping):
        items = obj.items()
    elif dataclasses.is_dataclass(obj):
        items = ((f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj))
    else:
        return {prefix: obj}
    for k, v in items:
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, Mapping) or dataclasses.is_dataclass(v):
            out.update(flatten_keys(v, key))
        else:
            out[key] = v
    return out


__all__ = [
    "AutoBagThresholds", "BaselineParams", "ConfigError", "ElongationGate", "FlattenThresholds",
    "PolicyParams",
    "SimConfig", "UNSEEN_NOISE", "apply_overrides", "default_noise", "flatten_keys",
]
