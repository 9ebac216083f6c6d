"""Monte Carlo experiment runner: seeded trials, aggregation and report files.

Every trial gets its own seed derived from ``(base_seed, policy, material, i)``,
so results do not depend on which other cells an experiment contains or on
how trials are scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from statistics import NormalDist
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .bagsim import BAG_KINDS, MaterialKind, _sample_layers, attempt_interval, layers_at
from .config import ConfigError, SimConfig, apply_overrides
from .policy import POLICIES, EpisodeResult, FailureTag, run_episode
from .slip import ClassifierModel, SlipParams, Strategy, static_interval_slip

SCHEMA_VERSION = 1
Z95 = NormalDist().inv_cdf(0.975)

BAG_MATERIALS = tuple(k.value for k in BAG_KINDS)

BUILTIN_EXPERIMENTS: dict[str, dict[str, Any]] = {
    "table1": {
        "policies": ["SlipBagging", "PerceivedDepth", "HandleGrasp", "AutoBag"],
        "materials": list(BAG_MATERIALS),
    },
    "placement_baselines": {
        "policies": ["SlipBagging", "MinDepthPlace", "SobelPlace", "PinPullSide", "FlingOpen"],
        "materials": list(BAG_MATERIALS),
    },
    "autobag_ablation": {
        "policies": ["AutoBag", "AutoBagNoStage2"],
        "materials": ["ThinPlastic"],
    },
    "garments": {
        "policies": ["SlipOnly"],
        "materials": ["FoldedCloth", "Dress", "Hat"],
    },
}


# -- configuration ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "custom"
    policies: tuple[str, ...] = ()
    materials: tuple[str, ...] = ()
    n_trials: int = 500
    n_objects: int = 6
    base_seed: int = 0
    overrides: Mapping[str, Any] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "materials", tuple(self.materials))
        object.__setattr__(self, "overrides", dict(self.overrides))
        if not self.policies:
            raise ConfigError("policies", "at least one policy required")
        if not self.materials:
            raise ConfigError("materials", "at least one material required")
        for i, p in enumerate(self.policies):
            if p not in POLICIES:
                raise ConfigError(f"policies[{i}]", f"unknown policy {p!r}")
        for i, m in enumerate(self.materials):
            try:
                MaterialKind(m)
            except ValueError:
                raise ConfigError(f"materials[{i}]", f"unknown material {m!r}") from None
        for name in ("n_trials", "n_objects", "workers", "base_seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(name, f"expected integer, got {v!r}")
        if self.n_trials < 1:
            raise ConfigError("n_trials", "must be >= 1")
        if self.n_objects < 1:
            raise ConfigError("n_objects", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.base_seed < 0:
            raise ConfigError("base_seed", "must be non-negative")
        self.sim_config()  # rejects unknown or ill-typed override keys now

    def sim_config(self) -> SimConfig:
        for key in self.overrides:
            if not isinstance(key, str):
                raise ConfigError(str(key), "override keys must be strings")
        return apply_overrides(SimConfig(n_objects=self.n_objects), self.overrides)

    @classmethod
    def builtin(cls, name: str, **kw) -> "ExperimentConfig":
        if name not in BUILTIN_EXPERIMENTS:
            raise ConfigError("experiment", f"unknown built-in experiment {name!r}")
        return cls(experiment=name, **{**BUILTIN_EXPERIMENTS[name], **kw})

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {"experiment", "policies", "materials", "n_trials", "n_objects", "base_seed",
                 "overrides", "workers"}
        for k in d:
            if k not in known:
                raise ConfigError(str(k), "unknown config key")
        d = dict(d)
        name = d.get("experiment", "custom")
        if not isinstance(name, str):
            raise ConfigError("experiment", "expected string")
        # a built-in name fills in policies/materials that the document leaves out
        base = BUILTIN_EXPERIMENTS.get(name, {})
        for k in ("policies", "materials"):
            d.setdefault(k, base.get(k, []))
            if not isinstance(d[k], list) or not all(isinstance(x, str) for x in d[k]):
                raise ConfigError(k, "expected a list of strings")
        if not isinstance(d.get("overrides", {}), Mapping):
            raise ConfigError("overrides", "expected an object")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("<json>", str(e)) from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policies"], d["materials"] = list(self.policies), list(self.materials)
        d["overrides"] = dict(sorted(self.overrides.items()))
        return d


def trial_seed(base_seed: int, policy: str, material: str, i: int) -> int:
    """64-bit episode seed, independent of every other cell in the experiment."""
    ss = np.random.SeedSequence([base_seed, zlib.crc32(policy.encode()),
                                 zlib.crc32(material.encode()), i])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


# -- aggregation --------------------------------------------------------------------------------


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, mid - half)
    hi = 1.0 if k == n else min(1.0, mid + half)
    return lo, hi


def _frac(k: int, n: int) -> float:
    return k / n if n else 0.0


@dataclass(frozen=True)
class CellSummary:
    policy: str
    material: str
    n_trials: int
    n_reached_slip: int
    flatten_rate: float
    single_layer_rate: float          # among trials that reached the grasping stage
    mean_inserted_frac: float
    mean_contained_frac: float
    full_success_rate: float
    mean_actions: float
    failure_histogram: dict[str, int]
    ci95: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = {k: list(v) for k, v in self.ci95.items()}
        return d


def summarize_cell(policy: str, material: str, rows: Sequence[EpisodeResult]) -> CellSummary:
    n = len(rows)
    flat = sum(r.flatten_success for r in rows)
    reached = sum(r.reached_slip for r in rows)
    single = sum(r.single_layer_success for r in rows if r.reached_slip)
    full = sum(r.full_success for r in rows)
    hist = {t.value: 0 for t in FailureTag}
    for r in rows:
        hist[r.failure_tag.value] += 1
    return CellSummary(
        policy=policy, material=material, n_trials=n, n_reached_slip=reached,
        flatten_rate=flat / n,
        single_layer_rate=single / reached if reached else 0.0,
        mean_inserted_frac=sum(_frac(r.objects_inserted, r.n_objects) for r in rows) / n,
        mean_contained_frac=sum(_frac(r.objects_contained, r.n_objects) for r in rows) / n,
        full_success_rate=full / n,
        mean_actions=sum(r.flatten_actions for r in rows) / n,
        failure_histogram=hist,
        ci95={
            "flatten_rate": wilson_interval(flat, n),
            "single_layer_rate": wilson_interval(single, reached),
            "full_success_rate": wilson_interval(full, n),
        },
    )


@dataclass(frozen=True)
class SummaryTable:
    cells: tuple[CellSummary, ...]

    def cell(self, policy: str, material: str) -> CellSummary:
        for c in self.cells:
            if c.policy == policy and c.material == material:
                return c
        raise KeyError((policy, material))

    def to_json(self, config: ExperimentConfig) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "config": config.to_dict(),
               "cells": [c.to_dict() for c in self.cells]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        head = ("policy", "material", "n", "flatten", "single", "inserted", "contained",
                "full", "actions")
        lines = ["{:<16} {:<13} {:>5} {:>8} {:>8} {:>9} {:>10} {:>6} {:>8}".format(*head)]
        for c in self.cells:
            lines.append("{:<16} {:<13} {:>5d} {:>8.3f} {:>8.3f} {:>9.3f} {:>10.3f} {:>6.3f} {:>8.2f}".format(
                c.policy, c.material, c.n_trials, c.flatten_rate, c.single_layer_rate,
                c.mean_inserted_frac, c.mean_contained_frac, c.full_success_rate, c.mean_actions))
        return "\n".join(lines) + "\n"


# -- CSV ----------------------------------------------------------------------------------------


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """RFC-4180 text: CRLF line ends, minimal quoting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text, newline="")))


def results_csv(records: Sequence[EpisodeResult]) -> str:
    cols = EpisodeResult.columns()
    return write_csv(cols, ([r.to_row()[c] for c in cols] for r in records))


def records_from_csv(text: str) -> list[EpisodeResult]:
    rows = read_csv(text)
    header, body = rows[0], rows[1:]
    out = []
    for row in body:
        d = dict(zip(header, row))
        out.append(EpisodeResult(
            policy=d["policy"], material=d["material"],
            flatten_success=d["flatten_success"] == "true",
            reached_slip=d["reached_slip"] == "true",
            single_layer_success=d["single_layer_success"] == "true",
            objects_inserted=int(d["objects_inserted"]),
            objects_contained=int(d["objects_contained"]),
            n_objects=int(d["n_objects"]),
            flatten_actions=int(d["flatten_actions"]),
            slip_iterations=int(d["slip_iterations"]),
            failure_tag=FailureTag(d["failure_tag"]),
            wall_time_sim=float(d["wall_time_sim"]),
            seed=int(d["seed"]),
        ))
    return out


# -- running ------------------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[EpisodeResult]
    summary: SummaryTable

    def files(self) -> dict[str, str]:
        return {
            "results.csv": results_csv(self.records),
            "summary.json": self.summary.to_json(self.config),
            "table.txt": self.summary.to_text(),
        }

    def write(self, out_dir: str) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, text in self.files().items():
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            paths.append(path)
        return paths


def _run_one(job: tuple[str, str, SimConfig, int]) -> EpisodeResult:
    policy, material, sim, seed = job
    return run_episode(policy, material, sim, seed)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None,
                   workers: int | None = None) -> ExperimentResult:
    """Run every (policy, material, trial) episode and aggregate.

    Records are ordered by policy, material and trial index whatever the
    pool size, so outputs are byte-identical for a fixed config.
    """
    sim = cfg.sim_config()
    jobs = [(p, m, sim, trial_seed(cfg.base_seed, p, m, i))
            for p in cfg.policies for m in cfg.materials for i in range(cfg.n_trials)]
    n_workers = cfg.workers if workers is None else workers
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (8 * n_workers))))
    else:
        records = [_run_one(j) for j in jobs]
    cells = []
    k = 0
    for p in cfg.policies:
        for m in cfg.materials:
            cells.append(summarize_cell(p, m, records[k:k + cfg.n_trials]))
            k += cfg.n_trials
    result = ExperimentResult(cfg, records, SummaryTable(tuple(cells)))
    if out_dir is not None:
        result.write(out_dir)
    return result


# -- grasp height histogram ---------------------------------------------------------------------


@dataclass(frozen=True)
class HeightHistogram:
    material: str
    heights: tuple[float, ...]
    probs: np.ndarray        # (len(heights), 3): P(0), P(1), P(2) layers
    n_per_height: int

    def to_csv(self) -> str:
        return write_csv(("material", "height_mm", "p_zero", "p_one", "p_two", "n"),
                         ((self.material, float(h), *(float(x) for x in p), self.n_per_height)
                          for h, p in zip(self.heights, self.probs)))


def grasp_height_histogram(material: MaterialKind | str, heights: Sequence[float],
                           n_per_height: int, seed: int = 0,
                           cfg: SimConfig | None = None) -> HeightHistogram:
    """Empirical layer-count distribution per grasp height on flattened bags.

    Sample ``j`` uses the same bag configuration and attempt jitter at every
    height (common random numbers), so P(Zero) and P(Two) are exactly monotone.
    """
    heights = [float(h) for h in heights]
    if any(b < a for a, b in zip(heights, heights[1:])):
        raise ValueError("heights must be sorted ascending")
    cfg = cfg or SimConfig()
    kind = MaterialKind(material)
    mat = cfg.material(kind)
    rng = np.random.default_rng([seed, zlib.crc32(kind.value.encode())])
    z_bot_cfg, gap_cfg = _sample_layers(mat, rng, n_per_height)
    eps = rng.standard_normal((2, n_per_height))
    z_bot, z_top = attempt_interval(mat, z_bot_cfg, gap_cfg, eps[0], eps[1], cfg.effects)
    probs = np.zeros((len(heights), 3))
    for k, h in enumerate(heights):
        probs[k] = np.bincount(layers_at(h, z_bot, z_top), minlength=3) / n_per_height
    return HeightHistogram(kind.value, tuple(heights), probs, n_per_height)


def histogram_csv(hists: Sequence[HeightHistogram]) -> str:
    rows = []
    for hh in hists:
        rows.extend(read_csv(hh.to_csv())[1:])
    return write_csv(("material", "height_mm", "p_zero", "p_one", "p_two", "n"), rows)


# -- height-update strategy comparison ----------------------------------------------------------


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    error: float
    runs: int
    success_rate: float
    mean_iterations: float


def strategy_comparison(noise_levels: Sequence[float], runs: int = 1000, seed: int = 0,
                        params: SlipParams | None = None, h0_above: float = 2.0) -> list[StrategyRow]:
    """SLIP on static synthetic layer intervals for each strategy and classifier error.

    Instances are shared across strategies. The start height lies up to
    ``h0_above`` mm over the top layer, and one trial of 15 iterations gives
    each strategy a long horizon. Errors follow ``ClassifierModel.bag_like``.
    """
    base = params or SlipParams(trial_max=1, iter_max=15, total_iteration_cap=15)
    inst = np.random.default_rng(seed)
    z_bot = inst.uniform(0.5, 4.0, runs)
    gap = inst.uniform(base.dh_minus, 6.0, runs)
    h0 = np.minimum(z_bot + gap + inst.uniform(0.0, h0_above, runs), base.h_ceiling)
    out = []
    for err in noise_levels:
        m = ClassifierModel.bag_like(float(err))
        for strat in Strategy:
            p = replace(base, strategy=strat)
            wins, iters = 0, 0
            for i in range(runs):
                rng = np.random.default_rng([seed, i, int(round(err * 1e6))])
                r = static_interval_slip(z_bot[i], z_bot[i] + gap[i], h0[i], p, m, rng)
                wins += r.success
                iters += r.iterations_used
            out.append(StrategyRow(strat.value, float(err), runs, wins / runs, iters / runs))
    return out


def strategy_csv(rows: Sequence[StrategyRow]) -> str:
    return write_csv(("strategy", "error", "runs", "success_rate", "mean_iterations"),
                     ((r.strategy, r.error, r.runs, r.success_rate, r.mean_iterations) for r in rows))


__all__ = [
    "BAG_MATERIALS", "BUILTIN_EXPERIMENTS", "CellSummary", "ExperimentConfig", "ExperimentResult",
    "HeightHistogram", "SCHEMA_VERSION", "StrategyRow", "SummaryTable", "grasp_height_histogram",
    "histogram_csv", "read_csv", "records_from_csv", "results_csv", "run_experiment",
    "strategy_comparison", "strategy_csv", "summarize_cell", "trial_seed", "wilson_interval",
    "write_csv",
]
