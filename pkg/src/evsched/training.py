"""Backward fitted value iteration.

Each stage regresses the one-stage optimum (immediate cost plus sampled
continuation) onto a value model, walking from the last slot to the
first. Arrival draws are shared across all sampled states of a stage so
that regression targets differ only through the state, and every random
stream is derived from the run seed by purpose and stage, which makes
runs bit-reproducible regardless of execution order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrivals import ArrivalModel
from .bellman import InnerSolverConfig, StageProblem, empirical_bellman
from .errors import EmptyPolytopeError, EvschedError, FitError
from .feasible import gamma
from .model import BlockLayout, CostSchedule, state_from_vector
from .rng import substream
from .value_models import (
    FitDataset,
    LinearBasisModel,
    MlpModel,
    entry_caps_from_arrivals,
    feature_map_for,
    load_checkpoint,
    sample_states,
)


@dataclass
class FviConfig:
    """Training sizes: draws per target, states per stage, feature budget."""

    draws: int = 64
    samples_per_stage: int = 64
    feature_budget: int = 0
    model: str = "linear"
    seed: int = 0
    inner: InnerSolverConfig = field(default_factory=InnerSolverConfig)
    ridge: float = 1e-8
    mlp_width: int = 0
    mlp_depth: int = 8
    mlp_learning_rate: float = 0.005
    mlp_epochs: int = 2000

    def __post_init__(self):
        if self.model not in ("linear", "mlp"):
            raise EvschedError(f"unknown value model {self.model!r}")
        if self.draws < 1 or self.samples_per_stage < 1:
            raise EvschedError("draws and samples_per_stage must be positive")


@dataclass
class TrainedPolicy:
    """Per-stage value models plus what is needed to reuse them."""

    layout: BlockLayout
    horizon: int
    models: dict
    kind: str
    stage_seconds: list = field(default_factory=list)
    dropped_states: int = 0

    def continuation(self, slot: int):
        """Model scoring states one slot after ``slot``; None past the end."""
        return self.models.get(slot + 1)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for s, model in self.models.items():
            model.save(directory / f"stage_{s}.vmck")
        meta = {
            "horizon": self.horizon,
            "kind": self.kind,
            "stage_seconds": self.stage_seconds,
            "dropped_states": self.dropped_states,
        }
        (directory / "policy.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory, layout: BlockLayout) -> "TrainedPolicy":
        directory = Path(directory)
        meta = json.loads((directory / "policy.json").read_text())
        models = {}
        for s in range(1, meta["horizon"] + 1):
            models[s] = load_checkpoint(directory / f"stage_{s}.vmck")
        return cls(
            layout=layout,
            horizon=meta["horizon"],
            models=models,
            kind=meta["kind"],
            stage_seconds=meta.get("stage_seconds", []),
            dropped_states=meta.get("dropped_states", 0),
        )


def stage_targets(
    layout: BlockLayout,
    costs: CostSchedule,
    arrivals: ArrivalModel,
    d_schedule: np.ndarray,
    slot: int,
    next_model,
    cfg: FviConfig,
):
    """Sampled states and their one-stage optimal values at ``slot``."""
    horizon = costs.horizon
    rng_states = substream(cfg.seed, "fvi-states", slot)
    rng_draws = substream(cfg.seed, "fvi-draws", slot)
    states = sample_states(
        layout,
        arrivals.caps,
        tuple(d_schedule[slot - 1]),
        cfg.samples_per_stage,
        rng_states,
        slot=slot,
        horizon=horizon,
    )
    if slot < horizon:
        draws = arrivals.sample_many(slot + 1, cfg.draws, rng_draws)
        d_next = tuple(d_schedule[slot])
        model = next_model
    else:
        draws = np.zeros((cfg.draws, layout.n_items), dtype=np.int64)
        d_next = tuple(d_schedule[-1])
        model = None
    sp = StageProblem(layout, slot, costs.cost_row(slot), draws, d_next, next_model=model)
    targets = np.empty(len(states))
    keep = np.ones(len(states), dtype=bool)
    for i, vec in enumerate(states):
        x = state_from_vector(layout, vec)
        try:
            res = empirical_bellman(sp, x, gamma(x), cfg.inner)
        except EmptyPolytopeError:
            keep[i] = False
            continue
        targets[i] = res.value
    return states[keep], targets[keep], int((~keep).sum())


def train_value_functions(
    layout: BlockLayout,
    costs: CostSchedule,
    arrivals: ArrivalModel,
    d_schedule: np.ndarray,
    cfg: FviConfig,
    checkpoint_dir=None,
    progress=None,
) -> TrainedPolicy:
    horizon = costs.horizon
    d_schedule = np.asarray(d_schedule, dtype=float)
    if d_schedule.shape != (horizon, 2):
        raise EvschedError("d_schedule must be (horizon, 2)")
    entry_caps = entry_caps_from_arrivals(layout, arrivals.caps)
    d_lo = tuple(d_schedule.min(axis=0))
    d_hi = tuple(d_schedule.max(axis=0))
    features = feature_map_for(layout, entry_caps, d_lo, d_hi, budget=cfg.feature_budget)
    models: dict = {}
    seconds = []
    dropped = 0
    next_model = None
    for slot in range(horizon, 0, -1):
        t0 = time.monotonic()
        states, targets, lost = stage_targets(
            layout, costs, arrivals, d_schedule, slot, next_model, cfg
        )
        dropped += lost
        if len(states) < 2:
            raise FitError(f"stage {slot}: only {len(states)} usable sampled states")
        data = FitDataset(states, targets)
        if cfg.model == "linear":
            fitted = LinearBasisModel.fit(features, data, ridge=cfg.ridge)
        else:
            width = cfg.mlp_width or 2 * layout.state_dim
            fitted = MlpModel.fit(
                features.norm_lo,
                features.norm_hi,
                data,
                width=width,
                depth=cfg.mlp_depth,
                learning_rate=cfg.mlp_learning_rate,
                epochs=cfg.mlp_epochs,
                seed=cfg.seed + slot,
            )
        models[slot] = fitted
        next_model = fitted
        seconds.append(time.monotonic() - t0)
        if progress is not None:
            progress(slot, seconds[-1], len(states))
    policy = TrainedPolicy(
        layout=layout,
        horizon=horizon,
        models=models,
        kind=cfg.model,
        stage_seconds=list(reversed(seconds)),
        dropped_states=dropped,
    )
    if checkpoint_dir is not None:
        policy.save(checkpoint_dir)
    return policy


def first_stage_error(policy: TrainedPolicy, eval_states: np.ndarray, reference: np.ndarray):
    """Sup-norm error of the first-stage model against reference values."""
    approx = policy.models[1].evaluate_batch(eval_states)
    return float(np.max(np.abs(approx - reference)))


def convergence_study(
    layout: BlockLayout,
    costs: CostSchedule,
    arrivals: ArrivalModel,
    d_schedule: np.ndarray,
    eval_states: np.ndarray,
    reference: np.ndarray,
    ladder,
    seeds,
    inner: InnerSolverConfig | None = None,
):
    """Sup-error of the first-stage fit for growing training budgets.

    ``ladder`` is a sequence of (draws, samples, features) triples run for
    each seed; rows come back per (rung, seed) with the measured error.
    """
    rows = []
    for rung, (k, l, d) in enumerate(ladder):
        for seed in seeds:
            cfg = FviConfig(
                draws=k,
                samples_per_stage=l,
                feature_budget=d,
                model="linear",
                seed=seed,
                inner=inner or InnerSolverConfig(seed=seed),
            )
            t0 = time.monotonic()
            policy = train_value_functions(layout, costs, arrivals, d_schedule, cfg)
            err = first_stage_error(policy, eval_states, reference)
            rows.append(
                {
                    "rung": rung,
                    "draws": k,
                    "samples": l,
                    "features": d,
                    "seed": seed,
                    "sup_error": err,
                    "seconds": time.monotonic() - t0,
                }
            )
    return rows
