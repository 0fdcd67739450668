"""Forward simulation of the trained policy.

Each slot observes fresh arrivals, forms the state, and solves the same
one-stage problem used during training, except over the deadline-aware
action set that reserves enough headroom for every cohort to finish on
time. Slot decisions come back both as energy per layout entry and as
the charging fraction actually sent to each cohort's EVs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .arrivals import ArrivalModel
from .bellman import InnerSolverConfig, StageProblem, empirical_bellman
from .errors import EmptyPolytopeError, InfeasibleStageError
from .feasible import gamma_prime
from .model import BlockLayout, CostSchedule, FleetState, transition, zero_state
from .rng import substream


@dataclass
class DispatchConfig:
    k_forward: int = 64
    gamma_prime_slack: str = "reserve"
    seed: int = 0
    inner: InnerSolverConfig = field(default_factory=InnerSolverConfig)


@dataclass
class SlotRecord:
    slot: int
    state: FleetState
    u: np.ndarray
    fractions: np.ndarray
    energy: float
    cost: float
    gap: float


@dataclass
class PathResult:
    records: list
    total_cost: float
    total_energy: float
    per_slot_energy: np.ndarray
    arrivals: np.ndarray

    @property
    def profit(self) -> float:
        return -self.total_cost


def charge_fractions(state: FleetState, u: np.ndarray) -> np.ndarray:
    """Fraction of one slot at full rate each cohort is asked to charge."""
    cap = state.layout.menu.slot_energy_cap * state.y
    out = np.zeros_like(u)
    nz = cap > 0
    out[nz] = np.clip(u[nz] / cap[nz], 0.0, 1.0)
    return out


def dispatch_path(
    policy,
    costs: CostSchedule,
    arrival_model: ArrivalModel,
    d_schedule: np.ndarray,
    path_arrivals: np.ndarray,
    cfg: DispatchConfig,
    path_id: int = 0,
) -> PathResult:
    """Run the policy over one realized arrival path.

    ``path_arrivals`` is (horizon, n_items); continuation draws are fresh
    per slot and independent of the path stream. Raises
    InfeasibleStageError when the deadline-aware action set empties out,
    which means the aggregate window cannot accommodate the reserved
    charging any more.
    """
    layout: BlockLayout = policy.layout
    horizon = costs.horizon
    d_schedule = np.asarray(d_schedule, dtype=float)
    path_arrivals = np.asarray(path_arrivals, dtype=np.int64)
    if path_arrivals.shape != (horizon, layout.n_items):
        raise InfeasibleStageError(0, "path arrivals shape mismatch")
    x = zero_state(layout, tuple(d_schedule[0]))
    u_prev = np.zeros(layout.dim)
    records = []
    total_cost = 0.0
    per_slot = np.zeros(horizon)
    for s in range(1, horizon + 1):
        x = transition(x, u_prev, path_arrivals[s - 1], tuple(d_schedule[s - 1]))
        if s < horizon:
            draws = arrival_model.sample_many(
                s + 1, cfg.k_forward, substream(cfg.seed, "dispatch", path_id, s)
            )
            d_next = tuple(d_schedule[s])
            cont = policy.continuation(s)
        else:
            draws = np.zeros((cfg.k_forward, layout.n_items), dtype=np.int64)
            d_next = tuple(d_schedule[-1])
            cont = None
        sp = StageProblem(layout, s, costs.cost_row(s), draws, d_next, next_model=cont)
        try:
            polytope = gamma_prime(x, slack=cfg.gamma_prime_slack)
            res = empirical_bellman(sp, x, polytope, cfg.inner)
        except EmptyPolytopeError as e:
            raise InfeasibleStageError(s, str(e)) from e
        cost_here = float(costs.cost_row(s) @ res.u)
        records.append(
            SlotRecord(
                slot=s,
                state=x,
                u=res.u,
                fractions=charge_fractions(x, res.u),
                energy=float(res.u.sum()),
                cost=cost_here,
                gap=res.gap,
            )
        )
        total_cost += cost_here
        per_slot[s - 1] = res.u.sum()
        u_prev = res.u
    return PathResult(
        records=records,
        total_cost=total_cost,
        total_energy=float(per_slot.sum()),
        per_slot_energy=per_slot,
        arrivals=path_arrivals,
    )


def disaggregate(result: PathResult):
    """Per-cohort charging timeline rows.

    Every EV in a cohort receives the same fraction, so rows carry both
    the cohort energy and the per-EV share. Rows are (slot, arrival_slot,
    energy_kwh, window_slots, count, cohort_kwh, fraction, per_ev_kwh).
    """
    rows = []
    for rec in result.records:
        layout = rec.state.layout
        m = layout.entry_m()
        n = layout.entry_n()
        for e in np.flatnonzero(rec.state.y > 0):
            rows.append(
                {
                    "slot": rec.slot,
                    "arrival_slot": layout.arrival_slot_of(int(e), rec.slot),
                    "energy_kwh": float(m[e]),
                    "window_slots": int(n[e]),
                    "count": int(rec.state.y[e]),
                    "cohort_kwh": float(rec.u[e]),
                    "fraction": float(rec.fractions[e]),
                    "per_ev_kwh": float(rec.u[e] / rec.state.y[e]),
                }
            )
    return rows


def export_dispatch_csv(result: PathResult, path):
    rows = disaggregate(result)
    cumulative = 0.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "slot",
                "arrival_slot",
                "energy_kwh",
                "window_slots",
                "count",
                "cohort_kwh",
                "fraction",
                "per_ev_kwh",
                "slot_cost_cents",
                "cumulative_cost_cents",
            ]
        )
        for rec in result.records:
            cumulative += rec.cost
            slot_rows = [r for r in rows if r["slot"] == rec.slot]
            if not slot_rows:
                writer.writerow([rec.slot, "", "", "", 0, 0.0, 0.0, 0.0, f"{rec.cost:.4f}", f"{cumulative:.4f}"])
            for r in slot_rows:
                writer.writerow(
                    [
                        r["slot"],
                        r["arrival_slot"],
                        r["energy_kwh"],
                        r["window_slots"],
                        r["count"],
                        f"{r['cohort_kwh']:.6f}",
                        f"{r['fraction']:.6f}",
                        f"{r['per_ev_kwh']:.6f}",
                        f"{rec.cost:.4f}",
                        f"{cumulative:.4f}",
                    ]
                )
