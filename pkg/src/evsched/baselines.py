"""Reference schedules for a fully revealed arrival path.

The hindsight benchmark is a min-cost flow: cohorts supply their energy
requirement, slots receive it subject to per-cohort rate caps and the
aggregate window, and slot prices weight the arcs. Quantities are scaled
to integer hundredths of a kWh and prices to integer hundredths of a
cent so the flow solver works on exact integers; anything that does not
quantize at that resolution is refused rather than silently rounded.

The greedy baseline charges cohorts in arrival order at full rate until
the slot budget runs out. It needs no forecast and no optimization, which
is exactly what makes it a fair floor for the trained policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .errors import InfeasibleProblemError
from .model import BlockLayout, CostSchedule

ENERGY_SCALE = 100  # flow units per kWh
COST_SCALE = 100  # cost units per cent


@dataclass(frozen=True)
class SamplePath:
    """One realized arrival matrix (horizon, n_items) plus its identity."""

    arrivals: np.ndarray
    path_id: int
    seed: int


@dataclass
class SpResult:
    total_cost: float
    allocations: np.ndarray
    per_slot_energy: np.ndarray
    binding_upper: list
    binding_lower: list

    @property
    def profit(self) -> float:
        return -self.total_cost


def _as_units(value: float, what: str) -> int:
    scaled = value * ENERGY_SCALE
    snapped = round(scaled)
    if abs(scaled - snapped) > 1e-6:
        raise InfeasibleProblemError(f"{what} {value} does not quantize to 0.01 kWh")
    return int(snapped)


def _cost_units(value: float) -> int:
    scaled = value * COST_SCALE
    snapped = round(scaled)
    if abs(scaled - snapped) > 1e-6:
        raise InfeasibleProblemError(f"price {value} does not quantize to 0.01 cents")
    return int(snapped)


def _coverage_diagnostic(layout, horizon, arrivals, d_schedule) -> str:
    """Best-effort explanation for an infeasible path.

    Scans slot intervals and compares the energy that must be delivered
    inside each against the aggregate ceiling, and checks each cohort
    against its own rate-and-window limit.
    """
    m = layout.item_m
    n = layout.item_n
    cap = layout.menu.slot_energy_cap
    for t in range(1, horizon + 1):
        for j in range(layout.n_items):
            y = int(arrivals[t - 1, j])
            if y == 0:
                continue
            window = min(int(n[j]), horizon - t + 1)
            if m[j] * y > cap * y * window + 1e-9:
                return (
                    f"cohort at slot {t} needs {m[j] * y:.2f} kWh but can take at most "
                    f"{cap * y * window:.2f} kWh before its deadline"
                )
    worst = ""
    worst_gap = 0.0
    for a in range(1, horizon + 1):
        for b in range(a, horizon + 1):
            need = 0.0
            for t in range(1, horizon + 1):
                for j in range(layout.n_items):
                    y = int(arrivals[t - 1, j])
                    if y and t >= a and t + int(n[j]) - 1 <= b:
                        need += m[j] * y
            room = float(np.sum(d_schedule[a - 1 : b, 1]))
            if need - room > worst_gap:
                worst_gap = need - room
                worst = (
                    f"slots {a}..{b} must absorb {need:.1f} kWh but allow only {room:.1f} kWh"
                )
    return worst or "no simple interval certificate found"


def solve_sp(
    layout: BlockLayout,
    costs: CostSchedule,
    d_schedule: np.ndarray,
    arrivals: np.ndarray,
    bind_tol: float = 1e-6,
) -> SpResult:
    """Cheapest schedule knowing the whole arrival path in advance."""
    horizon = costs.horizon
    arrivals = np.asarray(arrivals, dtype=np.int64)
    d_schedule = np.asarray(d_schedule, dtype=float)
    g = nx.DiGraph()
    sink = "sink"
    total_supply = 0
    cohorts = []
    for t in range(1, horizon + 1):
        for j in range(layout.n_items):
            y = int(arrivals[t - 1, j])
            if y == 0:
                continue
            node = ("c", t, j)
            need = _as_units(layout.item_m[j] * y, "cohort energy")
            g.add_node(node, demand=-need)
            total_supply += need
            cohorts.append((node, t, j, y))
    g.add_node(sink, demand=total_supply)
    rate_cap = layout.menu.slot_energy_cap
    for node, t, j, y in cohorts:
        last = min(t + int(layout.item_n[j]) - 1, horizon)
        for s in range(t, last + 1):
            delta = t + int(layout.item_n[j]) - 1 - s
            e = delta * layout.n_items + j
            g.add_edge(
                node,
                ("s", s),
                capacity=_as_units(rate_cap * y, "rate cap"),
                weight=_cost_units(float(costs.values[s - 1, e])),
            )
    for s in range(1, horizon + 1):
        lo = _as_units(d_schedule[s - 1, 0], "aggregate floor")
        hi_raw = d_schedule[s - 1, 1]
        hi = total_supply if not np.isfinite(hi_raw) else _as_units(hi_raw, "aggregate ceiling")
        hi = min(hi, total_supply)
        if lo > hi:
            raise InfeasibleProblemError(f"aggregate window empty at slot {s}", slot=s)
        g.add_node(("s", s))
        # shift the lower bound into the node demands
        g.nodes[("s", s)]["demand"] = g.nodes[("s", s)].get("demand", 0) + lo
        g.nodes[sink]["demand"] -= lo
        g.add_edge(("s", s), sink, capacity=hi - lo, weight=0)
    try:
        flow_cost_units, flow = nx.network_simplex(g)
    except nx.NetworkXUnfeasible as e:
        detail = _coverage_diagnostic(layout, horizon, arrivals, d_schedule)
        raise InfeasibleProblemError(f"no schedule serves this path: {detail}") from e
    allocations = np.zeros((horizon, layout.dim))
    for node, t, j, y in cohorts:
        for target, units in flow.get(node, {}).items():
            if units == 0:
                continue
            s = target[1]
            delta = t + int(layout.item_n[j]) - 1 - s
            e = delta * layout.n_items + j
            allocations[s - 1, e] += units / ENERGY_SCALE
    per_slot = allocations.sum(axis=1)
    total_cost = flow_cost_units / (ENERGY_SCALE * COST_SCALE)
    binding_upper = [
        s
        for s in range(1, horizon + 1)
        if np.isfinite(d_schedule[s - 1, 1]) and per_slot[s - 1] >= d_schedule[s - 1, 1] - bind_tol
    ]
    binding_lower = [
        s
        for s in range(1, horizon + 1)
        if d_schedule[s - 1, 0] > 0 and per_slot[s - 1] <= d_schedule[s - 1, 0] + bind_tol
    ]
    return SpResult(
        total_cost=float(total_cost),
        allocations=allocations,
        per_slot_energy=per_slot,
        binding_upper=binding_upper,
        binding_lower=binding_lower,
    )


@dataclass
class FcfsResult:
    total_cost: float
    allocations: np.ndarray
    per_slot_energy: np.ndarray
    stranded_kwh: float

    @property
    def profit(self) -> float:
        return -self.total_cost

    @property
    def total_energy(self) -> float:
        return float(self.per_slot_energy.sum())


def run_fcfs(
    layout: BlockLayout,
    costs: CostSchedule,
    d_schedule: np.ndarray,
    arrivals: np.ndarray,
) -> FcfsResult:
    """Arrival-order greedy charging under the aggregate window.

    Cohorts queue by arrival slot; each slot serves the queue at full
    rate until the ceiling d2 is hit. A cohort that reaches its deadline
    unserved leaves and its shortfall is reported as stranded energy.
    Raises when even full-rate charging cannot reach a positive floor d1.
    """
    horizon = costs.horizon
    arrivals = np.asarray(arrivals, dtype=np.int64)
    d_schedule = np.asarray(d_schedule, dtype=float)
    nb = layout.n_items
    dim = layout.dim
    rate_cap = layout.menu.slot_energy_cap
    y = np.zeros(dim, dtype=np.int64)
    z = np.zeros(dim)
    inject = layout.arrival_indices()
    deltas = layout.entry_deltas()
    allocations = np.zeros((horizon, dim))
    total_cost = 0.0
    stranded = 0.0
    for s in range(1, horizon + 1):
        # shift previous occupancy down one deadline step, then admit
        y_new = np.zeros(dim, dtype=np.int64)
        z_new = np.zeros(dim)
        y_new[: dim - nb] = y[nb:]
        z_new[: dim - nb] = z[nb:]
        y, z = y_new, z_new
        y[inject] += arrivals[s - 1]
        z[inject] += arrivals[s - 1] * layout.item_m
        order = sorted(
            np.flatnonzero(y > 0),
            key=lambda e: (layout.arrival_slot_of(int(e), s), -int(deltas[e]), int(e)),
        )
        budget = d_schedule[s - 1, 1]
        u = np.zeros(dim)
        for e in order:
            cap = min(rate_cap * y[e], z[e])
            give = min(cap, budget) if np.isfinite(budget) else cap
            if give <= 0:
                continue
            u[e] = give
            budget -= give
        if u.sum() < d_schedule[s - 1, 0] - 1e-9:
            raise InfeasibleProblemError(
                f"full-rate greedy reaches only {u.sum():.2f} kWh of the "
                f"{d_schedule[s - 1, 0]:.2f} kWh floor",
                slot=s,
            )
        z = z - u
        stranded += float(z[:nb].sum())
        allocations[s - 1] = u
        total_cost += float(costs.cost_row(s) @ u)
    return FcfsResult(
        total_cost=total_cost,
        allocations=allocations,
        per_slot_energy=allocations.sum(axis=1),
        stranded_kwh=stranded,
    )


def cumulative_cost(costs: CostSchedule, allocations: np.ndarray) -> np.ndarray:
    """Running cost in cents over slots for an allocation matrix."""
    per_slot = np.einsum("se,se->s", costs.values, allocations)
    return np.cumsum(per_slot)
