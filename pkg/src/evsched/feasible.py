"""Per-slot action polytopes and an exact linear minimization oracle.

An allocation for one slot lives in a box-with-budget polytope::

    { u : lb <= u <= ub,  L <= sum(u) <= U }

The plain set ``gamma`` caps each entry at what the cohort can absorb this
slot and pins departing cohorts to their full residual. The tightened set
``gamma_prime`` additionally raises per-entry lower bounds so that every
cohort can still finish in the slots it has left; forward dispatch uses it
to never paint itself into a corner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyPolytopeError, EvschedError
from .model import FleetState

#: default feasibility slack, kWh
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class ActionPolytope:
    """Box plus aggregate-budget constraint set for one slot's allocation.

    Attributes:
        lb, ub: per-entry bounds (kWh).
        agg_lo, agg_hi: bounds on sum(u) (kWh).
        eq_mask: entries pinned to a single value (departing cohorts).
    """

    lb: np.ndarray
    ub: np.ndarray
    agg_lo: float
    agg_hi: float
    eq_mask: np.ndarray

    def __post_init__(self):
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        if lb.shape != ub.shape:
            raise EvschedError("bound vectors differ in length")
        lb.setflags(write=False)
        ub.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.lb.shape[0]

    def is_empty(self, tol: float = FEAS_TOL) -> bool:
        if (self.lb > self.ub + tol).any():
            return True
        return self.lb.sum() > self.agg_hi + tol or self.ub.sum() < self.agg_lo - tol


def gamma(state: FleetState) -> ActionPolytope:
    """Feasible allocations: rate/residual caps, forced departures, budget."""
    lay = state.layout
    cap = lay.menu.slot_energy_cap
    ub = np.minimum(cap * state.y, state.z)
    lb = np.zeros(lay.dim)
    eq = lay.active & (lay.entry_deltas() == 0)
    lb[eq] = state.z[eq]
    ub[eq] = state.z[eq]
    return ActionPolytope(lb=lb, ub=ub, agg_lo=state.d[0], agg_hi=state.d[1], eq_mask=eq)


def gamma_prime(state: FleetState, slack: str = "reserve") -> ActionPolytope:
    """Tightened set that keeps future slots feasible.

    For an entry at offset ``delta >= 1`` the residual carried forward is
    capped at what the cohort can absorb in its remaining slots, which
    turns into a lower bound on today's allocation. ``slack`` picks the
    coefficient on the remaining-capacity count:

    * ``"reserve"``: ``delta - 1`` slots of headroom (cohorts finish one
      slot before departure; stricter, and infeasible for menu items that
      need their full window).
    * ``"exact"``: ``delta`` slots of headroom (cohorts finish exactly by
      departure).
    """
    if slack not in ("reserve", "exact"):
        raise EvschedError(f"unknown gamma_prime slack mode {slack!r}")
    base = gamma(state)
    lay = state.layout
    cap = lay.menu.slot_energy_cap
    deltas = lay.entry_deltas()
    later = lay.active & (deltas >= 1)
    headroom = deltas - 1 if slack == "reserve" else deltas
    lb = base.lb.copy()
    lb[later] = np.maximum(
        0.0, state.z[later] - cap * state.y[later] * headroom[later]
    )
    return ActionPolytope(
        lb=lb, ub=base.ub, agg_lo=base.agg_lo, agg_hi=base.agg_hi, eq_mask=base.eq_mask
    )


def contains(p: ActionPolytope, u: np.ndarray, tol: float = FEAS_TOL) -> bool:
    u = np.asarray(u, dtype=float)
    if u.shape != p.lb.shape or not np.isfinite(u).all():
        return False
    if (u < p.lb - tol).any() or (u > p.ub + tol).any():
        return False
    total = u.sum()
    return p.agg_lo - tol <= total <= p.agg_hi + tol


def linmin(p: ActionPolytope, cost: np.ndarray, tol: float = FEAS_TOL) -> np.ndarray:
    """Exact minimizer of ``cost . u`` over the polytope.

    Greedy continuous-knapsack sweep: start at the lower bounds, raise the
    cheapest entries until the aggregate floor is met, then keep raising
    strictly negative-cost entries while the aggregate ceiling allows.
    Ties resolve by entry index, so the result is deterministic.
    """
    if p.is_empty(tol):
        raise EmptyPolytopeError(
            f"empty polytope: sum(lb)={p.lb.sum():.6f}, sum(ub)={p.ub.sum():.6f}, "
            f"agg=[{p.agg_lo:.6f}, {p.agg_hi:.6f}]"
        )
    cost = np.asarray(cost, dtype=float)
    if cost.shape != p.lb.shape:
        raise EvschedError("cost vector length does not match polytope")

    u = p.lb.astype(float).copy()
    total = float(u.sum())
    order = np.argsort(cost, kind="stable")

    short = p.agg_lo - total
    if short > tol:
        for i in order:
            room = p.ub[i] - u[i]
            if room <= 0:
                continue
            add = min(room, short)
            u[i] += add
            short -= add
            if short <= tol:
                break
    total = float(u.sum())

    headroom = p.agg_hi - total
    if headroom > tol:
        for i in order:
            if cost[i] >= 0:
                break
            room = min(p.ub[i] - u[i], headroom)
            if room <= 0:
                continue
            u[i] += room
            headroom -= room
            if headroom <= tol:
                break
    return u
