"""Fleet state, charging menu, and slot-to-slot dynamics.

The scheduler tracks EVs in cohorts rather than individually. A cohort is
the set of EVs that picked the same menu item (energy amount, charging
window) and became active in the same slot. Cohorts are stored in a padded
block layout keyed by departure offset:

* ``delta = 0`` holds cohorts in their final slot (they leave afterwards),
  ``delta = 1`` holds cohorts with one more slot after the current one,
  and so on up to ``N - 1`` where ``N`` is the longest window on the menu.
* Each block has one entry per menu item, ordered by (window, energy)
  ascending. An item with window ``n`` can never sit at offset ``delta >=
  n``, so those entries are structural zeros and stay zero forever.

The layout is time-invariant: advancing one slot shifts every block down
one offset, drops the departing block, and injects fresh arrivals for item
(m, n) at offset ``n - 1``. This keeps vector shapes fixed across the
horizon, which is what the value-function regressors need.

Counts ``y`` live per layout entry, residual energies ``z`` (kWh) likewise,
and ``d = (d1, d2)`` carries the aggregate per-slot energy window (kWh).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvschedError

#: kWh slack used when validating energy invariants.
ENERGY_TOL = 1e-9


@dataclass(frozen=True)
class Menu:
    """Charging menu offered to arriving EVs.

    Attributes:
        items: tuple of (energy_kwh, window_slots) pairs, unique.
        rate_kw: charger rate every plugged EV can draw.
        slot_hours: duration of one slot.
    """

    items: tuple[tuple[float, int], ...]
    rate_kw: float
    slot_hours: float = 1.0

    def __post_init__(self):
        if not self.items:
            raise EvschedError("menu needs at least one item")
        if self.rate_kw <= 0 or self.slot_hours <= 0:
            raise EvschedError("rate_kw and slot_hours must be positive")
        seen = set()
        for m, n in self.items:
            if m <= 0:
                raise EvschedError(f"item energy must be positive, got {m}")
            if int(n) != n or n < 1:
                raise EvschedError(f"item window must be a positive integer, got {n}")
            if m > self.rate_kw * n * self.slot_hours + ENERGY_TOL:
                raise EvschedError(
                    f"item ({m} kWh, {n} slots) cannot finish at {self.rate_kw} kW"
                )
            if (m, n) in seen:
                raise EvschedError(f"duplicate menu item ({m}, {n})")
            seen.add((m, n))

    @property
    def max_window(self) -> int:
        return max(n for _, n in self.items)

    @property
    def energy_levels(self) -> tuple[float, ...]:
        return tuple(sorted({m for m, _ in self.items}))

    @property
    def slot_energy_cap(self) -> float:
        """kWh a single EV can absorb in one slot."""
        return self.rate_kw * self.slot_hours


@dataclass(frozen=True)
class BlockLayout:
    """Index map between (offset, item) pairs and flat vector entries.

    Attributes:
        menu: the menu this layout was built from.
        item_order: menu items sorted by (window, energy).
        n_blocks: number of departure-offset blocks (= longest window).
        dim: padded vector length, n_blocks * len(item_order).
    """

    menu: Menu
    item_order: tuple[tuple[float, int], ...]
    n_blocks: int
    dim: int
    active: np.ndarray = field(repr=False)
    item_m: np.ndarray = field(repr=False)
    item_n: np.ndarray = field(repr=False)

    @property
    def n_items(self) -> int:
        return len(self.item_order)

    @property
    def state_dim(self) -> int:
        """Length of the flattened (y, z, d) vector fed to regressors."""
        return 2 * self.dim + 2

    def index(self, delta: int, item: tuple[float, int]) -> int:
        j = self.item_order.index(item)
        return delta * self.n_items + j

    def delta_of(self, idx: int) -> int:
        return idx // self.n_items

    def item_of(self, idx: int) -> tuple[float, int]:
        return self.item_order[idx % self.n_items]

    def arrival_indices(self) -> np.ndarray:
        """Flat index where each item (in item order) is injected on arrival."""
        return (self.item_n - 1) * self.n_items + np.arange(self.n_items)

    def entry_deltas(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_blocks), self.n_items)

    def entry_m(self) -> np.ndarray:
        return np.tile(self.item_m, self.n_blocks)

    def entry_n(self) -> np.ndarray:
        return np.tile(self.item_n, self.n_blocks)

    def stage_valid(self, slot: int, horizon: int) -> np.ndarray:
        """Entries that can hold a cohort at ``slot`` of a ``horizon``-slot run.

        An entry (delta, item) at slot s corresponds to a cohort that became
        active at t = s + delta - (n - 1); it exists only if t >= 1 and the
        departure s + delta stays within the horizon.
        """
        deltas = self.entry_deltas()
        t = slot + deltas - (self.entry_n() - 1)
        ok = self.active & (t >= 1) & (slot + deltas <= horizon)
        return ok

    def arrival_slot_of(self, idx: int, slot: int) -> int:
        """Slot at which the cohort currently at entry ``idx`` became active."""
        n = self.entry_n()[idx]
        return slot + self.delta_of(idx) - (int(n) - 1)


def build_layout(menu: Menu) -> BlockLayout:
    order = tuple(sorted(menu.items, key=lambda it: (it[1], it[0])))
    n_blocks = menu.max_window
    n_items = len(order)
    item_m = np.array([m for m, _ in order], dtype=float)
    item_n = np.array([n for _, n in order], dtype=np.int64)
    deltas = np.repeat(np.arange(n_blocks), n_items)
    active = np.tile(item_n, n_blocks) > deltas
    active.setflags(write=False)
    item_m.setflags(write=False)
    item_n.setflags(write=False)
    return BlockLayout(
        menu=menu,
        item_order=order,
        n_blocks=n_blocks,
        dim=n_blocks * n_items,
        active=active,
        item_m=item_m,
        item_n=item_n,
    )


@dataclass(frozen=True)
class FleetState:
    """Aggregated cohort state at the start of one slot.

    Attributes:
        layout: block layout the vectors are indexed by.
        y: EV counts per layout entry (int).
        z: residual energy per layout entry (kWh).
        d: (d1, d2) aggregate energy window for the current slot (kWh).
    """

    layout: BlockLayout
    y: np.ndarray
    z: np.ndarray
    d: tuple[float, float]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        z = np.asarray(self.z, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        lay = self.layout
        if y.shape != (lay.dim,) or z.shape != (lay.dim,):
            raise EvschedError("state vectors do not match layout dimension")
        if (y < 0).any():
            raise EvschedError("negative cohort count")
        if (z < -ENERGY_TOL).any():
            raise EvschedError("negative residual energy")
        inactive = ~lay.active
        if y[inactive].any() or np.abs(z[inactive]).max(initial=0.0) > ENERGY_TOL:
            raise EvschedError("nonzero content in structurally empty entries")
        cap = lay.entry_m() * y
        if (z > cap + ENERGY_TOL).any():
            raise EvschedError("residual energy exceeds cohort demand")
        d1, d2 = self.d
        if not (0 <= d1 <= d2) or not np.isfinite(d1):
            raise EvschedError(f"bad aggregate window d={self.d}")
        y.setflags(write=False)
        z.setflags(write=False)

    def to_vector(self) -> np.ndarray:
        """Flatten to the (y, z, d1, d2) float vector regressors consume."""
        return np.concatenate([self.y.astype(float), self.z, np.array(self.d)])

    def total_residual(self) -> float:
        return float(self.z.sum())


def zero_state(layout: BlockLayout, d: tuple[float, float]) -> FleetState:
    return FleetState(
        layout=layout,
        y=np.zeros(layout.dim, dtype=np.int64),
        z=np.zeros(layout.dim),
        d=(float(d[0]), float(d[1])),
    )


def state_from_vector(layout: BlockLayout, vec: np.ndarray) -> FleetState:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (layout.state_dim,):
        raise EvschedError("vector length does not match layout state_dim")
    dim = layout.dim
    y = np.rint(vec[:dim]).astype(np.int64)
    return FleetState(layout=layout, y=y, z=vec[dim : 2 * dim].copy(), d=(vec[-2], vec[-1]))


def validate_arrivals(layout: BlockLayout, w) -> np.ndarray:
    """Check and normalize an arrival count vector (one entry per menu item)."""
    w = np.asarray(w)
    if w.shape != (layout.n_items,):
        raise EvschedError("arrival vector length does not match menu size")
    if not np.issubdtype(w.dtype, np.integer):
        wi = np.rint(w).astype(np.int64)
        if np.abs(w - wi).max(initial=0.0) > 1e-9:
            raise EvschedError("arrival counts must be integers")
        w = wi
    if (w < 0).any():
        raise EvschedError("negative arrival count")
    return w.astype(np.int64)


def transition(
    state: FleetState,
    u: np.ndarray,
    w,
    d_next: tuple[float, float],
    validate: bool = True,
) -> FleetState:
    """Advance one slot: apply allocation ``u``, shift blocks, inject arrivals.

    ``u`` is the energy (kWh) delivered to each layout entry during the
    current slot; ``w`` counts the cohorts that become active next slot.
    Raises if ``u`` drives any residual below zero beyond tolerance.
    """
    lay = state.layout
    u = np.asarray(u, dtype=float)
    if u.shape != (lay.dim,):
        raise EvschedError("allocation length does not match layout")
    if not np.isfinite(u).all():
        raise EvschedError("non-finite allocation")
    if (u < -ENERGY_TOL).any():
        raise EvschedError("negative allocation")
    if np.abs(u[~lay.active]).max(initial=0.0) > ENERGY_TOL:
        raise EvschedError("allocation to structurally empty entries")
    w = validate_arrivals(lay, w)

    z_after = state.z - u
    if (z_after < -ENERGY_TOL).any():
        worst = int(np.argmin(z_after))
        raise EvschedError(
            f"allocation exceeds residual energy at entry {worst} "
            f"(z={state.z[worst]:.6f}, u={u[worst]:.6f})"
        )
    z_after = np.maximum(z_after, 0.0)

    nb = lay.n_items
    y_next = np.zeros(lay.dim, dtype=np.int64)
    z_next = np.zeros(lay.dim)
    y_next[: lay.dim - nb] = state.y[nb:]
    z_next[: lay.dim - nb] = z_after[nb:]

    inject = lay.arrival_indices()
    y_next[inject] += w
    z_next[inject] += lay.item_m * w

    if validate:
        return FleetState(layout=lay, y=y_next, z=z_next, d=(float(d_next[0]), float(d_next[1])))
    st = object.__new__(FleetState)
    object.__setattr__(st, "layout", lay)
    object.__setattr__(st, "y", y_next)
    object.__setattr__(st, "z", z_next)
    object.__setattr__(st, "d", (float(d_next[0]), float(d_next[1])))
    return st


@dataclass(frozen=True)
class CostSchedule:
    """Marginal electricity cost per slot and layout entry, cents per kWh.

    Negative entries model paid-to-charge periods. ``values`` has one row
    per slot (1-based access through :meth:`cost_row`).
    """

    layout: BlockLayout
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[1] != self.layout.dim:
            raise EvschedError("cost table shape does not match layout")
        if not np.isfinite(vals).all():
            raise EvschedError("non-finite cost entries")
        vals.setflags(write=False)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def cost_row(self, slot: int) -> np.ndarray:
        if not 1 <= slot <= self.horizon:
            raise EvschedError(f"slot {slot} outside horizon 1..{self.horizon}")
        return self.values[slot - 1]

    @classmethod
    def from_slot_prices(cls, layout: BlockLayout, prices) -> "CostSchedule":
        """Broadcast one scalar price per slot across all layout entries."""
        prices = np.asarray(prices, dtype=float)
        if prices.ndim != 1:
            raise EvschedError("slot prices must be a 1-D sequence")
        return cls(layout=layout, values=np.repeat(prices[:, None], layout.dim, axis=1))


def stage_cost(costs: CostSchedule, slot: int, u: np.ndarray) -> float:
    """Cents spent (negative: earned) by allocation ``u`` in ``slot``."""
    return float(np.dot(costs.cost_row(slot), u))


def partial_order_leq(a: FleetState, b: FleetState, tol: float = ENERGY_TOL) -> bool:
    """Componentwise state order used by the monotonicity diagnostics.

    ``a <= b`` requires: counts no larger, residuals equal on the departing
    block, residuals no larger on later blocks, and an aggregate window no
    larger. States on different layouts never compare.
    """
    if a.layout is not b.layout and a.layout != b.layout:
        return False
    lay = a.layout
    if (a.y > b.y).any():
        return False
    eq = lay.active & (lay.entry_deltas() == 0)
    later = lay.active & (lay.entry_deltas() >= 1)
    if np.abs(a.z[eq] - b.z[eq]).max(initial=0.0) > tol:
        return False
    if (a.z[later] > b.z[later] + tol).any():
        return False
    return a.d[0] <= b.d[0] + tol and a.d[1] <= b.d[1] + tol
