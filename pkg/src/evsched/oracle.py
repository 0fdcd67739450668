"""Exact backward induction on small instances.

Stage values are tabulated per integer cohort-count combination on a
rectangular residual-energy grid (step = item energy / z_divisions) and
interpolated multilinearly between grid points. The per-state minimizer
exploits the problem structure: deadline entries are forced, remaining
coordinates are swept by coordinate descent over the lattice of grid
crossings, where the piecewise-linear continuation attains its minima.
With one free coordinate per state (the intended regime) a single sweep
is exact.

Tables are keyed by stage and count combination and stay closed under
the dynamics because a shifted entry keeps its arrival slot and thus its
arrival cap. Anything bigger than a few active entries per stage is
refused up front rather than tabulated badly.
"""

from __future__ import annotations

import csv
import itertools

import numpy as np

from .arrivals import ArrivalModel
from .errors import InstanceTooLargeError
from .feasible import gamma, linmin
from .model import BlockLayout, CostSchedule, FleetState

GRID_TOL = 1e-9


class _Block:
    __slots__ = ("grids", "values")

    def __init__(self, grids, values):
        self.grids = grids
        self.values = values


def _interp_batch(grids, values, queries: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a small tensor at a batch of points."""
    n = queries.shape[0]
    f = len(grids)
    if f == 0:
        return np.full(n, float(values[()]))
    lo_idx, frac = [], []
    for d, g in enumerate(grids):
        if len(g) == 1:
            lo_idx.append(np.zeros(n, dtype=np.int64))
            frac.append(np.zeros(n))
            continue
        i = np.clip(np.searchsorted(g, queries[:, d]) - 1, 0, len(g) - 2)
        t = (queries[:, d] - g[i]) / (g[i + 1] - g[i])
        lo_idx.append(i)
        frac.append(np.clip(t, 0.0, 1.0))
    acc = np.zeros(n)
    for corner in itertools.product((0, 1), repeat=f):
        w = np.ones(n)
        pos = []
        degenerate = False
        for d, b in enumerate(corner):
            if len(grids[d]) == 1:
                if b:
                    degenerate = True
                    break
                pos.append(lo_idx[d])
            else:
                w = w * (frac[d] if b else 1.0 - frac[d])
                pos.append(lo_idx[d] + b)
        if degenerate:
            continue
        acc += w * values[tuple(pos)]
    return acc


class ExactOracle:
    """Tabulated stage values for a small instance."""

    def __init__(
        self,
        layout: BlockLayout,
        costs: CostSchedule,
        arrivals: ArrivalModel,
        d_schedule: np.ndarray,
        z_divisions: int = 8,
        max_entries: int = 3,
        max_points: int = 2_000_000,
    ):
        if costs.horizon != arrivals.horizon:
            raise InstanceTooLargeError("cost and arrival horizons disagree")
        self.layout = layout
        self.costs = costs
        self.arrivals = arrivals
        self.horizon = costs.horizon
        self.z_divisions = int(z_divisions)
        d_schedule = np.asarray(d_schedule, dtype=float)
        if d_schedule.shape != (self.horizon, 2):
            raise InstanceTooLargeError("d_schedule must be (horizon, 2)")
        self.d_schedule = d_schedule
        self.valid_idx: dict[int, np.ndarray] = {}
        self.blocks: dict[int, dict[tuple, _Block]] = {}
        self.infeasible_states = 0
        self._check_size(max_entries, max_points)
        self._build()

    # -- construction -----------------------------------------------------

    def _entry_caps(self, s: int, vi: np.ndarray) -> list[int]:
        caps = []
        for e in vi:
            j = int(e) % self.layout.n_items
            t = self.layout.arrival_slot_of(int(e), s)
            caps.append(int(self.arrivals.caps[t - 1, j]))
        return caps

    def _check_size(self, max_entries: int, max_points: int):
        total = 0
        for s in range(1, self.horizon + 1):
            vi = np.flatnonzero(self.layout.stage_valid(s, self.horizon))
            if len(vi) > max_entries:
                raise InstanceTooLargeError(
                    f"stage {s} has {len(vi)} tabulated entries, limit {max_entries}"
                )
            pts = 1
            for cap in self._entry_caps(s, vi):
                per_entry = sum(y * self.z_divisions + 1 for y in range(cap + 1))
                pts *= max(per_entry, 1)
            total += pts
        if total > max_points:
            raise InstanceTooLargeError(f"{total} grid points exceed budget {max_points}")

    def _support(self, slot: int):
        """Arrival support at ``slot`` as (probability, counts) pairs."""
        pmfs = [self.arrivals.pmf(slot, j) for j in range(self.layout.n_items)]
        out = []
        for combo in itertools.product(*[range(len(p)) for p in pmfs]):
            prob = 1.0
            for j, c in enumerate(combo):
                prob *= pmfs[j][c]
            if prob > 0.0:
                out.append((prob, np.array(combo, dtype=np.int64)))
        return out

    def _build(self):
        lay = self.layout
        nb = lay.n_items
        dim = lay.dim
        m_entry = lay.entry_m()
        for s in range(self.horizon, 0, -1):
            vi = np.flatnonzero(lay.stage_valid(s, self.horizon))
            self.valid_idx[s] = vi
            caps = self._entry_caps(s, vi)
            c_row = self.costs.cost_row(s)
            d_here = tuple(self.d_schedule[s - 1])
            support = None
            vi_next = None
            if s < self.horizon:
                support = self._support(s + 1)
                vi_next = self.valid_idx[s + 1]
            inject = lay.arrival_indices()
            stage_blocks: dict[tuple, _Block] = {}
            for combo in itertools.product(*[range(c + 1) for c in caps]):
                y_full = np.zeros(dim, dtype=np.int64)
                y_full[vi] = combo
                grids = [
                    np.arange(y * self.z_divisions + 1) * (m_entry[e] / self.z_divisions)
                    for e, y in zip(vi, combo)
                ]
                # successor blocks depend on counts and draws, not residuals
                succ = []
                if support is not None:
                    y_shift = np.zeros(dim, dtype=np.int64)
                    y_shift[: dim - nb] = y_full[nb:]
                    for prob, w in support:
                        y_next = y_shift.copy()
                        y_next[inject] += w
                        inj_z = np.zeros(dim)
                        inj_z[inject] = w * lay.item_m
                        key = tuple(int(v) for v in y_next[vi_next])
                        succ.append((prob, key, inj_z))
                shape = tuple(len(g) for g in grids)
                values = np.empty(shape if shape else (1,))
                for idx in np.ndindex(*shape) if shape else [()]:
                    z_full = np.zeros(dim)
                    for d, e in enumerate(vi):
                        z_full[e] = grids[d][idx[d]]
                    state = FleetState(layout=lay, y=y_full, z=z_full, d=d_here)
                    val = self._solve_state(s, state, c_row, succ, vi_next)
                    if shape:
                        values[idx] = val
                    else:
                        values[0] = val
                stage_blocks[tuple(combo)] = _Block(grids, values)
            self.blocks[s] = stage_blocks

    def _solve_state(self, s, state, c_row, succ, vi_next) -> float:
        lay = self.layout
        nb = lay.n_items
        dim = lay.dim
        p = gamma(state)
        if p.is_empty():
            self.infeasible_states += 1
            return np.inf

        def batch_value(U: np.ndarray) -> np.ndarray:
            vals = U @ c_row
            if succ:
                sh = np.zeros((U.shape[0], dim))
                sh[:, : dim - nb] = state.z[None, nb:] - U[:, nb:]
                for prob, key, inj_z in succ:
                    block = self.blocks[s + 1][key]
                    q = sh[:, vi_next] + inj_z[vi_next][None, :]
                    vals = vals + prob * _interp_batch(block.grids, block.values, q)
            return vals

        u = linmin(p, c_row)
        best = float(batch_value(u[None, :])[0])
        deltas = lay.entry_deltas()
        free = [
            int(e)
            for e in np.flatnonzero(p.ub - p.lb > GRID_TOL)
            if deltas[e] >= 1
        ]
        if not free or not succ:
            return best
        m_entry = lay.entry_m()
        for _ in range(8):
            improved = False
            for e in free:
                rest = float(u.sum() - u[e])
                lo = max(p.lb[e], p.agg_lo - rest)
                hi = min(p.ub[e], p.agg_hi - rest)
                if hi < lo - GRID_TOL:
                    continue
                step = m_entry[e] / self.z_divisions
                ks = np.arange(np.ceil(lo / step - GRID_TOL), np.floor(hi / step + GRID_TOL) + 1)
                cands = np.unique(np.clip(np.concatenate([ks * step, [lo, hi]]), lo, hi))
                U = np.repeat(u[None, :], len(cands), axis=0)
                U[:, e] = cands
                vals = batch_value(U)
                j = int(np.argmin(vals))
                if vals[j] < best - 1e-12:
                    best = float(vals[j])
                    u = U[j]
                    improved = True
            if not improved:
                break
        return best

    # -- queries -----------------------------------------------------------

    def value_batch(self, s: int, states: np.ndarray) -> np.ndarray:
        """Interpolated stage values for flattened states (integer counts)."""
        if s == self.horizon + 1:
            return np.zeros(len(states))
        lay = self.layout
        vi = self.valid_idx[s]
        X = np.asarray(states, dtype=float)
        y = np.rint(X[:, : lay.dim]).astype(np.int64)
        if np.max(np.abs(X[:, : lay.dim] - y), initial=0.0) > 1e-6:
            raise InstanceTooLargeError("oracle queries need integer counts")
        out = np.empty(len(X))
        keys = [tuple(int(v) for v in row[vi]) for row in y]
        order: dict[tuple, list[int]] = {}
        for i, k in enumerate(keys):
            order.setdefault(k, []).append(i)
        for key, rows in order.items():
            block = self.blocks[s].get(key)
            if block is None:
                raise InstanceTooLargeError(f"counts {key} outside tabulated range at stage {s}")
            q = X[np.asarray(rows)][:, lay.dim + vi]
            out[np.asarray(rows)] = _interp_batch(block.grids, block.values, q)
        return out

    def value_fn(self, s: int):
        return lambda X: self.value_batch(s, np.atleast_2d(X))

    def value_range(self, s: int) -> tuple[float, float]:
        lo, hi = np.inf, -np.inf
        for block in self.blocks[s].values():
            finite = block.values[np.isfinite(block.values)]
            if finite.size:
                lo = min(lo, float(finite.min()))
                hi = max(hi, float(finite.max()))
        return lo, hi

    def grid_states(self, s: int) -> np.ndarray:
        """All tabulated states at stage ``s`` as flattened rows."""
        lay = self.layout
        vi = self.valid_idx[s]
        rows = []
        d_here = self.d_schedule[s - 1]
        for key, block in self.blocks[s].items():
            shape = tuple(len(g) for g in block.grids)
            for idx in np.ndindex(*shape) if shape else [()]:
                vec = np.zeros(lay.state_dim)
                vec[vi] = key
                for d, e in enumerate(vi):
                    vec[lay.dim + e] = block.grids[d][idx[d]]
                vec[-2], vec[-1] = d_here
                rows.append(vec)
        return np.array(rows)

    def export_csv(self, path):
        lay = self.layout
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["stage"]
                + [f"y{e}" for e in range(lay.dim)]
                + [f"z{e}" for e in range(lay.dim)]
                + ["value"]
            )
            for s in range(1, self.horizon + 1):
                states = self.grid_states(s)
                vals = self.value_batch(s, states)
                for row, v in zip(states, vals):
                    writer.writerow(
                        [s]
                        + [int(c) for c in row[: lay.dim]]
                        + [f"{c:.6f}" for c in row[lay.dim : 2 * lay.dim]]
                        + [f"{v:.9f}"]
                    )


def exhaustive_monotonicity(oracle: ExactOracle, s: int, tol: float = 1e-9):
    """Check every comparable tabulated pair at stage ``s``.

    Two grid states compare when counts are ordered entrywise, deadline
    residuals match exactly, and later residuals are ordered. Grids share
    a common step, so index order is value order and a suffix-maximum
    over the dominating block answers all pairs at once.

    Returns (pairs_checked, violating_lower_states, max_excess).
    """
    lay = oracle.layout
    vi = oracle.valid_idx[s]
    deltas = lay.entry_deltas()[vi]
    keys = sorted(oracle.blocks[s].keys())
    pairs = 0
    violations = 0
    max_excess = -np.inf
    for ka in keys:
        block_a = oracle.blocks[s][ka]
        na = tuple(len(g) for g in block_a.grids)
        for kb in keys:
            if any(a > b for a, b in zip(ka, kb)):
                continue
            block_b = oracle.blocks[s][kb]
            nb = tuple(len(g) for g in block_b.grids)
            # dominating suffix over later-delta axes, equality on deadline axes
            suffix = block_b.values.copy()
            count = 1
            for ax, d in enumerate(deltas):
                if d >= 1:
                    suffix = np.flip(
                        np.maximum.accumulate(np.flip(suffix, axis=ax), axis=ax), axis=ax
                    )
                    count *= sum(nb[ax] - i for i in range(na[ax]))
                else:
                    count *= na[ax]
            pairs += count
            region = suffix[tuple(slice(0, n) for n in na)]
            excess = region - block_a.values
            finite = np.isfinite(excess)
            if finite.any():
                max_excess = max(max_excess, float(excess[finite].max()))
            violations += int(np.count_nonzero(excess[finite] > tol))
    return pairs, violations, max_excess


def lipschitz_profile(oracle: ExactOracle) -> np.ndarray:
    """Per-stage empirical Lipschitz constants from the tables.

    Slopes are measured along every single-axis grid segment and across
    count-adjacent blocks at shared residual points (count distance one).
    """
    out = np.zeros(oracle.horizon)
    for s in range(1, oracle.horizon + 1):
        worst = 0.0
        items = list(oracle.blocks[s].items())
        for key, block in items:
            vals = block.values
            for ax, g in enumerate(block.grids):
                if len(g) < 2:
                    continue
                step = g[1] - g[0]
                dv = np.abs(np.diff(vals, axis=ax))
                finite = np.isfinite(dv)
                if finite.any():
                    worst = max(worst, float(dv[finite].max()) / step)
            for ax in range(len(key)):
                up = list(key)
                up[ax] += 1
                other = oracle.blocks[s].get(tuple(up))
                if other is None:
                    continue
                shared = tuple(slice(0, len(g)) for g in block.grids)
                dv = np.abs(other.values[shared] - vals)
                finite = np.isfinite(dv)
                if finite.any():
                    worst = max(worst, float(dv[finite].max()))
        out[s - 1] = worst
    return out
