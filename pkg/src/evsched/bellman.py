"""One-stage optimization against a fitted continuation value.

The stage objective is the immediate allocation cost plus the sample
average of the continuation value over k shared arrival draws. The inner
minimizer is Frank-Wolfe over the slot's action polytope: the linear
oracle is exact (:func:`evsched.feasible.linmin`), gradients are analytic
for the linear regressor and central finite differences for the network,
steps follow the classic 2/(iter+2) schedule, and the best iterate across
multistarts is kept. For a linear continuation the first oracle call is
already optimal, so the solver degenerates gracefully.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvschedError, NonFiniteObjectiveError
from .feasible import ActionPolytope, linmin
from .model import BlockLayout, FleetState
from .rng import substream


@dataclass
class InnerSolverConfig:
    """Knobs for the stage minimizer.

    gap_tol is an absolute duality-gap target in cents; multistarts counts
    the deterministic starts (bound vertex, cost vertex) plus seeded random
    vertices beyond two.
    """

    method: str = "frank_wolfe"
    max_iters: int = 60
    gap_tol: float = 1e-4
    multistarts: int = 3
    seed: int = 0
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.method not in ("frank_wolfe", "linear_only"):
            raise EvschedError(f"unknown inner solver method {self.method!r}")
        if self.max_iters < 1 or self.multistarts < 1:
            raise EvschedError("max_iters and multistarts must be positive")


@dataclass
class BellmanResult:
    value: float
    u: np.ndarray
    gap: float
    converged: bool
    evaluations: int = 0


class StageProblem:
    """Stage data: slot cost row, shared arrival draws, continuation model."""

    def __init__(
        self,
        layout: BlockLayout,
        slot: int,
        cost: np.ndarray,
        samples: np.ndarray,
        d_next: tuple[float, float],
        next_model=None,
    ):
        self.layout = layout
        self.slot = slot
        self.cost = np.asarray(cost, dtype=float)
        self.samples = np.asarray(samples, dtype=np.int64)
        self.d_next = (float(d_next[0]), float(d_next[1]))
        self.next_model = next_model
        if self.cost.shape != (layout.dim,):
            raise EvschedError("cost row length does not match layout")
        if self.samples.ndim != 2 or self.samples.shape[1] != layout.n_items:
            raise EvschedError("arrival samples must be (k, n_items)")
        inject = layout.arrival_indices()
        k = self.samples.shape[0]
        self._inj_y = np.zeros((k, layout.dim))
        self._inj_z = np.zeros((k, layout.dim))
        self._inj_y[:, inject] = self.samples
        self._inj_z[:, inject] = self.samples * layout.item_m

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    def _shift(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros_like(vec, dtype=float)
        nb = self.layout.n_items
        out[: self.layout.dim - nb] = vec[nb:]
        return out

    def next_state_batch(self, state: FleetState, u: np.ndarray) -> np.ndarray:
        """Flattened successor states under each shared arrival draw."""
        base = self._base_next(state)
        out = base.copy()
        self._apply_u(out, np.asarray(u, dtype=float))
        return out

    def _base_next(self, state: FleetState) -> np.ndarray:
        lay = self.layout
        k = self.k
        base = np.zeros((k, lay.state_dim))
        base[:, : lay.dim] = self._shift(state.y.astype(float)) + self._inj_y
        base[:, lay.dim : 2 * lay.dim] = self._shift(state.z) + self._inj_z
        base[:, -2] = self.d_next[0]
        base[:, -1] = self.d_next[1]
        return base

    def _apply_u(self, batch: np.ndarray, u: np.ndarray):
        lay = self.layout
        nb = lay.n_items
        width = lay.dim - nb
        batch[:, lay.dim : lay.dim + width] -= u[None, nb:]


def empirical_bellman(
    sp: StageProblem,
    state: FleetState,
    polytope: ActionPolytope,
    cfg: InnerSolverConfig,
    extra_starts=None,
) -> BellmanResult:
    """Minimize cost(u) + mean continuation over the given polytope.

    Raises EmptyPolytopeError via linmin when the polytope is infeasible
    and NonFiniteObjectiveError when the continuation model misbehaves.
    The returned gap is the Frank-Wolfe linearization gap at the reported
    point (zero means certified optimal for convex objectives).
    """
    c = sp.cost
    if sp.next_model is None:
        u = linmin(polytope, c)
        return BellmanResult(value=float(c @ u), u=u, gap=0.0, converged=True, evaluations=1)

    model = sp.next_model
    base = sp._base_next(state)
    lay = sp.layout
    nb = lay.n_items
    width = lay.dim - nb
    evals = 0

    def objective(u: np.ndarray) -> float:
        nonlocal evals
        batch = base.copy()
        batch[:, lay.dim : lay.dim + width] -= u[None, nb:]
        vals = model.evaluate_batch(batch)
        evals += 1
        out = float(c @ u + vals.mean())
        if not np.isfinite(out):
            raise NonFiniteObjectiveError(f"objective non-finite at slot {sp.slot}")
        return out

    analytic = model.grad_state_batch(base) is not None if hasattr(model, "grad_state_batch") else False

    free = polytope.ub - polytope.lb > 1e-12
    fd_h = cfg.fd_step * np.maximum(polytope.ub, 1.0)

    def gradient(u: np.ndarray) -> np.ndarray:
        batch = base.copy()
        batch[:, lay.dim : lay.dim + width] -= u[None, nb:]
        if analytic:
            G = model.grad_state_batch(batch)
            gz = G[:, lay.dim : 2 * lay.dim].mean(axis=0)
            g = c.copy()
            g[nb:] -= gz[:width]
            return g
        g = c.astype(float).copy()
        idx = np.flatnonzero(free)
        if idx.size == 0:
            return g
        probes = np.repeat(batch[None, :, :], 2 * idx.size, axis=0)
        for row, j in enumerate(idx):
            if j >= nb:
                probes[2 * row, :, lay.dim + j - nb] -= fd_h[j]
                probes[2 * row + 1, :, lay.dim + j - nb] += fd_h[j]
        flat = probes.reshape(-1, lay.state_dim)
        vals = model.evaluate_batch(flat).reshape(2 * idx.size, sp.k).mean(axis=1)
        for row, j in enumerate(idx):
            if j >= nb:
                # u enters the successor residual with a minus sign
                g[j] += -(vals[2 * row + 1] - vals[2 * row]) / (2 * fd_h[j])
        return g

    starts = [linmin(polytope, np.ones(lay.dim)), linmin(polytope, c)]
    rng = substream(cfg.seed, "bellman-starts", sp.slot)
    for _ in range(max(0, cfg.multistarts - 2)):
        scale = 1.0 + float(np.abs(c).max())
        starts.append(linmin(polytope, rng.standard_normal(lay.dim) * scale))
    for u0 in extra_starts or []:
        starts.append(np.asarray(u0, dtype=float))

    best_val = np.inf
    best_u = None
    best_gap = np.inf
    converged = False

    if cfg.method == "linear_only":
        g = gradient(starts[0])
        u = linmin(polytope, g)
        val = objective(u)
        gap = float(g @ (starts[0] - u))
        return BellmanResult(value=val, u=u, gap=max(gap, 0.0), converged=True, evaluations=evals)

    for u0 in starts:
        u = u0.copy()
        for it in range(cfg.max_iters):
            g = gradient(u)
            v = linmin(polytope, g)
            gap = float(g @ (u - v))
            val = objective(u)
            if val < best_val - 1e-15 or best_u is None:
                best_val, best_u, best_gap = val, u.copy(), gap
            if gap <= cfg.gap_tol:
                if val <= best_val + 1e-15:
                    converged = True
                break
            u = u + (2.0 / (it + 2.0)) * (v - u)
        else:
            val = objective(u)
            if val < best_val:
                best_val, best_u = val, u.copy()
                g = gradient(u)
                v = linmin(polytope, g)
                best_gap = float(g @ (u - v))

    return BellmanResult(
        value=best_val,
        u=best_u,
        gap=max(best_gap, 0.0),
        converged=converged or best_gap <= cfg.gap_tol,
        evaluations=evals,
    )


# ---------------------------------------------------------------------------
# diagnostics used by the verification harness


@dataclass
class MonotonicityReport:
    pairs: int
    violations: int
    max_violation: float
    examples: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def monotonicity_check(value_fn, lo_states: np.ndarray, hi_states: np.ndarray, tol: float = 1e-9) -> MonotonicityReport:
    """Check that values do not increase along the given ordered pairs.

    ``lo_states[i] <= hi_states[i]`` in the state order is the caller's
    responsibility; the check flags pairs where value(hi) > value(lo) + tol.
    """
    v_lo = np.asarray(value_fn(lo_states), dtype=float)
    v_hi = np.asarray(value_fn(hi_states), dtype=float)
    excess = v_hi - v_lo
    bad = np.flatnonzero(excess > tol)
    examples = [(int(i), float(excess[i])) for i in bad[:10]]
    return MonotonicityReport(
        pairs=len(v_lo),
        violations=int(bad.size),
        max_violation=float(excess.max(initial=-np.inf)),
        examples=examples,
    )


def lipschitz_estimate(value_fn, a_states: np.ndarray, b_states: np.ndarray) -> float:
    """Largest |value difference| / sup-norm distance over the given pairs."""
    va = np.asarray(value_fn(a_states), dtype=float)
    vb = np.asarray(value_fn(b_states), dtype=float)
    dist = np.max(np.abs(a_states - b_states), axis=1)
    keep = dist > 1e-12
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(va - vb)[keep] / dist[keep]))


def lipschitz_bound(costs, layout: BlockLayout, horizon: int) -> np.ndarray:
    """Per-stage Lipschitz bounds from the backward recursion.

    The feasible-set correspondence is Lipschitz with constant
    max(rate * slot_hours, 1); each stage adds its cost-row l1 norm times
    that constant plus the inflated continuation constant.
    """
    l_gamma = max(layout.menu.slot_energy_cap, 1.0)
    bounds = np.zeros(horizon + 2)
    for s in range(horizon, 0, -1):
        valid = layout.stage_valid(s, horizon)
        c_l1 = float(np.abs(costs.cost_row(s))[valid].sum())
        bounds[s] = c_l1 * l_gamma + bounds[s + 1] * (1.0 + l_gamma)
    return bounds[1 : horizon + 1]


@dataclass
class NonexpansionReport:
    trials: int
    max_lhs: float
    max_excess: float
    tol_used: float
    failures: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


def nonexpansiveness_check(
    make_problem,
    v1,
    v2,
    states,
    polytope_fn,
    cfg: InnerSolverConfig,
    tol: float,
) -> NonexpansionReport:
    """Operator distance vs. function distance under shared arrival draws.

    For each state the stage problem is solved under both continuations,
    cross-seeding each solve with the other's minimizer until neither
    improves; the resulting value gap must not exceed the sup distance of
    the continuations over the successor states actually reached, plus
    ``tol``.
    """
    failures = 0
    max_lhs = 0.0
    max_excess = -np.inf
    for x in states:
        sp1 = make_problem(v1)
        sp2 = make_problem(v2)
        p = polytope_fn(x)
        r1 = empirical_bellman(sp1, x, p, cfg)
        r2 = empirical_bellman(sp2, x, p, cfg, extra_starts=[r1.u])
        for _ in range(4):
            r1n = empirical_bellman(sp1, x, p, cfg, extra_starts=[r2.u])
            r2n = empirical_bellman(sp2, x, p, cfg, extra_starts=[r1n.u])
            done = r1n.value >= r1.value - 1e-12 and r2n.value >= r2.value - 1e-12
            r1 = r1n if r1n.value < r1.value else r1
            r2 = r2n if r2n.value < r2.value else r2
            if done:
                break
        succ = np.vstack([sp1.next_state_batch(x, r1.u), sp1.next_state_batch(x, r2.u)])
        rhs = float(np.max(np.abs(v1.evaluate_batch(succ) - v2.evaluate_batch(succ))))
        lhs = abs(r1.value - r2.value)
        max_lhs = max(max_lhs, lhs)
        max_excess = max(max_excess, lhs - rhs)
        if lhs > rhs + tol:
            failures += 1
    return NonexpansionReport(
        trials=len(states),
        max_lhs=max_lhs,
        max_excess=max_excess,
        tol_used=tol,
        failures=failures,
    )
