"""Exact tabulated DP: brute-force cross-checks and structural properties.

The single-item enumeration below recomputes stage values from scratch
(action grid times arrival outcomes, recursively) and is the reference the
oracle must reproduce digit for digit on shared grid points.
"""

import numpy as np
import pytest

from evsched.arrivals import model_for_layout
from evsched.bellman import lipschitz_bound
from evsched.errors import InstanceTooLargeError
from evsched.model import CostSchedule, Menu, build_layout
from evsched.oracle import ExactOracle, exhaustive_monotonicity, lipschitz_profile


@pytest.fixture(scope="module")
def tiny_oracle(tiny_scenario):
    sc = tiny_scenario
    return ExactOracle(
        sc.layout, sc.costs, sc.arrival_model, sc.d_schedule,
        z_divisions=sc.oracle_divisions,
    )


def test_single_item_oracle_matches_hand_enumeration():
    """Menu {(1,1)}, equiprobable 0/1 arrivals, two slots."""
    menu = Menu(items=((1.0, 1),), rate_kw=1.0)
    lay = build_layout(menu)
    prices = np.array([2.0, -1.0])
    costs = CostSchedule.from_slot_prices(lay, prices)
    pmfs = np.full((2, 1, 2), 0.5)
    model = model_for_layout(
        lay, 2, "empirical", means=np.full((2, 1), 0.5), cap=1, pmfs=pmfs,
    )
    d = np.array([[0.0, 10.0], [0.0, 10.0]])
    oracle = ExactOracle(lay, costs, model, d, z_divisions=2)

    def hand_value(s, z):
        # the one entry is always departing, so the allocation is pinned
        cost_now = prices[s - 1] * z
        if s == 2:
            return cost_now
        out = 0.0
        for w, p in ((0, 0.5), (1, 0.5)):
            out += p * hand_value(s + 1, 1.0 * w)
        return cost_now + out

    for s in (1, 2):
        states = oracle.grid_states(s)
        got = oracle.value_batch(s, states)
        zcol = states[:, lay.dim]
        want = np.array([hand_value(s, z) for z in zcol])
        assert np.allclose(got, want, atol=1e-12), s


def test_tiny_oracle_departing_slope_is_current_price(tiny_oracle, tiny_scenario):
    """One extra kWh on a departing cohort costs exactly today's price."""
    lay = tiny_scenario.layout
    prices = [2.0, -2.0, 2.0, -2.0]
    idx = lay.index(0, (1.0, 1))
    step = 0.25
    for s in range(1, 5):
        base = np.zeros(lay.state_dim)
        base[idx] = 1.0
        base[-2], base[-1] = 0.0, 50.0
        probe = base.copy()
        probe[lay.dim + idx] = step
        vals = tiny_oracle.value_batch(s, np.vstack([base, probe]))
        slope = (vals[1] - vals[0]) / step
        assert slope == pytest.approx(prices[s - 1], abs=1e-9), s


def test_tiny_oracle_deferrable_slope_is_best_remaining_price(tiny_oracle, tiny_scenario):
    """A cohort with one slot of slack charges at the cheaper of now/next."""
    lay = tiny_scenario.layout
    idx = lay.index(1, (1.0, 2))
    step = 0.25
    for s in (1, 2, 3):
        base = np.zeros(lay.state_dim)
        base[idx] = 1.0
        base[-2], base[-1] = 0.0, 50.0
        probe = base.copy()
        probe[lay.dim + idx] = step
        vals = tiny_oracle.value_batch(s, np.vstack([base, probe]))
        slope = (vals[1] - vals[0]) / step
        assert slope == pytest.approx(-2.0, abs=1e-9), s


def test_exhaustive_monotonicity_zero_violations(tiny_oracle, tiny_scenario):
    total_pairs = 0
    for s in range(1, 5):
        pairs, violations, worst = exhaustive_monotonicity(tiny_oracle, s)
        assert violations == 0, (s, worst)
        total_pairs += pairs
    assert total_pairs > 10_000


def test_lipschitz_profile_below_recursion_bound(tiny_oracle, tiny_scenario):
    est = lipschitz_profile(tiny_oracle)
    bound = lipschitz_bound(tiny_scenario.costs, tiny_scenario.layout, 4)
    assert est.shape == bound.shape
    assert (est <= bound + 1e-9).all()
    assert (est > 0).any()


def test_value_range_is_finite(tiny_oracle):
    lo, hi = tiny_oracle.value_range(1)
    assert np.isfinite(lo) and np.isfinite(hi)
    assert hi > lo


def test_grid_states_carry_d_columns(tiny_oracle, tiny_scenario):
    states = tiny_oracle.grid_states(2)
    d1, d2 = tiny_scenario.d_schedule[1]
    assert (states[:, -2] == d1).all()
    assert (states[:, -1] == d2).all()


def test_export_csv(tmp_path, tiny_oracle):
    out = tmp_path / "oracle.csv"
    tiny_oracle.export_csv(out)
    text = out.read_text().splitlines()
    assert len(text) > 10
    assert text[0].startswith("stage")


def test_oracle_refuses_oversized_instances(tri_layout):
    # at three slots the middle stage holds five live entries, over the cap
    costs = CostSchedule.from_slot_prices(tri_layout, [1.0, -1.0, 1.0])
    model = model_for_layout(tri_layout, 3, "truncated_poisson", 0.5, 2)
    d = np.tile([0.0, 10.0], (3, 1))
    with pytest.raises(InstanceTooLargeError):
        ExactOracle(tri_layout, costs, model, d, z_divisions=4, max_entries=3)
