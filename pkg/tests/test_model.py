"""Layout indexing, state invariants, dynamics, and stage costs."""

import numpy as np
import pytest

from evsched.errors import EvschedError
from evsched.model import (
    CostSchedule,
    FleetState,
    Menu,
    build_layout,
    partial_order_leq,
    stage_cost,
    state_from_vector,
    transition,
    validate_arrivals,
    zero_state,
)

FULL_MENU_ITEMS = tuple(
    (float(m), n)
    for m, lo in ((10, 1), (20, 2), (30, 3))
    for n in range(lo, 7)
)


def test_item_order_sorted_by_window_then_energy(tri_layout):
    assert tri_layout.item_order == ((1.0, 1), (1.0, 2), (2.0, 2))


def test_three_item_layout_counts(tri_layout):
    # 2 blocks x 3 items; the (1,1) item is a structural zero at offset 1.
    assert tri_layout.dim == 6
    assert int(tri_layout.active.sum()) == 5
    assert tri_layout.state_dim == 14


def test_full_menu_layout_counts():
    lay = build_layout(Menu(items=FULL_MENU_ITEMS, rate_kw=10.0))
    assert lay.n_items == 15
    assert lay.n_blocks == 6
    assert lay.dim == 90
    assert lay.state_dim == 182
    # independent recount of the n > delta rule
    by_hand = sum(1 for d in range(6) for _, n in lay.item_order if n > d)
    assert by_hand == 59
    assert int(lay.active.sum()) == by_hand


def test_index_round_trip(tri_layout):
    for delta in range(tri_layout.n_blocks):
        for item in tri_layout.item_order:
            idx = tri_layout.index(delta, item)
            assert tri_layout.delta_of(idx) == delta
            assert tri_layout.item_of(idx) == item


def test_arrival_indices_inject_at_window_minus_one(tri_layout):
    expect = [tri_layout.index(n - 1, (m, n)) for m, n in tri_layout.item_order]
    assert tri_layout.arrival_indices().tolist() == expect


def test_stage_valid_respects_arrival_and_departure(tri_layout):
    horizon = 4
    for slot in range(1, horizon + 1):
        got = tri_layout.stage_valid(slot, horizon)
        for idx in range(tri_layout.dim):
            delta = tri_layout.delta_of(idx)
            _, n = tri_layout.item_of(idx)
            t = slot + delta - (n - 1)
            want = (n > delta) and t >= 1 and slot + delta <= horizon
            assert bool(got[idx]) == want, (slot, idx)


def test_menu_rejects_unfinishable_item():
    with pytest.raises(EvschedError):
        Menu(items=((25.0, 2),), rate_kw=10.0)


def test_menu_rejects_duplicates_and_bad_windows():
    with pytest.raises(EvschedError):
        Menu(items=((10.0, 2), (10.0, 2)), rate_kw=10.0)
    with pytest.raises(EvschedError):
        Menu(items=((10.0, 0),), rate_kw=10.0)


def test_state_rejects_content_in_structural_zeros(tri_layout):
    y = np.zeros(6, dtype=np.int64)
    z = np.zeros(6)
    idx = 3  # offset 1, item (1,1): structurally empty
    assert not tri_layout.active[idx]
    y[idx] = 1
    with pytest.raises(EvschedError):
        FleetState(layout=tri_layout, y=y, z=z, d=(0.0, 10.0))


def test_state_rejects_residual_above_demand(tri_layout):
    y = np.zeros(6, dtype=np.int64)
    z = np.zeros(6)
    y[0] = 1
    z[0] = 1.5  # item (1,1) holds at most 1 kWh per EV
    with pytest.raises(EvschedError):
        FleetState(layout=tri_layout, y=y, z=z, d=(0.0, 10.0))


def test_vector_round_trip(tri_layout):
    y = np.array([1, 0, 2, 0, 1, 1], dtype=np.int64)
    z = np.array([0.5, 0.0, 3.0, 0.0, 0.75, 1.25])
    st = FleetState(layout=tri_layout, y=y, z=z, d=(0.5, 4.0))
    back = state_from_vector(tri_layout, st.to_vector())
    assert np.array_equal(back.y, y)
    assert np.allclose(back.z, z)
    assert back.d == (0.5, 4.0)


def test_transition_injects_arrivals(kw10_layout):
    """A (20, 2) arrival lands at offset 1 carrying its full 20 kWh."""
    st = zero_state(kw10_layout, d=(0.0, 100.0))
    w = np.zeros(3, dtype=np.int64)
    j = kw10_layout.item_order.index((20.0, 2))
    w[j] = 1
    nxt = transition(st, np.zeros(kw10_layout.dim), w, d_next=(0.0, 100.0))
    idx = kw10_layout.index(1, (20.0, 2))
    assert nxt.y[idx] == 1
    assert nxt.z[idx] == 20.0
    assert nxt.total_residual() == 20.0


def test_transition_shifts_and_drains(kw10_layout):
    """Charging 10 of 15 kWh leaves 5 on the cohort, now one offset closer."""
    idx = kw10_layout.index(1, (20.0, 2))
    y = np.zeros(kw10_layout.dim, dtype=np.int64)
    z = np.zeros(kw10_layout.dim)
    y[idx] = 1
    z[idx] = 15.0
    st = FleetState(layout=kw10_layout, y=y, z=z, d=(0.0, 100.0))
    u = np.zeros(kw10_layout.dim)
    u[idx] = 10.0
    nxt = transition(st, u, np.zeros(3, dtype=np.int64), d_next=(0.0, 100.0))
    dest = kw10_layout.index(0, (20.0, 2))
    assert nxt.y[dest] == 1
    assert nxt.z[dest] == pytest.approx(5.0)


def test_transition_rejects_overdraw(tri_layout):
    st = zero_state(tri_layout, d=(0.0, 10.0))
    st = transition(st, np.zeros(6), [0, 1, 0], d_next=(0.0, 10.0))
    u = np.zeros(6)
    u[tri_layout.index(1, (1.0, 2))] = 1.5
    with pytest.raises(EvschedError):
        transition(st, u, [0, 0, 0], d_next=(0.0, 10.0))


def test_transition_drops_departing_block(tri_layout):
    st = zero_state(tri_layout, d=(0.0, 10.0))
    st = transition(st, np.zeros(6), [1, 0, 0], d_next=(0.0, 10.0))
    idx = tri_layout.index(0, (1.0, 1))
    assert st.y[idx] == 1
    u = np.zeros(6)
    u[idx] = 1.0  # departing cohorts must be topped off
    nxt = transition(st, u, [0, 0, 0], d_next=(0.0, 10.0))
    assert nxt.total_residual() == 0.0
    assert not nxt.y.any()


def test_validate_arrivals_rejects_fractions(tri_layout):
    with pytest.raises(EvschedError):
        validate_arrivals(tri_layout, np.array([0.5, 0.0, 0.0]))
    out = validate_arrivals(tri_layout, np.array([2.0, 0.0, 1.0]))
    assert out.dtype == np.int64


def test_stage_cost_examples(kw10_layout):
    prices = np.array([7.4, -4.4])
    costs = CostSchedule.from_slot_prices(kw10_layout, prices)
    u = np.zeros(kw10_layout.dim)
    u[0] = 60.0
    u[1] = 40.0
    assert stage_cost(costs, 1, u) == pytest.approx(740.0)
    u2 = np.zeros(kw10_layout.dim)
    u2[2] = 30.0
    assert stage_cost(costs, 2, u2) == pytest.approx(-132.0)


def test_cost_row_is_one_based(kw10_layout):
    costs = CostSchedule.from_slot_prices(kw10_layout, np.array([1.0, 2.0]))
    assert costs.cost_row(1)[0] == 1.0
    assert costs.cost_row(2)[0] == 2.0
    with pytest.raises(EvschedError):
        costs.cost_row(0)
    with pytest.raises(EvschedError):
        costs.cost_row(3)


def _state(layout, pairs, d):
    y = np.zeros(layout.dim, dtype=np.int64)
    z = np.zeros(layout.dim)
    for idx, count, resid in pairs:
        y[idx] = count
        z[idx] = resid
    return FleetState(layout=layout, y=y, z=z, d=d)


def test_partial_order_examples(tri_layout):
    i_far = tri_layout.index(1, (2.0, 2))
    a = _state(tri_layout, [(i_far, 1, 0.5)], d=(0.0, 5.0))
    b = _state(tri_layout, [(i_far, 1, 1.5)], d=(0.0, 5.0))
    assert partial_order_leq(a, b)
    assert not partial_order_leq(b, a)
    # departing residuals must match exactly, not just dominate
    i_now = tri_layout.index(0, (1.0, 1))
    c = _state(tri_layout, [(i_now, 1, 0.25)], d=(0.0, 5.0))
    e = _state(tri_layout, [(i_now, 1, 0.75)], d=(0.0, 5.0))
    assert not partial_order_leq(c, e)
    assert partial_order_leq(c, c)
    # larger aggregate ceiling dominates
    f = _state(tri_layout, [(i_far, 1, 0.5)], d=(0.0, 9.0))
    assert partial_order_leq(a, f)
    assert not partial_order_leq(f, a)
