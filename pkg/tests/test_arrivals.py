"""Arrival families: pmf closed forms, sampling, and bounded perturbation."""

import math

import numpy as np
import pytest

from evsched.arrivals import ArrivalModel, ParameterBox, model_for_layout
from evsched.errors import EvschedError
from evsched.rng import substream


def _poisson_model(layout, horizon=4, mean=0.8, cap=2):
    return model_for_layout(layout, horizon, "truncated_poisson", mean, cap)


def test_truncated_poisson_pmf_closed_form(tri_layout):
    """lambda=1 capped at 2 folds the tail onto the cap."""
    model = model_for_layout(tri_layout, 4, "truncated_poisson", 1.0, 2)
    p = model.pmf(1, 0)
    e1 = math.exp(-1.0)
    assert p == pytest.approx([e1, e1, 1.0 - 2.0 * e1], abs=1e-12)
    assert p.sum() == pytest.approx(1.0)


def test_pmf_rows_sum_to_one(tri_layout):
    model = _poisson_model(tri_layout)
    for slot in range(1, 5):
        for j in range(tri_layout.n_items):
            assert model.pmf(slot, j).sum() == pytest.approx(1.0, abs=1e-12)


def test_empirical_mean_within_three_sigma(tri_layout):
    model = model_for_layout(tri_layout, 4, "truncated_poisson", 2.0, 10)
    pmf = model.pmf(1, 0)
    k = np.arange(pmf.size)
    mean = float(k @ pmf)
    var = float((k - mean) ** 2 @ pmf)
    draws = model.sample_many(1, 100_000, substream(123, "arrival-moments"))
    emp = draws[:, 0].mean()
    assert abs(emp - mean) <= 3.0 * math.sqrt(var / draws.shape[0])


def test_horizon_validity_auto_zeroed(tri_layout):
    """A 2-slot item cannot become active on the final slot."""
    model = _poisson_model(tri_layout, horizon=4)
    late = model.mean_vector(4)
    j1 = tri_layout.item_order.index((1.0, 1))
    j2 = tri_layout.item_order.index((1.0, 2))
    assert late[j1] > 0
    assert late[j2] == 0.0
    assert model.pmf(4, j2).tolist() == [1.0]


def test_direct_construction_rejects_late_windows(tri_layout):
    means = np.full((4, 3), 0.5)
    caps = np.full((4, 3), 2, dtype=np.int64)
    with pytest.raises(EvschedError):
        ArrivalModel(
            family="truncated_poisson",
            horizon=4,
            item_windows=(1, 2, 2),
            means=means,
            caps=caps,
        )


def test_sampling_is_reproducible(tri_layout):
    model = _poisson_model(tri_layout)
    a = model.sample_many(2, 32, substream(9, "x"))
    b = model.sample_many(2, 32, substream(9, "x"))
    assert np.array_equal(a, b)
    c = model.sample_many(2, 32, substream(10, "x"))
    assert not np.array_equal(a, c)


def test_samples_respect_caps(tri_layout, rng):
    model = _poisson_model(tri_layout, mean=5.0, cap=2)
    draws = model.sample_many(1, 500, rng)
    assert draws.max() <= 2
    assert draws.min() >= 0


def test_perturb_scales_mean_and_keeps_family(tri_layout):
    model = _poisson_model(tri_layout)
    scaled = model.perturb(mean_scale=1.5)
    assert scaled.family == "truncated_poisson"
    assert np.allclose(scaled.means, 1.5 * model.means)


def test_perturb_variance_swaps_to_gaussian(tri_layout):
    model = _poisson_model(tri_layout)
    swapped = model.perturb(variance=4.0)
    assert swapped.family == "truncated_gaussian"
    assert swapped.variance == 4.0
    # means carry over untouched
    assert np.allclose(swapped.means, model.means)
    assert swapped.pmf(1, 0).sum() == pytest.approx(1.0)


def test_perturb_outside_box_rejected(tri_layout):
    box = ParameterBox(mean_scale=(0.5, 2.0), variance=(0.0, 10.0))
    model = model_for_layout(tri_layout, 4, "truncated_poisson", 0.8, 2, box=box)
    with pytest.raises(EvschedError):
        model.perturb(mean_scale=3.0)
    with pytest.raises(EvschedError):
        model.perturb(variance=50.0)


def test_perturbation_moves_pmf_continuously(tri_layout):
    """Total-variation shift from a 10% mean bump stays under the Poisson
    coupling bound |d lambda|, which truncation can only shrink."""
    model = _poisson_model(tri_layout, mean=0.8, cap=2)
    bumped = model.perturb(mean_scale=1.1)
    tv = 0.5 * np.abs(model.pmf(1, 0) - bumped.pmf(1, 0)).sum()
    assert tv < 0.1 * 0.8 + 1e-12


def test_deterministic_family_rounds_mean(tri_layout):
    model = model_for_layout(tri_layout, 4, "deterministic", 1.4, 3)
    assert model.pmf(1, 0).tolist() == [0.0, 1.0, 0.0, 0.0]
    draws = model.sample_many(1, 8, substream(0, "det"))
    assert (draws[:, 0] == 1).all()


def test_empirical_family_uses_given_pmfs(tri_layout):
    caps = np.array([[2, 2, 2], [2, 0, 0]])
    pmfs = np.zeros((2, 3, 3))
    pmfs[:, :, 0] = 0.25
    pmfs[:, :, 1] = 0.75
    for t in range(2):
        for j in range(3):
            if caps[t, j] == 0:
                pmfs[t, j] = [1.0, 0.0, 0.0]
    model = model_for_layout(
        tri_layout, 2, "empirical",
        means=np.zeros((2, 3)), cap=caps, pmfs=pmfs,
    )
    got = model.pmf(1, 0)
    assert got.tolist() == [0.25, 0.75, 0.0]
    with pytest.raises(EvschedError):
        model.perturb(mean_scale=1.1)
