"""Backward fitted sweep: targets, policies, persistence, convergence."""

import dataclasses

import numpy as np
import pytest

from evsched.errors import FitError
from evsched.rng import substream
from evsched.training import (
    FviConfig,
    TrainedPolicy,
    convergence_study,
    first_stage_error,
    stage_targets,
    train_value_functions,
)

QUICK = FviConfig(draws=8, samples_per_stage=24, feature_budget=0, seed=0)


def _train(sc, cfg=QUICK, **kw):
    return train_value_functions(sc.layout, sc.costs, sc.arrival_model, sc.d_schedule, cfg, **kw)


def test_stage_targets_shapes(tiny_scenario):
    sc = tiny_scenario
    states, targets, dropped = stage_targets(
        sc.layout, sc.costs, sc.arrival_model, sc.d_schedule,
        slot=4, next_model=None, cfg=QUICK,
    )
    assert states.shape == (len(targets), sc.layout.state_dim)
    assert len(targets) + dropped == QUICK.samples_per_stage
    assert np.isfinite(targets).all()


def test_training_produces_one_model_per_stage(tiny_scenario):
    policy = _train(tiny_scenario)
    assert sorted(policy.models) == [1, 2, 3, 4]
    assert policy.kind == "linear"
    assert policy.continuation(4) is None
    assert policy.continuation(2) is policy.models[3]
    assert len(policy.stage_seconds) == 4


def test_training_is_deterministic(tiny_scenario):
    a = _train(tiny_scenario)
    b = _train(tiny_scenario)
    for s in a.models:
        assert np.array_equal(a.models[s].weights, b.models[s].weights)
    c = _train(tiny_scenario, cfg=dataclasses.replace(QUICK, seed=1))
    assert any(
        not np.array_equal(c.models[s].weights, a.models[s].weights) for s in a.models
    )


def test_policy_save_load_round_trip(tmp_path, tiny_scenario):
    sc = tiny_scenario
    policy = _train(sc)
    policy.save(tmp_path)
    loaded = TrainedPolicy.load(tmp_path, sc.layout)
    assert loaded.horizon == policy.horizon
    assert loaded.kind == policy.kind
    X = substream(0, "probe").uniform(0, 1, (8, sc.layout.state_dim))
    X[:, -2], X[:, -1] = 0.0, 50.0
    for s in policy.models:
        assert np.allclose(
            loaded.models[s].evaluate_batch(X), policy.models[s].evaluate_batch(X)
        )


def test_checkpoint_dir_written_during_training(tmp_path, tiny_scenario):
    _train(tiny_scenario, checkpoint_dir=tmp_path)
    assert (tmp_path / "policy.json").exists()
    assert (tmp_path / "stage_1.vmck").exists()
    assert (tmp_path / "stage_4.vmck").exists()


def test_first_stage_error_zero_against_itself(tiny_scenario):
    sc = tiny_scenario
    policy = _train(sc)
    X = substream(1, "eval").uniform(0, 1, (16, sc.layout.state_dim))
    X[:, sc.layout.dim :] = 0.0
    X[:, -2], X[:, -1] = 0.0, 50.0
    ref = policy.models[1].evaluate_batch(X)
    assert first_stage_error(policy, X, ref) == pytest.approx(0.0, abs=1e-12)


def test_too_few_samples_raises(tiny_scenario):
    sc = tiny_scenario
    bad = dataclasses.replace(QUICK, samples_per_stage=1)
    with pytest.raises(FitError):
        _train(sc, cfg=bad)


def test_convergence_study_rows(tiny_scenario):
    sc = tiny_scenario
    X = substream(2, "grid").uniform(0, 1, (12, sc.layout.state_dim))
    X[:, sc.layout.dim :] = 0.0
    X[:, -2], X[:, -1] = 0.0, 50.0
    ref = np.zeros(12)
    rows = convergence_study(
        sc.layout, sc.costs, sc.arrival_model, sc.d_schedule,
        eval_states=X, reference=ref,
        ladder=[(2, 8, 0), (4, 16, 0)], seeds=[0, 1],
    )
    assert len(rows) == 4
    for row in rows:
        assert {"rung", "draws", "samples", "features", "seed", "sup_error", "seconds"} <= set(row)
        assert row["sup_error"] >= 0.0
