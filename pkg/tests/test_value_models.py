"""Feature map, linear and MLP regressors, checkpoint format."""

import numpy as np
import pytest

from evsched.errors import CheckpointError
from evsched.rng import substream
from evsched.value_models import (
    FitDataset,
    LinearBasisModel,
    MlpModel,
    entry_caps_from_arrivals,
    feature_map_for,
    load_checkpoint,
    nonexpansion_diagnostic,
    sample_states,
    state_box,
)


@pytest.fixture()
def tiny_features(tiny_scenario):
    lay = tiny_scenario.layout
    caps = entry_caps_from_arrivals(lay, tiny_scenario.arrival_model.caps)
    d_lo = tiny_scenario.d_schedule.min(axis=0)
    d_hi = tiny_scenario.d_schedule.max(axis=0)
    return lay, feature_map_for(lay, caps, d_lo, d_hi, budget=24)


def _sample(tiny_scenario, l=64, seed=3):
    lay = tiny_scenario.layout
    caps = tiny_scenario.arrival_model.caps
    d = tuple(tiny_scenario.d_schedule[0])
    return sample_states(lay, caps, d, l, substream(seed, "samples"), slot=2, horizon=4)


def test_feature_floor_count(tiny_scenario):
    lay = tiny_scenario.layout
    caps = entry_caps_from_arrivals(lay, tiny_scenario.arrival_model.caps)
    fm = feature_map_for(lay, caps, (0.0, 50.0), (0.0, 50.0), budget=0)
    n_active = int(lay.active.sum())
    assert fm.n_features == 2 * n_active + 5
    # a budget below the floor is satisfied by the floor alone
    small = feature_map_for(lay, caps, (0.0, 50.0), (0.0, 50.0), budget=3)
    assert small.n_features == fm.n_features
    bigger = feature_map_for(lay, caps, (0.0, 50.0), (0.0, 50.0), budget=fm.n_features + 7)
    assert bigger.n_features == fm.n_features + 7


def test_state_box_shapes(tri_layout):
    caps = np.zeros(tri_layout.dim)
    caps[tri_layout.active] = 2.0
    lo, hi = state_box(tri_layout, caps, (0.0, 1.0), (0.0, 8.0))
    assert lo.shape == hi.shape == (tri_layout.state_dim,)
    assert (hi[: tri_layout.dim] == caps).all()
    assert hi[-1] == 8.0
    # residual caps follow count caps times item energy
    m = tri_layout.entry_m()
    assert np.allclose(hi[tri_layout.dim : 2 * tri_layout.dim], caps * m)


def test_sampled_states_live_in_the_box(tiny_scenario):
    X = _sample(tiny_scenario, l=128)
    lay = tiny_scenario.layout
    assert X.shape == (128, lay.state_dim)
    y = X[:, : lay.dim]
    z = X[:, lay.dim : 2 * lay.dim]
    assert (y >= 0).all() and (z >= -1e-12).all()
    assert (z <= lay.entry_m() * y + 1e-9).all()
    assert (np.abs(y[:, ~lay.active]) < 1e-12).all()


def test_linear_fit_recovers_function_in_span(tiny_features, tiny_scenario):
    lay, fm = tiny_features
    X = _sample(tiny_scenario, l=96)
    w0 = substream(11, "coef").normal(size=fm.n_features)
    targets = fm.evaluate(X) @ w0
    model = LinearBasisModel.fit(fm, FitDataset(X, targets))
    err = np.abs(model.evaluate_batch(X) - targets).max()
    assert err < 1e-6


def test_linear_evaluate_matches_hand_dot(tiny_features, tiny_scenario):
    lay, fm = tiny_features
    X = _sample(tiny_scenario, l=4)
    w = np.arange(fm.n_features, dtype=float) * 0.1
    model = LinearBasisModel(fm, w)
    want = fm.evaluate(X) @ w
    got = np.array([model.evaluate(x) for x in X])
    assert np.allclose(got, want, atol=1e-12)


def test_linear_gradient_matches_finite_differences(tiny_features, tiny_scenario):
    lay, fm = tiny_features
    X = _sample(tiny_scenario, l=6)
    w = substream(4, "w").normal(size=fm.n_features)
    model = LinearBasisModel(fm, w)
    G = model.grad_state_batch(X)
    assert G.shape == X.shape
    h = 1e-6
    for coord in (0, lay.dim, lay.state_dim - 1):
        Xp = X.copy()
        Xp[:, coord] += h
        fd = (model.evaluate_batch(Xp) - model.evaluate_batch(X)) / h
        assert np.allclose(G[:, coord], fd, atol=1e-5)


def test_fitting_is_nonexpansive_for_constant_shifts(tiny_features, tiny_scenario):
    """Targets differing by a constant fit to functions differing by the
    same constant, so the fitted gap cannot exceed the target gap."""
    lay, fm = tiny_features
    X = _sample(tiny_scenario, l=80)
    Xeval = _sample(tiny_scenario, l=40, seed=9)
    base_w = substream(2, "pair").normal(size=fm.n_features)

    def f(x):
        return float((fm.evaluate(x[None, :]) @ base_w)[0])

    def g(x):
        return f(x) + 3.25

    def fit(data):
        return LinearBasisModel.fit(fm, data)

    slacks, worst = nonexpansion_diagnostic(fit, [(f, g)], X, Xeval)
    assert worst <= 1e-6


def test_fit_slack_shrinks_with_data_and_features(tiny_scenario):
    """More samples and a larger basis should not make regression projection
    worse on a fixed nonlinear target family."""
    lay = tiny_scenario.layout
    caps = entry_caps_from_arrivals(lay, tiny_scenario.arrival_model.caps)
    d_lo = tiny_scenario.d_schedule.min(axis=0)
    d_hi = tiny_scenario.d_schedule.max(axis=0)

    def target(x):
        z = x[lay.dim : 2 * lay.dim]
        return float(z.sum() ** 2 - 0.5 * z.sum())

    def flat(x):
        return 0.0

    worsts = []
    for l, budget in ((24, 0), (96, 24)):
        fm = feature_map_for(lay, caps, d_lo, d_hi, budget=budget)
        X = _sample(tiny_scenario, l=l, seed=5)
        Xeval = _sample(tiny_scenario, l=64, seed=6)

        def fit(data, fm=fm):
            return LinearBasisModel.fit(fm, data)

        _, worst = nonexpansion_diagnostic(fit, [(target, flat)], X, Xeval)
        worsts.append(worst)
    assert worsts[1] <= worsts[0] + 1e-9


def test_checkpoint_round_trip(tmp_path, tiny_features, tiny_scenario):
    lay, fm = tiny_features
    X = _sample(tiny_scenario, l=32)
    w = substream(8, "ck").normal(size=fm.n_features)
    model = LinearBasisModel(fm, w)
    path = tmp_path / "stage.vmck"
    model.save(path)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, LinearBasisModel)
    assert np.allclose(loaded.evaluate_batch(X), model.evaluate_batch(X), atol=1e-12)


def test_checkpoint_corruption_detected(tmp_path, tiny_features, tiny_scenario):
    lay, fm = tiny_features
    model = LinearBasisModel(fm, np.ones(fm.n_features))
    path = tmp_path / "stage.vmck"
    model.save(path)
    lines = path.read_text().splitlines()
    blob = lines[2]
    bad = ("A" if blob[10] != "A" else "B")
    lines[2] = blob[:10] + bad + blob[11:]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_detected(tmp_path, tiny_features):
    lay, fm = tiny_features
    model = LinearBasisModel(fm, np.ones(fm.n_features))
    path = tmp_path / "stage.vmck"
    model.save(path)
    text = path.read_text()
    path.write_text("NOT-A-CHECKPOINT 9\n" + text.split("\n", 1)[1])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_mlp_fits_a_smooth_target_and_round_trips(tmp_path, tiny_scenario):
    lay = tiny_scenario.layout
    X = _sample(tiny_scenario, l=64)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    targets = np.sin(X.sum(axis=1) / 4.0)
    model = MlpModel.fit(
        lo, hi, FitDataset(X, targets), width=16, depth=2,
        epochs=2000, learning_rate=0.01, seed=1,
    )
    pred = model.evaluate_batch(X)
    # target variance is about 0.06; demand a fit well below it
    assert np.mean((pred - targets) ** 2) < 0.02
    path = tmp_path / "mlp.vmck"
    model.save(path)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, MlpModel)
    assert np.allclose(loaded.evaluate_batch(X), pred, atol=1e-12)


def test_mlp_gradients_are_optional(tiny_scenario):
    X = _sample(tiny_scenario, l=8)
    lo, hi = X.min(axis=0), X.max(axis=0)
    model = MlpModel.fit(lo, hi, FitDataset(X, X.sum(axis=1)), width=8, depth=2, epochs=50)
    assert model.grad_state_batch(X) is None


def test_entry_caps_take_columnwise_max(tiny_scenario):
    lay = tiny_scenario.layout
    caps = entry_caps_from_arrivals(lay, tiny_scenario.arrival_model.caps)
    assert caps.shape == (lay.dim,)
    assert (caps[~lay.active] == 0).all()
    assert caps.max() == tiny_scenario.arrival_model.caps.max()
