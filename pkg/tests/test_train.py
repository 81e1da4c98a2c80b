import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgcn_lstm.data import chronological_split, fit_scaler, generate_synthetic, make_windows, split_windows
from sgcn_lstm.errors import DimensionError, NonFiniteError, ValidationError
from sgcn_lstm.graph import build_adjacency, normalize_adjacency
from sgcn_lstm.metrics import compute_metrics
from sgcn_lstm.model import ModelParams, init_params, param_shapes
from sgcn_lstm.tensor import numerical_gradient
from sgcn_lstm.train import (
    EarlyStopping,
    OptState,
    TrainConfig,
    adam_step,
    clip_gradients,
    combined_loss,
    evaluate_loss,
    fit,
    global_norm,
)


def filled(value, f_in=1, h_g=2, h_l=2) -> ModelParams:
    return ModelParams(**{k: np.full(s, value, dtype=float)
                          for k, s in param_shapes(f_in, h_g, h_l).items()})


@pytest.fixture(scope="module")
def tiny_problem():
    edges, ds = generate_synthetic(4, 200, seed=0)
    split = chronological_split(200)
    sc = fit_scaler(ds.speeds[:split.train.stop])
    train, val, test = split_windows(make_windows(sc.apply(ds.speeds)), split)
    return normalize_adjacency(build_adjacency(edges)), train, val


# ------------------------------------------------------------------- loss


def test_loss_hand_example():
    loss, grad = combined_loss(np.array([2.0]), np.array([0.0]), 0.7)
    assert loss == pytest.approx(2.6, abs=1e-15)
    assert grad[0] == pytest.approx(0.7 + 0.3 * 4.0, abs=1e-15)


def test_loss_zero_at_target(rng):
    y = rng.standard_normal(10)
    loss, grad = combined_loss(y, y.copy(), 0.7)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_loss_alpha_boundaries(rng):
    p, t = rng.standard_normal(50), rng.standard_normal(50)
    m = compute_metrics(p, t)
    assert combined_loss(p, t, 0.0)[0] == pytest.approx(m.mse, abs=1e-12)
    assert combined_loss(p, t, 1.0)[0] == pytest.approx(m.mae, abs=1e-12)


def test_loss_gradient_matches_finite_differences(rng):
    t = rng.standard_normal(20)
    p = t + rng.choice([-1, 1], 20) * rng.uniform(0.1, 2.0, 20)  # stay off the kink
    _, grad = combined_loss(p, t, 0.7)
    num = numerical_gradient(lambda y: combined_loss(y, t, 0.7)[0], p, 1e-6)
    np.testing.assert_allclose(num, grad, rtol=1e-6, atol=1e-10)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        combined_loss(np.zeros(3), np.zeros(4))


# --------------------------------------------------------------- clipping


def test_clip_three_four():
    g = filled(0.0, h_g=1, h_l=1)
    g.W0 = np.array([[3.0]])
    g.b0 = np.array([4.0])
    out, norm = clip_gradients(g, 1.0)
    assert norm == 5.0
    assert out.W0[0, 0] == pytest.approx(0.6, abs=1e-15)
    assert out.b0[0] == pytest.approx(0.8, abs=1e-15)


def test_clip_leaves_small_gradients_alone():
    g = filled(0.01)
    out, _ = clip_gradients(g, 1.0)
    for (name, a), (_, b) in zip(g.items(), out.items()):
        assert a.tobytes() == b.tobytes(), name


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10.0))
def test_clip_bounds_norm(seed, clip):
    rng = np.random.default_rng(seed)
    g = filled(0.0, h_g=3, h_l=2).map(lambda a: rng.standard_normal(a.shape) * 5)
    out, _ = clip_gradients(g, clip)
    assert global_norm(out) <= clip + 1e-12


def test_clip_non_finite_names_parameter():
    g = filled(0.0)
    g.lstm_Wh[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="lstm_Wh"):
        clip_gradients(g, 1.0)


# ------------------------------------------------------------------- Adam


def test_adam_first_step_closed_form():
    new, opt = adam_step(filled(0.0), filled(1.0), OptState.zeros(filled(0.0)), TrainConfig())
    assert opt.t == 1
    for name, v in new.items():
        np.testing.assert_allclose(v, -5e-4 / (1 + 1e-8), rtol=1e-14, err_msg=name)
        np.testing.assert_allclose(v, -4.99999995e-4, rtol=1e-12, err_msg=name)


def test_adam_zero_gradient_is_noop(rng):
    p = filled(0.0).map(lambda a: rng.standard_normal(a.shape))
    new, _ = adam_step(p, p.zeros_like(), OptState.zeros(p), TrainConfig())
    for (name, a), (_, b) in zip(p.items(), new.items()):
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_adam_zero_lr_is_noop(rng):
    p = filled(0.0).map(lambda a: rng.standard_normal(a.shape))
    opt, cfg = OptState.zeros(p), TrainConfig(lr=0.0)
    for _ in range(5):
        g = p.map(lambda a: rng.standard_normal(a.shape) * 100)
        new, opt = adam_step(p, g, opt, cfg)
        for (name, a), (_, b) in zip(p.items(), new.items()):
            np.testing.assert_array_equal(a, b, err_msg=name)


def test_adam_constant_gradient_is_monotone():
    signs = filled(0.0).map(lambda a: np.where(np.arange(a.size).reshape(a.shape) % 2, 1.0, -1.0))
    p, opt, cfg = filled(0.0), OptState.zeros(signs), TrainConfig()
    for _ in range(100):
        new, opt = adam_step(p, signs, opt, cfg)
        for (name, before), (_, after), (_, s) in zip(p.items(), new.items(), signs.items()):
            assert np.all(np.sign(after - before) == -s), name
        p = new


def test_adam_non_finite():
    g = filled(1.0)
    g.W1[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="W1"):
        adam_step(filled(0.0), g, OptState.zeros(g), TrainConfig())


@pytest.mark.parametrize("kwargs", [{"alpha": 1.5}, {"lr": -1.0}, {"patience": 0},
                                    {"clip_norm": 0.0}, {"batch_size": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


# --------------------------------------------------------- early stopping


def test_early_stopping_counts_non_improving_epochs():
    es = EarlyStopping(5)
    losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99]
    stops = [es.update(v) for v in losses]
    assert stops == [False] * 6 + [True]
    assert es.best_epoch == 2 and es.best_loss == 0.9


def test_early_stopping_requires_strict_improvement():
    es = EarlyStopping(2)
    assert not es.update(1.0)
    assert not es.update(1.0)
    assert es.update(1.0)
    assert es.best_epoch == 1


def test_fit_runs_max_epochs_without_trigger(tiny_problem):
    adj, train, val = tiny_problem
    cfg = TrainConfig(max_epochs=3, patience=10, batch_size=32)
    _, rec, opt = fit(init_params(1, 4, 4, 0), train, val, adj, cfg)
    assert rec.epochs_run == 3 and rec.stop_reason == "max_epochs"
    assert opt.t == 3 * math.ceil(len(train) / 32)  # final partial batch included


def test_fit_early_stops_and_restores_best(tiny_problem):
    adj, train, val = tiny_problem
    # lr = 0 means no epoch ever improves on the first
    cfg = TrainConfig(max_epochs=50, patience=3, lr=0.0)
    p0 = init_params(1, 4, 4, 0)
    best, rec, _ = fit(p0, train, val, adj, cfg)
    assert rec.stop_reason == "early_stop" and rec.epochs_run == 4 and rec.best_epoch == 1
    assert rec.best_val_loss == rec.val_loss[0]


def test_restored_params_reproduce_best_val_loss(tiny_problem):
    adj, train, val = tiny_problem
    cfg = TrainConfig(max_epochs=8, patience=2, lr=5e-3, batch_size=16)
    best, rec, _ = fit(init_params(1, 8, 8, 0), train, val, adj, cfg)
    assert rec.best_val_loss == min(rec.val_loss)
    assert evaluate_loss(best, adj, val, cfg.alpha, cfg.batch_size) == rec.best_val_loss


def test_fit_is_deterministic(tiny_problem):
    adj, train, val = tiny_problem
    cfg = TrainConfig(max_epochs=3, batch_size=16, seed=11)
    runs = [fit(init_params(1, 6, 5, 11), train, val, adj, cfg) for _ in range(2)]
    (p1, r1, _), (p2, r2, _) = runs
    assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss
    for (name, a), (_, b) in zip(p1.items(), p2.items()):
        assert a.tobytes() == b.tobytes(), name


def test_fit_does_not_mutate_initial_params(tiny_problem):
    adj, train, val = tiny_problem
    p0 = init_params(1, 4, 4, 0)
    snapshot = p0.copy()
    fit(p0, train, val, adj, TrainConfig(max_epochs=1))
    for (name, a), (_, b) in zip(p0.items(), snapshot.items()):
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_training_loss_halves_within_twenty_epochs(tiny_problem):
    adj, train, val = tiny_problem
    # default lr; batch 16 gives enough updates per epoch on 143 training windows
    cfg = TrainConfig(max_epochs=20, patience=100, batch_size=16)
    _, rec, _ = fit(init_params(1, 64, 64, 0), train, val, adj, cfg)
    assert rec.epochs_run == 20
    assert rec.train_loss[19] <= 0.5 * rec.train_loss[0]
