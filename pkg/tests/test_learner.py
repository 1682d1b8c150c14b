import numpy as np
import pytest

from residual_hedging import learner, neural
from residual_hedging.data import SplitPlan, fit_feature_spec, make_split, samples_from_panel
from residual_hedging.errors import DivergenceError, SpecMismatchError
from residual_hedging.learner import (DIRECT, RESIDUAL, EarlyStopper, Objective, TrainPlan, hedge_loss,
                                      load_model, predict_hedge, save_model, train, zero_residual_model)
from residual_hedging.market import GbmParams, simulate_gbm_panel
from residual_hedging.neural import NetConfig


class Batch:
    def __init__(self, dv, ds, delta_bs):
        self.dv, self.ds, self.delta_bs = (np.asarray(a, float) for a in (dv, ds, delta_bs))


@pytest.fixture(scope="module")
def split():
    panel = simulate_gbm_panel(GbmParams(), 120, seed=2)
    samples, _ = samples_from_panel(panel, 1, "Fea2")
    return make_split(samples, SplitPlan(train_end_date=90, val_seed=1))


SMALL = NetConfig(input_dim=2, hidden_layers=2, hidden_width=8, seed=3)


def small_plan(mode=RESIDUAL, **kw):
    kw = {"batch_size": 256, "max_epochs": 3, "patience": 2, "shuffle_seed": 4, "learning_rate": 1e-3, **kw}
    return TrainPlan(objective=Objective(mode), **kw)


# -- loss ------------------------------------------------------------------------

def test_residual_zero_output_is_benchmark_mse():
    b = Batch([1.0, -0.5, 0.3], [2.0, -1.0, 0.4], [0.3, 0.6, 0.5])
    loss, _ = hedge_loss(np.zeros(3), b, Objective(RESIDUAL))
    assert loss == pytest.approx(np.mean((b.dv - b.delta_bs * b.ds) ** 2), rel=1e-15)


def test_hand_example_loss():
    loss, grad = hedge_loss(np.array([0.1]), Batch([1.0], [2.0], [0.4]), Objective(RESIDUAL))
    assert loss == 0.0 and grad[0] == 0.0


def test_direct_exact_hedge():
    b = Batch([1.0, -0.5, 0.3], [2.0, -1.0, 0.4], [0.3, 0.6, 0.5])
    loss, _ = hedge_loss(b.dv / b.ds, b, Objective(DIRECT))
    assert loss == pytest.approx(0.0, abs=1e-30)


def test_loss_gradient_formula():
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=7), rng.normal(size=7), rng.uniform(0, 1, 7))
    o = rng.normal(size=7)
    for mode in (DIRECT, RESIDUAL):
        _, g = hedge_loss(o, b, Objective(mode))
        for i in range(7):
            e = np.zeros(7)
            e[i] = 1e-6
            fd = (hedge_loss(o + e, b, Objective(mode))[0] - hedge_loss(o - e, b, Objective(mode))[0]) / 2e-6
            assert fd == pytest.approx(g[i], rel=1e-6, abs=1e-10)


def test_objective_validation_and_labels():
    with pytest.raises(ValueError):
        Objective("both")
    assert Objective(RESIDUAL).label("Fea2") == "Fea2-BS" and Objective(DIRECT).label("Fea2") == "Fea2"
    with pytest.raises(ValueError):
        TrainPlan(batch_size=1)
    with pytest.raises(ValueError):
        TrainPlan(max_epochs=3, patience=4)


# -- early stopping ----------------------------------------------------------------

def test_early_stopper_rule():
    s = EarlyStopper(patience=1)
    assert s.update(1.0) == (True, False)
    assert s.update(2.0) == (False, True)
    assert s.best_epoch == 1
    s = EarlyStopper(patience=3)
    for v in (5.0, 4.0, 4.5, 4.0, 4.2):       # equal is not an improvement
        improved, stop = s.update(v)
    assert s.best_epoch == 2 and stop


def test_train_stops_on_rising_validation_and_restores(split, monkeypatch):
    snapshots = []
    real = learner._eval_mse

    def rising(net, x, samples, objective):
        snapshots.append({k: v.copy() for k, v in net.state().items()})
        real(net, x, samples, objective)
        return float(len(snapshots))            # 1, 2, 3, ... strictly increasing

    monkeypatch.setattr(learner, "_eval_mse", rising)
    model = train(split.train, split.val, SMALL, small_plan(max_epochs=10, patience=1))
    assert len(model.history) == 2 and model.best_epoch == 1
    for k, v in model.network.state().items():
        np.testing.assert_array_equal(v, snapshots[0][k])


def test_best_epoch_parameters_are_returned(split):
    model = train(split.train, split.val, SMALL, small_plan(max_epochs=6, patience=6))
    vals = [h[2] for h in model.history]
    assert model.best_epoch == int(np.argmin(vals)) + 1
    assert [h[0] for h in model.history] == list(range(1, len(vals) + 1))
    x = model.feature_spec.transform(split.val.features)
    assert learner._eval_mse(model.network, x, split.val, model.objective) == model.best_val_mse


def test_training_is_deterministic(split, tmp_path):
    a = train(split.train, split.val, SMALL, small_plan())
    b = train(split.train, split.val, SMALL, small_plan())
    assert save_model(a, tmp_path / "a.bin").read_bytes() == save_model(b, tmp_path / "b.bin").read_bytes()
    c = train(split.train, split.val, SMALL, small_plan(shuffle_seed=5))
    assert not np.array_equal(c.network.weights[0], a.network.weights[0])


def test_divergence_error(split):
    bad = split.train.subset(np.arange(len(split.train)))
    bad.dv = bad.dv.copy()
    bad.dv[0] = np.inf
    with pytest.raises(DivergenceError):
        train(bad, split.val, SMALL, small_plan())


def test_metadata_and_history_columns(split, tmp_path):
    model = train(split.train, split.val, SMALL, small_plan())
    md = model.metadata
    assert md["net_seed"] == 3 and md["shuffle_seed"] == 4 and md["epochs_run"] == len(model.history)
    assert md["n_train"] == len(split.train)
    log = learner.write_training_log(model, tmp_path / "log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_mse,val_mse" and len(log) == len(model.history) + 1


# -- prediction ----------------------------------------------------------------------

def test_zero_residual_model_reproduces_delta(split):
    model = zero_residual_model(fit_feature_spec(split.train), SMALL)
    np.testing.assert_array_equal(predict_hedge(model, split.test), split.test.delta_bs)


def test_predictions_finite_and_batch_independent(split):
    model = train(split.train, split.val, SMALL, small_plan())
    full = predict_hedge(model, split.test)
    assert np.all(np.isfinite(full))
    single = np.array([predict_hedge(model, split.test.subset([i]))[0] for i in range(40)])
    np.testing.assert_array_equal(single, full[:40])


def test_feature_mismatch(split):
    model = zero_residual_model(fit_feature_spec(split.train), SMALL)
    panel = simulate_gbm_panel(GbmParams(), 30, seed=2)
    other, _ = samples_from_panel(panel, 1, "Fea3")
    with pytest.raises(SpecMismatchError):
        predict_hedge(model, other)


def test_objective_equivalence(split):
    # a direct net whose output is delta_bs + the residual net's output gives the same loss
    rng = np.random.default_rng(1)
    net = neural.init_network(SMALL)
    x = rng.normal(size=(len(split.test), 2))
    o_res = neural.predict(net, x)
    o_dir = split.test.delta_bs + o_res
    assert hedge_loss(o_dir, split.test, Objective(DIRECT))[0] == pytest.approx(
        hedge_loss(o_res, split.test, Objective(RESIDUAL))[0], rel=1e-14)


@pytest.mark.parametrize("mode", [DIRECT, RESIDUAL])
def test_end_to_end_gradient(split, mode):
    net = neural.init_network(SMALL)
    rng = np.random.default_rng(7)
    for p in net.params().values():
        p += 0.2 * rng.standard_normal(p.shape)
    idx = np.arange(32)
    sub = split.train.subset(idx)
    x = fit_feature_spec(split.train).transform(sub.features)
    obj = Objective(mode)

    def loss():
        return hedge_loss(neural.forward(net, x, "train", update_running=False)[0], sub, obj)[0]

    out, cache = neural.forward(net, x, "train", update_running=False)
    grads = neural.backward(net, cache, hedge_loss(out, sub, obj)[1])
    for name, p in net.params().items():
        for j in rng.choice(p.size, min(p.size, 5), replace=False):
            ij = np.unravel_index(j, p.shape)
            orig = p[ij]
            p[ij] = orig + 1e-5
            up = loss()
            p[ij] = orig - 1e-5
            dn = loss()
            p[ij] = orig
            fd = (up - dn) / 2e-5
            assert abs(fd - grads[name][ij]) <= max(1e-5 * max(abs(fd), abs(grads[name][ij])), 1e-8), name


def test_model_round_trip(split, tmp_path):
    model = train(split.train, split.val, SMALL, small_plan(mode=DIRECT))
    back = load_model(save_model(model, tmp_path / "m.bin"))
    assert back.label == "Fea2" and back.history == model.history and back.best_epoch == model.best_epoch
    np.testing.assert_array_equal(predict_hedge(back, split.test), predict_hedge(model, split.test))
