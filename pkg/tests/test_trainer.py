import math
from dataclasses import replace

import numpy as np
import pytest

from gradmask import autodiff as ad
from gradmask import trainer as tr
from gradmask.data import SynthConfig, generate
from gradmask.errors import DivergenceError, ValidationError
from gradmask.loss import PenaltyConfig
from gradmask.model import ModelConfig, load_checkpoint
from gradmask.tensor import Tensor
from gradmask.trainer import (Adam, SweepConfig, TrainConfig, accuracy, evaluate_auc, read_runs,
                              record_trial, run_trial, sample_hyperparams, sweep, train)

DATA = SynthConfig(height=16, width=16, lesion_axes=(1.5, 3.0), patch_size=2,
                   n_train=32, n_valid=16, n_test=32, seed=5)
MODEL = ModelConfig(input_shape=(1, 16, 16), conv_filters=(4, 8), hidden=16, seed=5)
FAST = TrainConfig(epochs_max=3, batch_size=8, lr=3e-3, patience=2, seed=5)


@pytest.fixture(scope="module")
def data():
    return generate(DATA)


def adam_oracle(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_hand_oracle():
    p = ad.lift(Tensor(np.array([1.0, -2.0])), True)
    opt = Adam([p], lr=0.01)
    g1, g2 = np.array([0.5, -0.1]), np.array([-0.3, 0.2])
    opt.step([g1])
    # first step moves each coordinate by lr * g / (|g| + eps)
    np.testing.assert_allclose(p.numpy(), [1.0 - 0.01 * 0.5 / (0.5 + 1e-8), -2.0 + 0.01 * 0.1 / (0.1 + 1e-8)],
                               rtol=0, atol=1e-12)
    opt.step([g2])
    expect = [adam_oracle(1.0, [0.5, -0.3], 0.01), adam_oracle(-2.0, [-0.1, 0.2], 0.01)]
    np.testing.assert_allclose(p.numpy(), expect, rtol=0, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs_max=0)
    with pytest.raises(ValidationError):
        TrainConfig(patience=0)
    with pytest.raises(ValidationError):
        SweepConfig(n_trials=0)


def test_training_is_deterministic(data):
    cfg = replace(FAST, penalty=PenaltyConfig("none"))
    r1, m1 = train(MODEL, data, cfg)
    r2, m2 = train(MODEL, data, cfg)
    assert r1 == r2
    assert ad.checkpoint_params(m1.params) == ad.checkpoint_params(m2.params)
    assert r1.epochs_trained <= cfg.epochs_max and 1 <= r1.best_epoch <= r1.epochs_trained
    assert [h["epoch"] for h in r1.history] == list(range(1, r1.epochs_trained + 1))


def test_zero_lambda_contrast_matches_baseline(data):
    r0, m0 = train(MODEL, data, replace(FAST, penalty=PenaltyConfig("none")))
    r1, m1 = train(MODEL, data, replace(FAST, penalty=PenaltyConfig("contrast", lam=0.0)))
    assert ad.checkpoint_params(m0.params) == ad.checkpoint_params(m1.params)
    assert r0.test_auc == r1.test_auc


def test_huge_lambda_collapses_training_accuracy(data):
    cfg = replace(FAST, epochs_max=4, patience=4, penalty=PenaltyConfig("contrast", lam=1e6))
    _, model = train(MODEL, data, cfg)
    assert accuracy(model, data.train) < 0.7


def test_kept_parameters_reproduce_best_valid_auc(data, tmp_path):
    result, model = train(MODEL, data, replace(FAST, penalty=PenaltyConfig("contrast", lam=0.1)))
    assert evaluate_auc(model, data.valid) == result.best_valid_auc
    assert max(h["valid_auc"] for h in result.history) == result.best_valid_auc
    record_trial(tmp_path, result, model.state(), MODEL)
    loaded, _ = load_checkpoint(tmp_path / tr.checkpoint_name(result))
    assert evaluate_auc(loaded, data.valid) == result.best_valid_auc
    assert read_runs(tmp_path / "runs.jsonl") == [result]


def scripted_valid_auc(monkeypatch, values):
    """Make per-epoch validation AUC follow ``values``; final evaluations return 0.5."""
    it = iter(values)
    real = tr.evaluate_auc

    def fake(model, samples):
        if samples is fake.valid:
            return next(it, 0.5)
        return real(model, samples)

    monkeypatch.setattr(tr, "evaluate_auc", fake)
    return fake


def test_patience_one_with_improving_auc_runs_all_epochs(data, monkeypatch):
    fake = scripted_valid_auc(monkeypatch, [0.5, 0.6, 0.7, 0.8, 0.9])
    monkeypatch.setattr(tr, "_as_dtype", lambda s, d: s)
    fake.valid = data.valid
    r, _ = train(MODEL, data, replace(FAST, epochs_max=5, patience=1, penalty=PenaltyConfig("none")))
    assert r.epochs_trained == 5 and r.best_epoch == 5


def test_flat_auc_stops_after_patience_and_keeps_first_epoch(data, monkeypatch):
    fake = scripted_valid_auc(monkeypatch, [0.7] * 10)
    monkeypatch.setattr(tr, "_as_dtype", lambda s, d: s)
    fake.valid = data.valid
    r, _ = train(MODEL, data, replace(FAST, epochs_max=10, patience=3, penalty=PenaltyConfig("none")))
    assert r.epochs_trained == 4 and r.best_epoch == 1


def test_nonfinite_loss_is_reported(data, monkeypatch):
    def broken(model, batch, cfg):
        return [np.full(p.shape, np.nan) for p in model.params], float("nan"), 0.1, float("inf")

    monkeypatch.setattr(tr, "batch_gradients", broken)
    with pytest.raises(DivergenceError) as info:
        train(MODEL, data, FAST)
    assert info.value.epoch == 1 and "penalty" in str(info.value)
    failed, state = run_trial(MODEL, DATA, SweepConfig(n_trials=1), FAST, "contrast", 0, dataset=data)
    assert failed.status == "failed" and state is None
    with pytest.raises(DivergenceError):
        sweep(MODEL, DATA, SweepConfig(n_trials=2), "contrast", FAST, dataset=data)


def test_hyperparameters_are_log_uniform_and_seeded():
    sc = SweepConfig()
    draws = [sample_hyperparams(s, sc) for s in range(200)]
    assert draws == [sample_hyperparams(s, sc) for s in range(200)]
    lams, lrs = np.array(draws).T
    assert lams.min() >= 1e-3 and lams.max() <= 10 and lrs.min() >= 1e-4 and lrs.max() <= 1e-2
    assert abs(np.median(np.log10(lams)) + 1) < 0.4


def test_single_trial_sweep_is_train_with_sampled_hyperparams():
    sc = SweepConfig(n_trials=1, base_seed=40)
    (res,) = sweep(MODEL, DATA, sc, "contrast", FAST)
    lam, lr = sample_hyperparams(40, sc)
    direct, _ = train(replace(MODEL, seed=40), generate(replace(DATA, seed=40)),
                      replace(FAST, lr=lr, seed=40, penalty=PenaltyConfig("contrast", lam=lam)))
    assert res == direct


def test_sweep_is_order_independent_and_reproducible():
    sc = SweepConfig(n_trials=3, base_seed=10)
    a = sweep(MODEL, DATA, sc, "perclass", FAST)
    b = sweep(MODEL, DATA, sc, "perclass", FAST, threads=2)
    assert a == b
    alone, _ = run_trial(MODEL, DATA, sc, FAST, "perclass", 2)
    assert alone == a[2]
    assert [r.seed for r in a] == [10, 11, 12]
