"""SGD training loop: determinism, seed separation, and learning progress."""

import numpy as np
import pytest

from axdnn import train as train_mod
from axdnn.model import build_preset, init_params
from axdnn.train import TrainConfig, evaluate, train


@pytest.fixture(scope="module")
def small_mnist(mnist32):
    ds = mnist32["train"]
    return ds.images[:2000], ds.labels[:2000]


def test_same_seed_reproduces_params_exactly(small_mnist):
    x, y = small_mnist
    spec = build_preset("ffnn", (1, 32, 32))
    cfg = TrainConfig(epochs=1, batch_size=64, lr=0.05, momentum=0.9, seed=3)
    a = train(spec, x[:512], y[:512], cfg)
    b = train(spec, x[:512], y[:512], cfg)
    assert set(a.model.params) == set(b.model.params)
    for name in a.model.params:
        assert np.array_equal(a.model.params[name], b.model.params[name])
    assert a.epoch_train_acc == b.epoch_train_acc


def test_different_seed_changes_params(small_mnist):
    x, y = small_mnist
    spec = build_preset("ffnn", (1, 32, 32))
    a = train(spec, x[:512], y[:512], TrainConfig(epochs=1, seed=3))
    b = train(spec, x[:512], y[:512], TrainConfig(epochs=1, seed=4))
    assert any(not np.array_equal(a.model.params[k], b.model.params[k])
               for k in a.model.params)


def test_zero_epochs_returns_untouched_init(small_mnist):
    x, y = small_mnist
    spec = build_preset("ffnn", (1, 32, 32))
    result = train(spec, x, y, TrainConfig(epochs=0, seed=11))
    fresh = init_params(spec, seed=11)
    for name, arr in fresh.items():
        assert np.array_equal(result.model.params[name], arr)
    assert result.epoch_train_acc == []


def test_one_epoch_learns_something(small_mnist):
    x, y = small_mnist
    spec = build_preset("ffnn", (1, 32, 32))
    result = train(spec, x, y, TrainConfig(epochs=1, seed=0))
    assert evaluate(result.model, x, y) > 75.0
    assert len(result.epoch_train_acc) == 1


def test_evaluate_matches_manual_argmax(small_mnist, lenet5_trained):
    x, y = small_mnist
    got = evaluate(lenet5_trained, x[:200], y[:200], batch_size=64)
    manual = 100.0 * float(np.mean(
        np.argmax(lenet5_trained.logits(x[:200]), axis=1) == y[:200]))
    assert got == pytest.approx(manual)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.5)
    with pytest.raises(ValueError):
        train_mod.train(build_preset("ffnn", (1, 28, 28)),
                        np.zeros((0, 1, 28, 28), np.float32),
                        np.zeros(0, np.int64), TrainConfig())
