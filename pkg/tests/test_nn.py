import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import finite_difference_check, random_model, random_picks
from mal.data import Dataset
from mal.errors import ConfigError, DivergenceError, ShapeError
from mal.nn import (ArchSpec, Family, Hyperparams, ModelCheckpoint, _forward, classify_family, cross_entropy, forward,
                    gradients, init_model, loss_and_accuracy, train_sgd)


def reference_forward(model, x):
    """Row-at-a-time loop implementation used as an independent oracle."""
    out = []
    L = model.num_layers
    for row in np.asarray(x, dtype=np.float64):
        h = list(row)
        for l in range(L):
            w = np.asarray(model.weights[l], dtype=np.float64)
            b = np.asarray(model.biases[l], dtype=np.float64)
            z = [sum(w[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(w.shape[0])]
            h = z if l == L - 1 else [max(v, 0.0) for v in z]
        out.append(h)
    return np.array(out)


def zero_model(widths):
    return ModelCheckpoint(ArchSpec(tuple(widths)), tuple(np.zeros((b, a)) for a, b in zip(widths, widths[1:])),
                           tuple(np.zeros(b) for b in widths[1:]))


def test_zero_network_gives_zero_logits():
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.all(forward(zero_model([4, 3, 6]), x) == 0.0)


def test_identity_relu_case():
    m = ModelCheckpoint(ArchSpec((2, 2, 2)), (np.eye(2), np.eye(2)), (np.zeros(2), np.zeros(2)))
    np.testing.assert_array_equal(forward(m, [[1.0, -1.0]]), [[1.0, 0.0]])


def test_forward_matches_reference_oracle():
    m = random_model((6, 5, 4, 3), seed=11)
    x = np.random.default_rng(1).normal(size=(7, 6))
    np.testing.assert_allclose(forward(m, x), reference_forward(m, x), rtol=0, atol=1e-6)


def test_forward_shape_error_names_layer():
    m = random_model((6, 5, 3), seed=0)
    with pytest.raises(ShapeError, match="layer 1"):
        forward(m, np.zeros((2, 4)))
    with pytest.raises(ShapeError, match="layer 2"):
        _forward([np.zeros((5, 6)), np.zeros((3, 4))], [np.zeros(5), np.zeros(3)], np.zeros((1, 6)))


@pytest.mark.parametrize("k", [2, 10, 100])
def test_uniform_logits_loss_is_log_k(k):
    data = Dataset("z", np.random.default_rng(k).random((13, 3)), np.arange(13) % k, k)
    loss, acc = loss_and_accuracy(zero_model([3, 4, k]), data)
    assert abs(loss - math.log(k)) < 1e-12
    # all-tied logits pick class 0
    assert acc == np.mean(data.labels == 0)


def test_loss_is_finite_for_huge_margins():
    logits = np.array([[1e6, -1e6, 0.0], [-5e5, 5e5, 0.0]])
    assert math.isfinite(cross_entropy(logits, np.array([1, 0])))
    assert cross_entropy(logits, np.array([0, 1])) == 0.0


def test_loss_class_mismatch():
    data = Dataset("z", np.zeros((2, 3)), [0, 1], 5)
    with pytest.raises(ConfigError):
        loss_and_accuracy(zero_model([3, 2, 4]), data)


def test_bias_gradient_at_zero_is_softmax_minus_onehot():
    k = 4
    y = np.array([0, 2, 2, 3, 1])
    gw, gb = gradients(zero_model([3, 5, k]), np.zeros((5, 3)), y)
    expected = np.full(k, 1.0 / k) - np.bincount(y, minlength=k) / len(y)
    np.testing.assert_allclose(gb[-1], expected, atol=1e-15)
    assert all(np.all(g == 0) for g in gw)


def test_gradients_match_finite_differences():
    g = np.random.default_rng(5)
    m = random_model((8, 6, 5, 4), seed=2)
    x = g.normal(size=(9, 8))
    y = g.integers(0, 4, size=9)
    assert finite_difference_check(m, x, y, random_picks(m, 20, g)) < 1e-3


def test_duplicated_batch_gives_identical_gradients():
    g = np.random.default_rng(6)
    m = random_model((5, 4, 3), seed=3)
    x, y = g.normal(size=(4, 5)), g.integers(0, 3, size=4)
    gw1, gb1 = gradients(m, x, y)
    gw2, gb2 = gradients(m, np.vstack([x, x]), np.concatenate([y, y]))
    for a, b in zip(gw1 + gb1, gw2 + gb2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_gradients_reject_bad_batches():
    m = random_model((5, 4, 3), seed=3)
    with pytest.raises(ShapeError):
        gradients(m, np.zeros((0, 5)), np.zeros(0, dtype=int))
    with pytest.raises(ShapeError):
        gradients(m, np.zeros((3, 5)), np.zeros(2, dtype=int))


def tiny_data(seed=0, n=60):
    g = np.random.default_rng(seed)
    x = g.random((n, 6))
    y = (x[:, 0] > x[:, 1]).astype(int) + 2 * (x[:, 2] > 0.5)
    return Dataset("tiny", x, y, 4)


def test_train_zero_epochs_returns_init():
    arch = ArchSpec((6, 5, 4))
    data = tiny_data()
    m = train_sgd(arch, data, Hyperparams(1e-2, 0, 1, 9))
    assert m.same_params(init_model(arch, 9))
    assert m.meta.final_loss == loss_and_accuracy(init_model(arch, 9), data)[0]
    assert m.meta.epochs == 0 and m.meta.seed == 9 and m.meta.dataset_id == "tiny"


def test_train_is_bit_deterministic():
    arch, data, hp = ArchSpec((6, 8, 4)), tiny_data(), Hyperparams(5e-2, 3, 4, 1)
    a, b = train_sgd(arch, data, hp), train_sgd(arch, data, hp)
    assert a.same_params(b)
    assert a.meta == b.meta
    assert not a.same_params(train_sgd(arch, data, Hyperparams(5e-2, 3, 4, 2)))


def test_training_lowers_loss():
    arch, data = ArchSpec((6, 16, 4)), tiny_data(n=200)
    m = train_sgd(arch, data, Hyperparams(0.1, 10, 1, 0))
    assert m.meta.final_loss < loss_and_accuracy(init_model(arch, 0), data)[0]


def test_init_is_uniform_fan_in_with_zero_biases():
    arch = ArchSpec((50, 30, 10))
    m = init_model(arch, 4)
    for w, b, fan_in in zip(m.weights, m.biases, arch.widths):
        assert np.all(np.abs(w) <= math.sqrt(1 / fan_in))
        assert np.all(b == 0)
    assert not init_model(arch, 5).same_params(m)


def test_train_rejects_mismatched_arch():
    with pytest.raises(ConfigError):
        train_sgd(ArchSpec((5, 3, 4)), tiny_data(), Hyperparams())
    with pytest.raises(ConfigError):
        train_sgd(ArchSpec((6, 3, 3)), tiny_data(), Hyperparams())


@pytest.mark.parametrize("lr", [0.0, 1.0, -1e-3])
def test_hyperparams_reject_bad_learning_rate(lr):
    with pytest.raises(ConfigError):
        Hyperparams(learning_rate=lr)


@pytest.mark.parametrize("hidden,family", [
    ([64, 64, 64], Family.EQUAL),
    ([128, 64, 32], Family.WIDE_TO_NARROW),
    ([32, 64, 128], Family.NARROW_TO_WIDE),
    ([32, 128, 32], Family.PYRAMID),
    ([128, 32, 128], Family.INVERSE_PYRAMID),
    ([64], Family.EQUAL),
    ([64, 64, 32], Family.WIDE_TO_NARROW),
    ([32, 64, 32, 64], Family.OTHER),
])
def test_classify_family(hidden, family):
    assert classify_family(hidden) == family


def test_arch_family_is_derived():
    assert ArchSpec((784, 32, 128, 32, 10)).family == Family.PYRAMID


def test_checkpoint_rejects_bad_shapes_and_nan():
    arch = ArchSpec((3, 2, 2))
    with pytest.raises(ShapeError):
        ModelCheckpoint(arch, (np.zeros((2, 2)), np.zeros((2, 2))), (np.zeros(2), np.zeros(2)))
    with pytest.raises(Exception):
        ModelCheckpoint(arch, (np.full((2, 3), np.nan), np.zeros((2, 2))), (np.zeros(2), np.zeros(2)))


def test_checkpoint_is_read_only():
    m = random_model((3, 2, 2), 0)
    with pytest.raises(ValueError):
        m.weights[0][0, 0] = 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), widths=st.lists(st.integers(1, 6), min_size=3, max_size=5))
def test_forward_agrees_with_oracle_property(seed, widths):
    m = random_model(widths, seed)
    x = np.random.default_rng(seed).normal(size=(3, widths[0]))
    np.testing.assert_allclose(forward(m, x), reference_forward(m, x), rtol=1e-9, atol=1e-9)


def test_trained_mnist_accuracy(mnist_pair, mnist_test):
    a, _ = mnist_pair
    assert loss_and_accuracy(a, mnist_test)[1] > 0.9


def test_divergence_reports_epoch():
    data = Dataset("huge", np.full((4, 6), 1e200), [0, 1, 2, 3], 4)
    with pytest.raises(DivergenceError) as info:
        train_sgd(ArchSpec((6, 5, 4)), data, Hyperparams(0.5, 3, 1, 0))
    assert info.value.epoch == 0 and "epoch 0" in str(info.value)
