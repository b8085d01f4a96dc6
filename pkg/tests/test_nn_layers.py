import numpy as np
import pytest

from splitshield import nn
from splitshield.errors import BackwardBeforeForward, InvalidSplit, ShapeError
from splitshield.nn.layers import BatchNorm, Conv2D, FullyConnected, MaxPool2, ReLU, Softmax

from conftest import fd_param_check


def small_stack(layers, input_shape):
    return nn.SplitModel(layers, [0], input_shape)


def test_fc_identity_passthrough():
    fc = FullyConnected(3, 3)
    fc.w = np.eye(3)
    fc.b = np.zeros(3)
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(fc.forward(x), x)


def test_fc_quadratic_toy_gradient(rng):
    # Loss ||Wx - y||^2 on a bare FC layer: dW = 2 (Wx - y) x^T.
    fc = FullyConnected(2, 2, rng)
    x = rng.normal(size=(1, 2))
    y = rng.normal(size=(1, 2))
    out = fc.forward(x, train=True)
    resid = out - y
    fc.backward(2.0 * resid)
    np.testing.assert_allclose(fc.gw, 2.0 * resid.T @ x, rtol=1e-12)


def test_zero_loss_gradient_gives_zero_param_grads(rng):
    model = nn.mlp_model(4, (3,), 2, rng)
    probs = model.forward(rng.normal(size=(5, 4)), train=True)
    model.backward(np.zeros_like(probs))
    for g in model.gradients():
        np.testing.assert_array_equal(g, np.zeros_like(g))


def test_backward_before_forward():
    fc = FullyConnected(2, 2)
    with pytest.raises(BackwardBeforeForward):
        fc.backward(np.ones((1, 2)))
    # Eval-mode forward must not arm the cache.
    fc.forward(np.ones((1, 2)), train=False)
    with pytest.raises(BackwardBeforeForward):
        fc.backward(np.ones((1, 2)))


def test_softmax_simplex(rng):
    sm = Softmax()
    y = sm.forward(rng.normal(size=(7, 5)) * 10)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(y >= 0)


def test_uniform_softmax_on_zero_input(rng):
    model = nn.table_model((1, 8, 8), 4, rng, conv_channels=(3, 4, 5), fc_widths=(8, 6))
    probs = model.forward(np.zeros((2, 1, 8, 8)), train=False)
    np.testing.assert_allclose(probs, 0.25, atol=1e-9)


def test_maxpool_values_and_shape_errors(rng):
    pool = MaxPool2()
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = pool.forward(x)
    np.testing.assert_array_equal(y[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    with pytest.raises(ShapeError):
        pool.forward(np.zeros((1, 1, 3, 4)))
    with pytest.raises(ShapeError):
        pool.forward(np.zeros((1, 4, 4)))


def test_batchnorm_eval_deterministic(rng):
    bn = BatchNorm(3)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    x = rng.normal(size=(4, 3))
    alone = bn.forward(x[:1], train=False)
    batched = bn.forward(x, train=False)[:1]
    np.testing.assert_array_equal(alone, batched)


def test_conv_shape_validation(rng):
    conv = Conv2D(2, 3, rng)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 4, 8, 8)))


def test_gradients_conv(rng):
    model = small_stack(
        [Conv2D(2, 3, rng), FullyConnected(3 * 6 * 6, 3, rng), Softmax()], (2, 6, 6)
    )
    fd_param_check(model, rng.normal(size=(4, 2, 6, 6)), rng.integers(0, 3, 4), n_checks=10)


def test_gradients_relu(rng):
    model = small_stack(
        [FullyConnected(6, 8, rng), ReLU(), FullyConnected(8, 2, rng), Softmax()], (6,)
    )
    fd_param_check(model, rng.normal(size=(6, 6)), rng.integers(0, 2, 6), n_checks=10)


def test_gradients_maxpool(rng):
    model = small_stack(
        [Conv2D(1, 2, rng), MaxPool2(), FullyConnected(2 * 3 * 3, 2, rng), Softmax()],
        (1, 6, 6),
    )
    fd_param_check(model, rng.normal(size=(4, 1, 6, 6)), rng.integers(0, 2, 4), n_checks=10)


def test_gradients_batchnorm_dense(rng):
    model = small_stack(
        [FullyConnected(5, 7, rng), BatchNorm(7), FullyConnected(7, 2, rng), Softmax()], (5,)
    )
    fd_param_check(model, rng.normal(size=(8, 5)), rng.integers(0, 2, 8), n_checks=10)


def test_gradients_batchnorm_conv(rng):
    model = small_stack(
        [Conv2D(1, 3, rng), BatchNorm(3), FullyConnected(3 * 4 * 4, 2, rng), Softmax()],
        (1, 4, 4),
    )
    fd_param_check(model, rng.normal(size=(5, 1, 4, 4)), rng.integers(0, 2, 5), n_checks=10)


def test_gradients_fc_softmax(rng):
    model = small_stack([FullyConnected(4, 3, rng), Softmax()], (4,))
    fd_param_check(model, rng.normal(size=(6, 4)), rng.integers(0, 3, 6), n_checks=10)


def test_gradients_full_table_stack(rng):
    model = nn.table_model((2, 8, 8), 3, rng, conv_channels=(3, 4, 5), fc_widths=(10, 8))
    fd_param_check(
        model, rng.normal(size=(6, 2, 8, 8)), rng.integers(0, 3, 6), n_checks=12
    )


def test_forward_determinism(rng):
    model = nn.table_model((1, 8, 8), 3, rng, conv_channels=(3, 4, 5), fc_widths=(8, 6))
    x = rng.normal(size=(3, 1, 8, 8))
    a = model.forward(x)
    b = model.forward(x)
    assert np.array_equal(a, b)
    rebuilt = nn.table_model(
        (1, 8, 8), 3, np.random.default_rng(999), conv_channels=(3, 4, 5), fc_widths=(8, 6)
    )
    rebuilt2 = nn.table_model(
        (1, 8, 8), 3, np.random.default_rng(999), conv_channels=(3, 4, 5), fc_widths=(8, 6)
    )
    assert np.array_equal(rebuilt.forward(x), rebuilt2.forward(x))


def test_conv_as_matrix_matches_forward(rng):
    conv = Conv2D(2, 3, rng)
    x = rng.normal(size=(2, 2, 5, 5))
    # Odd sizes are fine for conv itself, only pooling needs even dims.
    y = conv.forward(x)
    mat = nn.conv_as_matrix(conv, (2, 5, 5))
    flat = x.reshape(2, -1) @ mat.T + np.repeat(conv.b, 25)[None, :]
    np.testing.assert_allclose(y.reshape(2, -1), flat, atol=1e-12)


def test_split_model_validation(rng):
    with pytest.raises(InvalidSplit):
        nn.SplitModel([ReLU()], [0], (3,))
    with pytest.raises(InvalidSplit):
        nn.SplitModel([FullyConnected(3, 2, rng)], [1], (3,))
    model = nn.mlp_model(4, (3,), 2, rng)
    with pytest.raises(InvalidSplit):
        nn.split(model, 0)
    with pytest.raises(InvalidSplit):
        nn.split(model, 5)
