import numpy as np
import pytest

from lvadsim.estimator.layers import (
    BatchNorm1D,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    LeakyReLU,
    MaxPool1D,
    layer_from_spec,
)
from lvadsim.estimator.model import CnnModel
from oracles import numeric_gradient, relative_error

TOL = 1e-4


def check_layer(layer, x, train=True, reseed=None):
    """Compare analytic input and parameter gradients against central
    differences of the scalar loss sum(out * g) with a fixed random g."""
    rng = np.random.default_rng(11)

    def fwd():
        if reseed is not None:
            layer.rng = np.random.default_rng(reseed)
        return layer.forward(x, train)

    out = fwd()
    g = rng.normal(size=out.shape)
    loss = lambda: float(np.sum(fwd() * g))
    fwd()
    dx = layer.backward(g)
    assert relative_error(dx, numeric_gradient(loss, x)) < TOL
    for name, arr in layer.params.items():
        fwd()
        layer.backward(g)
        analytic = layer.grads[name].copy()
        assert relative_error(analytic, numeric_gradient(loss, arr)) < TOL, name


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_conv_matches_hand_computed_correlation():
    c = Conv1D(1, 1, 2)
    c.params["W"] = np.array([[[1.0, -1.0]]])
    c.params["b"] = np.array([0.5])
    out = c.forward(np.array([[[1.0, 2.0, 4.0, 7.0]]]))
    np.testing.assert_allclose(out, [[[-0.5, -1.5, -2.5]]])


def test_conv_multi_channel_against_loops():
    c = Conv1D(3, 4, 5)
    c.init(np.random.default_rng(0))
    x = rand(2, 3, 12)
    out = c.forward(x)
    W, b = c.params["W"], c.params["b"]
    ref = np.zeros((2, 4, 8))
    for n in range(2):
        for f in range(4):
            for i in range(8):
                ref[n, f, i] = np.sum(W[f] * x[n, :, i:i + 5]) + b[f]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_gradients():
    c = Conv1D(2, 3, 4)
    c.init(np.random.default_rng(1))
    c.params["b"] = rand(3, seed=5)
    check_layer(c, rand(2, 2, 9))


def test_batchnorm_gradients_train_and_eval():
    bn = BatchNorm1D(3)
    bn.params["gamma"] = rand(3, seed=2) + 1.5
    bn.params["beta"] = rand(3, seed=3)
    check_layer(bn, rand(4, 3, 5), train=True)
    bn.buffers["running_var"] = np.array([0.5, 1.0, 2.0])
    check_layer(bn, rand(4, 3, 5), train=False)
    check_layer(BatchNorm1D(4), rand(6, 4, seed=4), train=True)  # dense-layout input


def test_batchnorm_running_statistics():
    bn = BatchNorm1D(1)
    x = np.full((2, 1, 3), 4.0)
    bn.forward(x, train=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.4)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9)


def test_leaky_relu_gradients():
    x = rand(3, 2, 6)
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    check_layer(LeakyReLU(), x)
    np.testing.assert_allclose(LeakyReLU().forward(np.array([-2.0, 3.0])), [-0.02, 3.0])


def test_maxpool_gradients_and_shape():
    mp = MaxPool1D()
    x = rand(2, 3, 9)
    assert mp.forward(x).shape == (2, 3, 4)
    check_layer(mp, x)


def test_flatten_and_dense_gradients():
    check_layer(Flatten(), rand(2, 3, 4))
    d = Dense(5, 3)
    d.init(np.random.default_rng(2))
    d.params["b"] = rand(3, seed=9)
    check_layer(d, rand(4, 5))


def test_dropout_gradient_with_fixed_mask_and_inference_identity():
    x = rand(50, 8)
    check_layer(Dropout(0.2), x, train=True, reseed=7)
    drop = Dropout(0.2)
    np.testing.assert_array_equal(drop.forward(x, train=False), x)
    out = drop.forward(np.ones((2000, 50)), train=True)
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_tiny_network_gradient():
    layers = [Conv1D(1, 3, 5), BatchNorm1D(3), LeakyReLU(), MaxPool1D(), Conv1D(3, 2, 3), BatchNorm1D(2), LeakyReLU(),
              Flatten(), Dense(2 * 4, 4), LeakyReLU(), Dropout(0.2), Dense(4, 1)]
    m = CnnModel(layers, input_length=16).init(4)
    x = rand(5, 1, 16, seed=6)
    y = rand(5, seed=7)
    drop = layers[10]

    def loss():
        drop.rng = np.random.default_rng(99)
        return m.loss_and_grads(x, y)[0]

    loss()
    analytic = [g.copy() for _, _, g in m.gradients()]
    for (_, name, arr), ga in zip(m.parameters(), analytic):
        num = numeric_gradient(loss, arr)
        if np.max(np.abs(ga)) < 1e-12:
            # a conv bias feeding batch norm has an exactly zero gradient
            assert np.max(np.abs(num)) < 1e-8, name
        else:
            assert relative_error(ga, num) < TOL, name


def test_spec_roundtrip():
    for layer in (Conv1D(2, 3, 4), BatchNorm1D(3), LeakyReLU(), MaxPool1D(), Flatten(), Dense(3, 2), Dropout(0.3)):
        again = layer_from_spec(layer.spec())
        assert again.spec() == layer.spec()
