import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from dvd import diffcore as dc
from dvd.errors import FrozenError, NumericError, ParameterError, ShapeError, StateError


def one_layer(w, b=None, act="identity", dtype=np.float32):
    w = np.asarray(w, dtype=dtype)
    b = np.zeros((1, w.shape[1]), dtype=dtype) if b is None else np.asarray(b, dtype=dtype).reshape(1, -1)
    return dc.MlpNet([dc.Layer(w, b, act)])


def random_net(seed, widths=(3, 5, 4), acts=("relu", "identity")):
    return dc.MlpNet.init(list(widths), list(acts), np.random.default_rng(seed))


# -- forward ---------------------------------------------------------------


def test_identity_layer_passes_input_through():
    out = dc.forward(one_layer(np.eye(2)), [[1.0, 2.0]])
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_relu_layer_clips_negatives():
    out = dc.forward(one_layer(np.eye(2), act="relu"), [[-1.0, 3.0]])
    np.testing.assert_array_equal(out, [[0.0, 3.0]])


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_hand_evaluation(seed):
    net = random_net(seed)
    net.layers[0].bias[:] = np.random.default_rng(seed + 100).standard_normal(net.layers[0].bias.shape)
    x = np.random.default_rng(seed + 7).standard_normal((6, 3))
    out = net(x)
    for row, got in zip(x, out):
        np.testing.assert_allclose(got, oracles.mlp(oracles.net_layers(net), row), atol=1e-5)


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeError):
        random_net(0)(np.zeros((2, 4)))


def test_forward_is_bitwise_deterministic():
    net = random_net(3)
    x = np.random.default_rng(0).standard_normal((16, 3))
    assert net(x).tobytes() == net(x).tobytes()


def test_layers_must_chain():
    a = dc.Layer(np.zeros((2, 3), np.float32), np.zeros((1, 3), np.float32))
    b = dc.Layer(np.zeros((4, 1), np.float32), np.zeros((1, 1), np.float32))
    with pytest.raises(ShapeError):
        dc.MlpNet([a, b])


def test_glorot_bounds_and_zero_bias():
    net = dc.MlpNet.init([10, 30], ["identity"], np.random.default_rng(0))
    limit = np.sqrt(6 / 40)
    assert np.abs(net.layers[0].weight).max() <= limit
    assert not net.layers[0].bias.any()


def test_velocity_buffers_match_parameters():
    net = random_net(0)
    for layer, (vw, vb) in zip(net.layers, net.velocity):
        assert vw.shape == layer.weight.shape and vb.shape == layer.bias.shape


# -- backward --------------------------------------------------------------


def test_quadratic_gradients():
    net = one_layer(np.eye(2), dtype=np.float64)
    tape = dc.GradTape()
    x = tape.watch(np.array([[3.0, 4.0]]))
    y = dc.apply(net, x)
    loss = dc.scale(dc.total(dc.square(y)), 0.5)
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads.wrt(x), [[3.0, 4.0]])
    # dL/dW = x^T (W x) = x x^T for W = I
    np.testing.assert_allclose(grads[net][0][0], np.outer([3.0, 4.0], [3.0, 4.0]))


def test_softmax_cross_entropy_gradient_is_p_minus_onehot():
    tape = dc.GradTape()
    logits = tape.watch(np.array([[1.0, -0.5, 2.0]]))
    loss = dc.softmax_cross_entropy(logits, np.array([1]))
    g = tape.backward(loss).wrt(logits)
    expected = np.array(oracles.softmax([1.0, -0.5, 2.0])) - np.array([0, 1, 0])
    np.testing.assert_allclose(g[0], expected, atol=1e-12)


def test_backward_via_upstream():
    net = one_layer(np.eye(2), dtype=np.float64)
    tape = dc.GradTape()
    out = dc.forward(net, np.array([[3.0, 4.0]]), tape)
    grads = dc.backward(tape, out)  # upstream of 0.5*||y||^2
    np.testing.assert_allclose(grads[net][0][0], [[9, 12], [12, 16]])


def test_backward_without_forward_is_state_error():
    with pytest.raises(StateError):
        dc.backward(dc.GradTape(), np.ones((1, 1)))


def test_tape_cannot_be_replayed():
    tape = dc.GradTape()
    x = tape.watch(np.ones((1, 2)))
    loss = dc.total(x)
    tape.backward(loss)
    with pytest.raises(StateError):
        tape.backward(loss)


def test_unused_parameters_get_exact_zero():
    used, unused = random_net(0), random_net(1)
    tape = dc.GradTape()
    loss = dc.total(dc.apply(used, tape.constant(np.ones((2, 3)))))
    grads = tape.backward(loss)
    for gw, gb in grads[unused]:
        assert not gw.any() and not gb.any()


def test_frozen_net_receives_no_gradient():
    net = random_net(0)
    net.frozen = True
    tape = dc.GradTape()
    x = tape.watch(np.ones((2, 3), np.float32))
    grads = tape.backward(dc.total(dc.apply(net, x)))
    assert grads.wrt(x).any()
    assert all(not gw.any() for gw, _ in grads[net])


def kink_free_batch(net, rng, shape, eps=1e-3):
    """Random inputs whose first-layer ReLU pre-activations stay outside the FD stencil."""
    while True:
        x = rng.standard_normal(shape)
        pre = x @ net.layers[0].weight + net.layers[0].bias
        if np.abs(pre).min() > 2 * eps * max(1.0, np.abs(x).max()):
            return x


@pytest.mark.parametrize("seed", range(20))
def test_random_mlp_finite_differences(seed):
    net = random_net(seed, (3, 6, 4), ("relu", "identity"))
    x = kink_free_batch(net, np.random.default_rng(seed), (5, 3))

    def loss(n, batch, tape):
        return dc.scale(dc.total(dc.square(dc.apply(n, tape.constant(batch)))), 0.5)

    assert dc.finite_diff_check(net, loss, x) < 1e-4


# -- softmax ---------------------------------------------------------------


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_positive_simplex(x):
    p = dc.softmax_rows(x)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_is_stable_for_large_logits():
    p = dc.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)


# -- sgd -------------------------------------------------------------------


def scalar_net(p=1.0):
    return one_layer([[p]])


def unit_grad():
    return [(np.ones((1, 1), np.float32), np.zeros((1, 1), np.float32))]


def test_vanilla_sgd_step():
    net = scalar_net()
    dc.sgd_step(net, unit_grad(), lr=0.1, momentum=0.0)
    assert net.layers[0].weight[0, 0] == pytest.approx(0.9)


def test_momentum_two_steps():
    net = scalar_net()
    dc.sgd_step(net, unit_grad(), lr=0.1, momentum=0.9)
    dc.sgd_step(net, unit_grad(), lr=0.1, momentum=0.9)
    assert net.velocity[0][0][0, 0] == pytest.approx(1.9)
    assert net.layers[0].weight[0, 0] == pytest.approx(0.71)


def test_zero_gradient_decays_momentum_only():
    net = scalar_net()
    dc.sgd_step(net, unit_grad(), lr=0.1, momentum=0.9)
    before = net.layers[0].weight.copy()
    zero = [(np.zeros((1, 1), np.float32), np.zeros((1, 1), np.float32))]
    net2 = scalar_net(float(before[0, 0]))
    net2.velocity = [(np.zeros((1, 1), np.float32), np.zeros((1, 1), np.float32))]
    dc.sgd_step(net2, zero, lr=0.1, momentum=0.9)
    assert net2.layers[0].weight[0, 0] == before[0, 0]
    v = net.velocity[0][0][0, 0]
    dc.sgd_step(net, zero, lr=0.1, momentum=0.9)
    assert net.velocity[0][0][0, 0] == pytest.approx(0.9 * v)


def test_frozen_net_refuses_update():
    net = scalar_net()
    net.frozen = True
    with pytest.raises(FrozenError):
        dc.sgd_step(net, unit_grad(), lr=0.1, momentum=0.0)


@pytest.mark.parametrize("lr,mom", [(0.0, 0.5), (-1.0, 0.5), (0.1, 1.0), (0.1, -0.1)])
def test_sgd_rejects_bad_hyperparameters(lr, mom):
    with pytest.raises(ParameterError):
        dc.sgd_step(scalar_net(), unit_grad(), lr=lr, momentum=mom)


def test_checksum_tracks_parameters():
    net = random_net(0)
    c = net.checksum()
    assert net.copy().checksum() == c
    net.layers[0].weight[0, 0] += 1
    assert net.checksum() != c


# -- finite differences ----------------------------------------------------


def test_fd_scalar_quadratic():
    net = one_layer([[3.0]], dtype=np.float64)

    def loss(n, batch, tape):  # f(w) = w^2 via input 1
        return dc.total(dc.square(dc.apply(n, tape.constant(batch))))

    assert dc.finite_diff_check(net, loss, np.ones((1, 1))) < 1e-8


def test_fd_softmax_cross_entropy_head():
    net = random_net(4, (4, 3), ("identity",))
    x = np.random.default_rng(0).standard_normal((6, 4))
    y = np.array([0, 1, 2, 0, 1, 2])

    def loss(n, batch, tape):
        return dc.softmax_cross_entropy(dc.apply(n, tape.constant(batch)), y)

    assert dc.finite_diff_check(net, loss, x) < 1e-4


def test_fd_rejects_nonfinite_loss():
    net = random_net(0)

    def loss(n, batch, tape):
        return tape.constant(np.array([[np.nan]]))

    with pytest.raises(NumericError):
        dc.finite_diff_check(net, loss, np.ones((1, 3)))


def test_fd_rejects_bad_eps():
    with pytest.raises(ParameterError):
        dc.finite_diff_check(random_net(0), None, None, eps=0)


def test_tensor2_rejects_nonfinite():
    with pytest.raises(NumericError):
        dc.tensor2([[1.0, np.inf]])
