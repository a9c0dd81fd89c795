import numpy as np
import pytest

import nets
from cpajvp import (Activation, Add, Concat, Dense, Dropout, GraphError,
                    MaxPool, Network, Node, Recurrent, ShapeMismatch,
                    dropout_mask, forward, record_states, shape_infer,
                    validate)


def test_forward_hand_computed_dense_chain():
    w1 = np.array([[1.0, -2.0], [0.5, 0.5]])
    b1 = np.array([0.5, -1.0])
    w2 = np.array([[2.0, 1.0]])
    b2 = np.array([0.25])
    net = Network((2,), [
        Node("fc1", Dense(w1, b1), ["input"]),
        Node("act1", Activation(0.0), ["fc1"]),
        Node("fc2", Dense(w2, b2), ["act1"]),
    ], "fc2")
    x = np.array([1.0, 2.0])
    # fc1 = [1-4+0.5, 0.5+1-1] = [-2.5, 0.5]; relu -> [0, 0.5]
    # fc2 = 2*0 + 1*0.5 + 0.25 = 0.75
    assert np.array_equal(forward(net, x), [0.75])


def test_activation_leaky_and_abs():
    x = np.array([-2.0, 3.0])
    for leak, want in [(0.0, [0.0, 3.0]), (0.1, [-0.2, 3.0]), (-1.0, [2.0, 3.0])]:
        net = Network((2,), [Node("a", Activation(leak), ["input"])], "a")
        assert np.array_equal(forward(net, x), want)


def test_zero_preactivation_mask_is_active():
    # bias tuned so the unit sits exactly on the kink
    w = np.array([[1.0]])
    b = np.array([-3.0])
    net = Network((1,), [
        Node("fc", Dense(w, b), ["input"]),
        Node("act", Activation(0.25), ["fc"]),
    ], "act")
    out, state = record_states(net, np.array([3.0]))
    assert out[0] == 0.0
    assert state.sign_masks["act"][0]  # h == 0 counts as the active side


def test_record_states_output_matches_forward_bitwise():
    rng = np.random.default_rng(0)
    net = nets.branchy_net(3)
    for _ in range(5):
        x = rng.standard_normal(6)
        out, state = record_states(net, x)
        assert np.array_equal(out, forward(net, x))
        assert state.keep_masks["drop"].shape == (12,)


def test_dropout_training_deterministic_and_scaled():
    rate = 0.5
    net = Network((64,), [Node("d", Dropout(rate, training=True, seed=9), ["input"])], "d")
    x = np.ones(64)
    a = forward(net, x)
    b = forward(net, x)
    assert np.array_equal(a, b)
    kept = a != 0.0
    assert np.all(a[kept] == 1.0 / (1.0 - rate))
    # inference mode is the identity
    net_inf = Network((64,), [Node("d", Dropout(rate), ["input"])], "d")
    assert np.array_equal(forward(net_inf, x), x)


def test_dropout_mask_keyed_by_seed_and_node():
    m1 = dropout_mask(7, "d", (100,), 0.3)
    m2 = dropout_mask(7, "d", (100,), 0.3)
    m3 = dropout_mask(8, "d", (100,), 0.3)
    m4 = dropout_mask(7, "e", (100,), 0.3)
    assert np.array_equal(m1, m2)
    assert not np.array_equal(m1, m3)
    assert not np.array_equal(m1, m4)
    assert m1.dtype == np.bool_


def test_batchnorm_inference_formula():
    from cpajvp import BatchNormInference
    gamma = np.array([2.0, 0.5])
    beta = np.array([1.0, -1.0])
    mean = np.array([0.5, -0.5])
    var = np.array([4.0, 0.25])
    net = Network((2,), [
        Node("bn", BatchNormInference(gamma, beta, mean, var, epsilon=0.0), ["input"]),
    ], "bn")
    x = np.array([2.5, 0.5])
    want = gamma * (x - mean) / np.sqrt(var) + beta
    assert np.max(np.abs(forward(net, x) - want)) <= 1e-15


def test_recurrent_single_step_equals_dense_activation():
    rng = np.random.default_rng(4)
    d_in, d_h = 4, 5
    wh = rng.standard_normal((d_h, d_h))
    wi = rng.standard_normal((d_h, d_in))
    b = rng.standard_normal(d_h)
    rec = Network((1, d_in), [Node("r", Recurrent(wh, wi, b, 0.1, 1), ["input"])], "r")
    ref = Network((d_in,), [
        Node("fc", Dense(wi, b), ["input"]),
        Node("act", Activation(0.1), ["fc"]),
    ], "act")
    x = rng.standard_normal(d_in)
    got = forward(rec, x.reshape(1, d_in))
    want = forward(ref, x)
    assert np.max(np.abs(got - want)) <= 1e-14


def test_shape_infer_all_layer_kinds():
    shapes = shape_infer(nets.tiny_cnn())
    assert shapes["conv"] == (1, 4, 4, 4)   # same padding
    assert shapes["pool"] == (1, 2, 2, 4)
    assert shapes["flat"] == (16,)
    assert shapes["head"] == (3,)
    shapes = shape_infer(nets.branchy_net())
    assert shapes["sum"] == (6,)
    assert shapes["cat"] == (12,)
    shapes = shape_infer(nets.tiny_rnn(steps=4))
    assert shapes["rec"] == (5,)


def test_shape_errors_name_the_node():
    net = Network((3,), [Node("fc_bad", Dense(np.zeros((2, 4)), np.zeros(2)), ["input"])],
                  "fc_bad")
    with pytest.raises(ShapeMismatch, match="fc_bad"):
        shape_infer(net)
    net = Network((3,), [Node("cat2", Concat(1), ["input", "input"])], "cat2")
    with pytest.raises(ShapeMismatch, match="cat2"):
        shape_infer(net)


def test_validate_rejects_bad_graphs():
    fc = Node("fc", Dense(np.zeros((2, 3)), np.zeros(2)), ["input"])
    with pytest.raises(GraphError, match="no nodes"):
        validate(Network((3,), [], "fc"))
    with pytest.raises(GraphError, match="reserved"):
        validate(Network((3,), [Node("input", Activation(), ["input"])], "input"))
    with pytest.raises(GraphError, match="duplicate"):
        validate(Network((3,), [fc, Node("fc", Activation(), ["fc"])], "fc"))
    with pytest.raises(GraphError, match="does not exist"):
        validate(Network((3,), [fc], "nope"))
    with pytest.raises(GraphError, match="at least two"):
        validate(Network((3,), [Node("add1", Add(), ["input"])], "add1"))
    with pytest.raises(GraphError, match="rate"):
        validate(Network((3,), [Node("d", Dropout(1.0), ["input"])], "d"))
    with pytest.raises(GraphError, match="steps"):
        validate(Network((2, 3), [Node("r", Recurrent(np.eye(2), np.zeros((2, 3)),
                                                      np.zeros(2), 0.0, 0), ["input"])],
                         "r"))
    # forward reference breaks topological order
    with pytest.raises(GraphError, match="topological"):
        validate(Network((3,), [
            Node("a", Activation(), ["b"]),
            Node("b", Activation(), ["input"]),
        ], "a"))


def test_forward_rejects_wrong_input_shape():
    net = nets.dense_relu_chain(0, [5, 4])
    with pytest.raises(ShapeMismatch, match="input shape"):
        forward(net, np.zeros(6))


def test_maxpool_state_recorded():
    net = nets.tiny_cnn(1)
    x = np.random.default_rng(2).standard_normal((1, 4, 4, 2))
    _, state = record_states(net, x)
    assert state.argmax_indices["pool"].shape == (1, 2, 2, 4)
    assert "act" in state.sign_masks


def test_forward_deterministic():
    net = nets.branchy_net(5)
    x = np.random.default_rng(6).standard_normal(6)
    assert np.array_equal(forward(net, x), forward(net, x))
