import numpy as np
import pytest

import nets
from cpajvp import (GraphError, ShapeMismatch, concat_clone_forward, fixtures,
                    forward, frozen_forward, frozen_vjp, jvp_batch, jvp_input,
                    jvp_weight, materialize_affine_direct, record_states,
                    vjp_input)

ALL_ARCHS = fixtures.ARCHITECTURES


def each_fixture(seeds=(0, 1, 2)):
    for arch in ALL_ARCHS:
        for seed in seeds:
            yield fixtures.generate(arch, seed)


# ---------------------------------------------------------------------------
# clone consistency

def test_frozen_replay_at_x_reproduces_forward_bitwise():
    # same graph, same arithmetic path: the replay must be exact
    for net, x in each_fixture():
        out, state = record_states(net, x)
        replay = frozen_forward(net, state, x, mode="affine")
        assert np.array_equal(replay, out)
        assert np.array_equal(out, forward(net, x))


def test_affine_minus_offset_equals_linear_mode():
    for net, x in each_fixture((0, 3)):
        _, state = record_states(net, x)
        rng = np.random.default_rng(17)
        v = rng.standard_normal(x.shape)
        affine = frozen_forward(net, state, v, mode="affine")
        offset = frozen_forward(net, state, np.zeros_like(x), mode="affine")
        linear = frozen_forward(net, state, v, mode="linear")
        scale = 1.0 + np.max(np.abs(affine))
        assert np.max(np.abs((affine - offset) - linear)) <= 1e-12 * scale


def test_frozen_forward_rejects_bad_mode():
    net, x = fixtures.generate("mlp", 0)
    _, state = record_states(net, x)
    with pytest.raises(ValueError, match="mode"):
        frozen_forward(net, state, x, mode="quadratic")


def test_frozen_forward_rejects_foreign_state():
    net, x = fixtures.generate("mlp", 0)
    other, y = fixtures.generate("cnn", 0)
    _, state = record_states(other, y)
    with pytest.raises((GraphError, ShapeMismatch, KeyError)):
        frozen_forward(net, state, x)


# ---------------------------------------------------------------------------
# jvp / vjp against the materialized map

def test_jvp_equals_slope_matrix_times_direction():
    rng = np.random.default_rng(5)
    for net, x in each_fixture((0, 1)):
        amap = materialize_affine_direct(net, x)
        u = rng.standard_normal(x.shape)
        got = jvp_input(net, x, u)
        want = amap.a @ u.reshape(-1)
        assert np.max(np.abs(got.reshape(-1) - want)) <= 1e-9 * (1.0 + np.max(np.abs(want)))


def test_vjp_equals_transposed_slope():
    rng = np.random.default_rng(6)
    for net, x in each_fixture((0, 1)):
        amap = materialize_affine_direct(net, x)
        v = rng.standard_normal(amap.a.shape[0])
        out_shape = forward(net, x).shape
        got = vjp_input(net, x, v.reshape(out_shape))
        want = amap.a.T @ v
        assert np.max(np.abs(got.reshape(-1) - want)) <= 1e-9 * (1.0 + np.max(np.abs(want)))


def test_jvp_vjp_adjoint_identity():
    rng = np.random.default_rng(7)
    for net, x in each_fixture((2,)):
        d_out = forward(net, x).shape
        _, state = record_states(net, x)
        for _ in range(5):
            u = rng.standard_normal(x.shape)
            v = rng.standard_normal(d_out)
            ju = frozen_forward(net, state, u, mode="linear")
            jtv = frozen_vjp(net, state, v)
            lhs = float(np.sum(ju * v))
            rhs = float(np.sum(u * jtv))
            bound = np.linalg.norm(ju) * np.linalg.norm(v) + \
                np.linalg.norm(u) * np.linalg.norm(jtv)
            assert abs(lhs - rhs) <= 1e-11 * (1.0 + bound)


def test_vjp_rejects_wrong_cotangent_shape():
    net, x = fixtures.generate("mlp", 1)
    _, state = record_states(net, x)
    bad = np.zeros(forward(net, x).size + 1)
    with pytest.raises(ShapeMismatch, match="cotangent"):
        frozen_vjp(net, state, bad)


# ---------------------------------------------------------------------------
# weight directions

def weight_jvp_oracle(net, x, node_id, direction):
    """Sum of one-entry-at-a-time frozen perturbation columns."""
    node = next(n for n in net.nodes if n.id == node_id)
    ref = node.layer.weights if hasattr(node.layer, "weights") else node.layer.filters
    _, state = record_states(net, x)
    base = frozen_forward(net, state, x, mode="affine")
    total = np.zeros_like(base)
    flat = direction.reshape(-1)
    for pos in np.nonzero(flat)[0]:
        bump = np.zeros(ref.size)
        bump[pos] = flat[pos]
        pert = nets.replace_weights(net, node_id, ref + bump.reshape(ref.shape))
        total += frozen_forward(pert, state, x, mode="affine") - base
    return total


def test_jvp_weight_dense_matches_perturbation_oracle():
    net, x = fixtures.generate("mlp", 4)
    target = next(n.id for n in net.nodes if hasattr(n.layer, "weights"))
    lay = next(n.layer for n in net.nodes if n.id == target)
    rng = np.random.default_rng(8)
    # sparse direction keeps the one-at-a-time oracle cheap
    direction = rng.standard_normal(lay.weights.shape)
    keep = rng.random(direction.shape) < 0.2
    direction = direction * keep
    got = jvp_weight(net, x, target, direction)
    want = weight_jvp_oracle(net, x, target, direction)
    assert np.max(np.abs(got - want)) <= 1e-9 * (1.0 + np.max(np.abs(want)))


def test_jvp_weight_conv_matches_perturbation_oracle():
    net, x = fixtures.generate("cnn", 2)
    target = next(n.id for n in net.nodes if hasattr(n.layer, "filters"))
    lay = next(n.layer for n in net.nodes if n.id == target)
    rng = np.random.default_rng(9)
    direction = rng.standard_normal(lay.filters.shape)
    keep = rng.random(direction.shape) < 0.15
    direction = direction * keep
    got = jvp_weight(net, x, target, direction)
    want = weight_jvp_oracle(net, x, target, direction)
    assert np.max(np.abs(got - want)) <= 1e-9 * (1.0 + np.max(np.abs(want)))


def test_jvp_weight_on_branchy_graph():
    # a node feeding only one branch of an Add: the other branch is dead
    net = nets.branchy_net(2)
    x = np.random.default_rng(10).standard_normal(6)
    lay = next(n.layer for n in net.nodes if n.id == "a")
    rng = np.random.default_rng(11)
    direction = rng.standard_normal(lay.weights.shape) * \
        (rng.random(lay.weights.shape) < 0.25)
    got = jvp_weight(net, x, "a", direction)
    want = weight_jvp_oracle(net, x, "a", direction)
    assert np.max(np.abs(got - want)) <= 1e-9 * (1.0 + np.max(np.abs(want)))


def test_jvp_weight_validates_node_and_shape():
    net, x = fixtures.generate("mlp", 0)
    target = next(n.id for n in net.nodes if hasattr(n.layer, "weights"))
    lay = next(n.layer for n in net.nodes if n.id == target)
    with pytest.raises(GraphError, match="no node"):
        jvp_weight(net, x, "ghost", np.zeros_like(lay.weights))
    act = next(n.id for n in net.nodes if type(n.layer).__name__ == "Activation")
    with pytest.raises(GraphError, match="Dense or Conv2D"):
        jvp_weight(net, x, act, np.zeros((2, 2)))
    with pytest.raises(ShapeMismatch, match="direction"):
        jvp_weight(net, x, target, np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# batched directions

def test_jvp_batch_matches_per_column_calls():
    net, x = fixtures.generate("resnet-mini", 3)
    d_in = x.size
    rng = np.random.default_rng(12)
    dirs = rng.standard_normal((d_in, 7))
    got = jvp_batch(net, x, dirs)
    for j in range(7):
        col = jvp_input(net, x, dirs[:, j].reshape(x.shape)).reshape(-1)
        assert np.array_equal(got[:, j], col)


def test_jvp_batch_is_linear():
    net, x = fixtures.generate("mlp", 5)
    rng = np.random.default_rng(13)
    a = rng.standard_normal((x.size, 3))
    b = rng.standard_normal((x.size, 3))
    lhs = jvp_batch(net, x, a + 2.0 * b)
    rhs = jvp_batch(net, x, a) + 2.0 * jvp_batch(net, x, b)
    assert np.max(np.abs(lhs - rhs)) <= 1e-11 * (1.0 + np.max(np.abs(rhs)))


def test_jvp_batch_rejects_wrong_leading_dim():
    net, x = fixtures.generate("mlp", 0)
    with pytest.raises(ShapeMismatch, match="directions"):
        jvp_batch(net, x, np.zeros((x.size + 1, 2)))


# ---------------------------------------------------------------------------
# batched clone pass

def test_concat_clone_matches_frozen_affine_per_branch():
    rng = np.random.default_rng(14)
    for net, x in each_fixture((0, 1)):
        _, state = record_states(net, x)
        branches = [rng.standard_normal(x.shape) for _ in range(3)]
        outs = concat_clone_forward(net, x, branches)
        assert len(outs) == 3
        for br, got in zip(branches, outs):
            want = frozen_forward(net, state, br, mode="affine")
            scale = 1.0 + np.max(np.abs(want))
            assert np.max(np.abs(got - want)) <= 1e-12 * scale


def test_concat_clone_single_and_many_branches():
    net, x = fixtures.generate("unet-mini", 1)
    rng = np.random.default_rng(15)
    _, state = record_states(net, x)
    for m in (1, 5):
        branches = [rng.standard_normal(x.shape) for _ in range(m)]
        outs = concat_clone_forward(net, x, branches)
        assert len(outs) == m
        for br, got in zip(branches, outs):
            want = frozen_forward(net, state, br, mode="affine")
            assert np.max(np.abs(got - want)) <= 1e-12 * (1.0 + np.max(np.abs(want)))


def test_concat_clone_requires_a_branch():
    net, x = fixtures.generate("mlp", 0)
    with pytest.raises(ValueError, match="branch"):
        concat_clone_forward(net, x, [])
    with pytest.raises(ShapeMismatch, match="branch"):
        concat_clone_forward(net, x, [np.zeros(x.size + 1)])
