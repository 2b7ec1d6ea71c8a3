"""
Unit tests for the differentiable array core: forward values, gradient
accumulation and finite-difference agreement of every primitive.
"""

import itertools
import math

import numpy as np
import pytest

import diffcore as dc
from errors import ContractError, ShapeError

seeds = list(range(10))


def _weighted(node, rng_seed):
    """Reduces a node to a scalar with fixed random weights."""
    r = np.random.default_rng(1000 + rng_seed).normal(size=node.shape)
    return dc.sum_(dc.mul(node, r))


unary_cases = {
    "exp": (lambda x: dc.exp(x), lambda rng: 0.5 * rng.normal(size=(3, 4))),
    "log": (lambda x: dc.log(x), lambda rng: rng.uniform(0.5, 2.0, size=(3, 4))),
    "relu": (lambda x: dc.relu(x), lambda rng: rng.normal(size=(3, 4))),
    "gelu": (lambda x: dc.gelu(x), lambda rng: rng.normal(size=(3, 4))),
    "silu": (lambda x: dc.silu(x), lambda rng: rng.normal(size=(3, 4))),
    "scale": (lambda x: dc.scale(x, -2.5), lambda rng: rng.normal(size=(3, 4))),
    "sum_axis": (lambda x: dc.sum_(x, axis=1), lambda rng: rng.normal(size=(3, 4))),
    "mean_keepdims": (lambda x: dc.mean(x, axis=0, keepdims=True), lambda rng: rng.normal(size=(3, 4))),
    "mean_all": (lambda x: dc.mean(x), lambda rng: rng.normal(size=(3, 4))),
    "softmax": (lambda x: dc.softmax(x, axis=-1), lambda rng: rng.normal(size=(3, 4))),
    "log_softmax": (lambda x: dc.log_softmax(x, axis=0), lambda rng: rng.normal(size=(3, 4))),
    "l2_normalize": (lambda x: dc.l2_normalize(x, axis=-1), lambda rng: rng.normal(size=(3, 4))),
    "transpose": (lambda x: dc.transpose(x, (2, 0, 1)), lambda rng: rng.normal(size=(2, 3, 4))),
    "reshape": (lambda x: dc.reshape(x, (4, 3)), lambda rng: rng.normal(size=(3, 4))),
    "slice": (lambda x: dc.slice_(x, (slice(None), slice(1, 3))), lambda rng: rng.normal(size=(3, 4))),
}

binary_cases = {
    "add_broadcast": (dc.add, lambda rng: (rng.normal(size=(3, 4)), rng.normal(size=(1, 4)))),
    "mul_broadcast": (dc.mul, lambda rng: (rng.normal(size=(3, 4)), rng.normal(size=(3, 1)))),
    "matmul": (dc.matmul, lambda rng: (rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))),
    "matmul_batched": (dc.matmul, lambda rng: (rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))),
    "conv1d_same": (lambda x, w: dc.conv1d(x, w, padding="same"),
                    lambda rng: (rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3)))),
    "conv1d_strided": (lambda x, w: dc.conv1d(x, w, stride=2, padding=3),
                       lambda rng: (rng.normal(size=(2, 10)), rng.normal(size=(3, 2, 7)))),
    "concat": (lambda a, b: dc.concat([a, b], axis=1),
               lambda rng: (rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))),
}


def test_unary_primitives_match_finite_differences():
    for (name, (op, draw)), seed in itertools.product(unary_cases.items(), seeds):
        point = draw(np.random.default_rng(seed))
        err = dc.finite_diff_check(lambda x: _weighted(op(x), seed), point)
        print(f"test_unary_primitives_match_finite_differences: {name}, seed = {seed}, error = {err:.2e}")
        assert err < 1e-6


def test_binary_primitives_match_finite_differences():
    for (name, (op, draw)), seed in itertools.product(binary_cases.items(), seeds):
        point = list(draw(np.random.default_rng(seed)))
        err = dc.finite_diff_check(lambda a, b: _weighted(op(a, b), seed), point)
        print(f"test_binary_primitives_match_finite_differences: {name}, seed = {seed}, error = {err:.2e}")
        assert err < 1e-6


def test_composite_softmax_matmul_loss():
    def loss(q, k):
        attn = dc.softmax(dc.scale(dc.matmul(q, dc.transpose(k)), 0.5), axis=-1)
        return dc.mean(dc.log(dc.add(attn, 0.1)))

    for seed in seeds:
        rng = np.random.default_rng(seed)
        err = dc.finite_diff_check(loss, [rng.normal(size=(4, 3)), rng.normal(size=(5, 3))])
        assert err < 1e-6


def test_forward_values():
    assert dc.softmax(np.full((1, 4), 2.0)).values == pytest.approx(np.full((1, 4), 0.25))
    assert dc.gelu(0.0).item() == 0.0
    assert dc.silu(0.0).item() == 0.0
    assert dc.relu(np.array([-1.0, 2.0])).values.tolist() == [0.0, 2.0]
    assert dc.gelu(1.0).item() == pytest.approx(0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0))))
    x = 0.841345
    assert dc.silu(x).item() == pytest.approx(x / (1.0 + math.exp(-x)))
    conv = dc.conv1d(np.array([[1.0, 2.0, 3.0]]), np.array([[[1.0, 1.0]]]))
    assert conv.values.tolist() == [[3.0, 5.0]]


def test_conv1d_output_lengths():
    x = np.zeros((2, 3, 20))
    for kernel, stride in itertools.product([1, 3, 7], [1, 2]):
        w = np.zeros((5, 3, kernel))
        same = dc.conv1d(x, w, stride=stride, padding="same")
        assert same.shape == (2, 5, (20 + 2 * (kernel // 2) - kernel) // stride + 1)
        valid = dc.conv1d(x, w, stride=stride)
        assert valid.shape == (2, 5, (20 - kernel) // stride + 1)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = dc.softmax(10.0 * rng.normal(size=(6, 5)), axis=-1).values
    assert np.allclose(out.sum(axis=-1), 1.0)
    assert np.all(out >= 0)
    # Large logits do not overflow.
    big = dc.softmax(np.array([[1000.0, 1000.0]])).values
    assert big == pytest.approx(np.array([[0.5, 0.5]]))


def test_l2_normalize():
    rng = np.random.default_rng(4)
    out = dc.l2_normalize(rng.normal(size=(5, 3))).values
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0)
    zero = dc.l2_normalize(np.zeros((2, 3)))
    assert np.all(zero.values == 0.0)
    assert np.all(np.isfinite(zero.values))


def test_backward_of_sum_is_ones():
    x = dc.parameter(np.arange(6.0).reshape(2, 3))
    dc.sum_(x).backward()
    assert np.all(x.grad == 1.0)


def test_backward_of_square():
    x = dc.parameter(np.array([1.0, -2.0]))
    dc.sum_(dc.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, -4.0]


def test_backward_accumulates_until_zeroed():
    x = dc.parameter(np.array([1.0, 2.0]))
    dc.sum_(x).backward()
    dc.sum_(x).backward()
    assert x.grad.tolist() == [2.0, 2.0]
    dc.zero_grad([x])
    assert x.grad.tolist() == [0.0, 0.0]


def test_intermediate_nodes_receive_gradients():
    x = dc.parameter(np.array([1.0, 2.0, 3.0]))
    hidden = dc.scale(x, 2.0)
    dc.sum_(dc.mul(hidden, hidden)).backward()
    assert hidden.grad.tolist() == [4.0, 8.0, 12.0]
    assert x.grad.tolist() == [8.0, 16.0, 24.0]


def test_constants_receive_no_gradient():
    c = dc.as_node(np.ones(3))
    x = dc.parameter(np.ones(3))
    dc.sum_(dc.mul(c, x)).backward()
    assert not c.requires_grad
    assert np.all(c.grad == 0.0)


def test_operator_overloads():
    x = dc.parameter(np.array([2.0, 4.0]))
    y = (3.0 * x - 1.0) / 2.0 + (-x)
    assert y.values.tolist() == [0.5, 1.5]
    dc.sum_(y).backward()
    assert x.grad.tolist() == [0.5, 0.5]


def test_non_scalar_backward_raises():
    x = dc.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        dc.scale(x, 2.0).backward()


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError) as info:
        dc.matmul(np.ones((2, 3)), np.ones((4, 5)))
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)
    with pytest.raises(ShapeError) as info:
        dc.add(np.ones((2, 3)), np.ones((4, 3)))
    assert "(2, 3)" in str(info.value) and "(4, 3)" in str(info.value)
    with pytest.raises(ShapeError):
        dc.conv1d(np.ones((2, 10)), np.ones((1, 3, 3)))
    with pytest.raises(ShapeError):
        dc.reshape(np.ones((2, 3)), (4, 2))
    with pytest.raises(ShapeError):
        dc.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_slice_rejects_advanced_indexing():
    with pytest.raises(ContractError):
        dc.slice_(np.ones(4), [0, 1])


def test_all_finite():
    x = dc.parameter(np.ones(2))
    assert dc.all_finite([x])
    x.grad = np.array([np.nan, 0.0])
    assert not dc.all_finite([x])


def test_checkpoint_arrays(tmp_path):
    rng = np.random.default_rng(5)
    named = [("a", dc.parameter(rng.normal(size=(2, 3)))), ("b", dc.parameter(rng.normal(size=4)))]
    dc.save_arrays(named, tmp_path / "ckpt", metadata={"seed": 5})
    arrays, metadata = dc.load_arrays(tmp_path / "ckpt")
    assert metadata == {"seed": 5}
    for name, node in named:
        assert np.array_equal(arrays[name], node.values)


def test_checkpoint_keeps_scalar_shapes(tmp_path):
    scalar = dc.parameter(np.array(2.5))
    stepped = dc.parameter(np.array(-1.0))
    stepped.values = stepped.values + np.array(0.25)
    named = [("scalar", scalar), ("stepped", stepped), ("row", dc.parameter(np.ones((1, 3))))]
    dc.save_arrays(named, tmp_path / "ckpt")
    arrays, _ = dc.load_arrays(tmp_path / "ckpt")
    assert arrays["scalar"].shape == () and arrays["scalar"] == 2.5
    assert arrays["stepped"].shape == () and arrays["stepped"] == -0.75
    assert arrays["row"].shape == (1, 3)


def test_linear_layer_gradient_is_exact():
    def linear(w, b, x):
        return dc.sum_(dc.mul(dc.add(dc.matmul(x, w), b), np.arange(6.0).reshape(3, 2)))

    rng = np.random.default_rng(6)
    point = [rng.normal(size=(4, 2)), rng.normal(size=(1, 2)), rng.normal(size=(3, 4))]
    # Central differences carry no truncation error here, so a wide step is safe.
    err = dc.finite_diff_check(linear, point, eps=1e-3)
    assert err < 1e-7
