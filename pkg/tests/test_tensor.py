"""Autograd core: forward values, finite-difference gradients, tape rules."""

import numpy as np
import pytest

from cbamdet.gradcheck import GradientMismatch, check_gradients
from cbamdet.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    assert_finite,
    atan,
    bce_with_logits,
    concat,
    div,
    exp,
    log,
    matmul,
    maximum,
    minimum,
    mul,
    mul_broadcast,
    neg,
    no_grad,
    permute,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    silu,
    slice_axis,
    sub,
    take_rows,
    tensor,
    tmean,
    tsum,
)


def _rand(shape, lo=-2.0, hi=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def test_tensor_basics():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert not t.requires_grad


def test_zero_size_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_scalar_results_are_size_one():
    s = tsum(Tensor(np.ones((2, 3))))
    assert s.data.size == 1
    assert s.data.item() == 6.0


def test_backward_needs_scalar():
    x = _rand((3,))
    with pytest.raises(ShapeError):
        mul(x, x).backward()


@pytest.mark.parametrize(
    "name,fn,lo,hi",
    [
        ("neg", neg, -2.0, 2.0),
        ("exp", exp, -2.0, 2.0),
        ("log", log, 0.5, 3.0),
        ("atan", atan, -2.0, 2.0),
        ("relu", relu, 0.3, 2.0),
        ("relu_neg", relu, -2.0, -0.3),
        ("sigmoid", sigmoid, -4.0, 4.0),
        ("silu", silu, -4.0, 4.0),
    ],
)
def test_unary_gradients(name, fn, lo, hi):
    x = _rand((3, 4), lo, hi, seed=hash(name) % 2**32)
    check_gradients(lambda: tsum(fn(x)), [x])


@pytest.mark.parametrize("op", [add, sub, mul, div])
@pytest.mark.parametrize("sa,sb", [((3, 4), (3, 4)), ((3, 1), (1, 4)), ((2, 3, 4), (4,))])
def test_binary_broadcast_gradients(op, sa, sb):
    a = _rand(sa, seed=1)
    b = _rand(sb, 0.5, 2.0, seed=2)  # keep divisors away from zero
    check_gradients(lambda: tsum(op(a, b)), [a, b])


def test_maximum_minimum_values():
    a = tensor([1.0, 5.0, -2.0])
    b = tensor([3.0, 2.0, -2.0])
    np.testing.assert_array_equal(maximum(a, b).data, [3.0, 5.0, -2.0])
    np.testing.assert_array_equal(minimum(a, b).data, [1.0, 2.0, -2.0])


def test_maximum_tie_routes_to_first_operand():
    a = Tensor([2.0, 2.0], requires_grad=True)
    b = Tensor([2.0, 2.0], requires_grad=True)
    tsum(maximum(a, b)).backward()
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_maximum_gradient_fd():
    a = _rand((4, 3), seed=5)
    b = _rand((4, 3), seed=6)
    check_gradients(lambda: tsum(maximum(a, b)), [a, b])


def test_matmul_gradient():
    a = _rand((3, 5), seed=7)
    b = _rand((5, 2), seed=8)
    check_gradients(lambda: tsum(mul(matmul(a, b), matmul(a, b))), [a, b])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(_rand((3,)), _rand((3, 2)))
    with pytest.raises(ShapeError):
        matmul(_rand((2, 3)), _rand((4, 2)))


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_sum_mean_gradients(axis, keepdims):
    x = _rand((2, 3, 4), seed=9)
    check_gradients(lambda: tsum(tsum(x, axis=axis, keepdims=keepdims)), [x])
    check_gradients(lambda: tsum(tmean(x, axis=axis, keepdims=keepdims)), [x])


def test_mean_value():
    x = tensor([[1.0, 2.0], [3.0, 4.0]])
    assert tmean(x).data.item() == 2.5
    np.testing.assert_allclose(tmean(x, axis=0).data, [2.0, 3.0])


def test_reshape_permute_gradients():
    x = _rand((2, 3, 4), seed=10)
    check_gradients(lambda: tsum(mul(reshape(x, (6, 4)), reshape(x, (6, 4)))), [x])
    check_gradients(lambda: tsum(mul(permute(x, (2, 0, 1)), 2.0)), [x])


def test_permute_then_reshape_is_contiguous():
    x = _rand((2, 3, 4), seed=11)
    y = reshape(permute(x, (1, 0, 2)), (3, 8))
    np.testing.assert_array_equal(y.data, x.data.transpose(1, 0, 2).reshape(3, 8))


def test_concat_gradient_and_errors():
    a = _rand((2, 3), seed=12)
    b = _rand((2, 2), seed=13)
    out = concat([a, b], axis=1)
    assert out.shape == (2, 5)
    check_gradients(lambda: tsum(mul(concat([a, b], axis=1), 3.0)), [a, b])
    with pytest.raises(ShapeError):
        concat([_rand((2, 3)), _rand((3, 3))], axis=1)


def test_slice_axis_gradient():
    x = _rand((4, 5), seed=14)
    tsum(slice_axis(x, 1, 1, 4)).backward()
    expect = np.zeros((4, 5))
    expect[:, 1:4] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


def test_take_rows_accumulates_duplicates():
    x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = take_rows(x, [1, 1, 3])
    np.testing.assert_array_equal(out.data, x.data[[1, 1, 3]])
    tsum(out).backward()
    expect = np.zeros((4, 3))
    expect[1] = 2.0
    expect[3] = 1.0
    np.testing.assert_array_equal(x.grad, expect)
    with pytest.raises(IndexError):
        take_rows(x, [4])


def test_mul_broadcast_gate_shapes():
    fmap = _rand((2, 3, 4, 4), seed=15)
    channel_gate = _rand((2, 3, 1, 1), 0.1, 0.9, seed=16)
    spatial_gate = _rand((2, 1, 4, 4), 0.1, 0.9, seed=17)
    check_gradients(lambda: tsum(mul_broadcast(fmap, channel_gate)), [fmap, channel_gate])
    check_gradients(lambda: tsum(mul_broadcast(fmap, spatial_gate)), [fmap, spatial_gate])
    with pytest.raises(ShapeError):
        mul_broadcast(fmap, _rand((2, 3, 4, 1)))


def test_sigmoid_extremes_are_stable():
    x = tensor([-800.0, -40.0, 0.0, 40.0, 800.0])
    with np.errstate(over="raise"):
        y = sigmoid(x)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == 0.0 and y.data[-1] == 1.0
    assert y.data[2] == 0.5


def test_bce_matches_direct_formula_at_moderate_logits():
    rng = np.random.default_rng(18)
    x = rng.uniform(-5.0, 5.0, (50,))
    t = rng.uniform(0.0, 1.0, (50,))
    p = 1.0 / (1.0 + np.exp(-x))
    expect = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    got = bce_with_logits(tensor(x), tensor(t))
    np.testing.assert_allclose(got.data, expect, rtol=1e-12, atol=1e-12)


def test_bce_extreme_logits_stay_finite():
    x = tensor([-1e4, 1e4])
    t = tensor([1.0, 0.0])
    with np.errstate(over="raise"):
        out = bce_with_logits(x, t)
    np.testing.assert_allclose(out.data, [1e4, 1e4])


def test_bce_gradient():
    x = _rand((3, 4), -3.0, 3.0, seed=19)
    t = _rand((3, 4), 0.05, 0.95, seed=20)
    check_gradients(lambda: tsum(bce_with_logits(x, t)), [x, t])


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_with_logits(_rand((2, 3)), _rand((3, 2)))


def test_gradient_accumulates_across_reuse():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = add(mul(x, 2.0), mul(x, 3.0))
    tsum(y).backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_diamond_graph_gradient():
    x = Tensor([1.5, -0.5, 2.0], requires_grad=True)
    a = mul(x, 2.0)
    b = mul(x, 3.0)
    tsum(mul(a, b)).backward()
    np.testing.assert_allclose(x.grad, 12.0 * x.data)


def test_no_grad_suppresses_tape():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, 2.0)
    assert y._grad_fn is None
    with pytest.raises(RuntimeError):
        y.backward()


def test_second_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tsum(mul(x, x))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_reusing_consumed_intermediate_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = mul(x, x)
    tsum(z).backward()
    stale = tsum(z)
    with pytest.raises(RuntimeError):
        stale.backward()


def test_fresh_graph_after_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tsum(mul(x, 2.0)).backward()
    tsum(mul(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_assert_finite_passes_and_raises():
    ok = Tensor([1.0, 2.0])
    assert assert_finite(ok, "ok") is ok
    bad = Tensor([1.0, np.nan, 3.0])
    with pytest.raises(NonFiniteError, match="stage_out"):
        assert_finite(bad, "stage_out")


def test_default_dtype_switch():
    set_default_dtype(np.float32)
    t = Tensor([1.0])
    assert t.data.dtype == np.float32
    set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


def test_gradcheck_catches_wrong_gradient():
    # a deliberately broken op must fail the checker, or the checker is useless
    def broken_square(t):
        out = t.data * t.data

        def grad_fn(g):
            from cbamdet.tensor import _accumulate

            _accumulate(t, g * t.data)  # missing the factor of 2

        from cbamdet.tensor import _record

        return _record(out, (t,), grad_fn)

    x = _rand((3,), seed=21)
    with pytest.raises(GradientMismatch):
        check_gradients(lambda: tsum(broken_square(x)), [x])


def test_operator_sugar():
    a = _rand((2, 2), seed=22)
    b = _rand((2, 2), 0.5, 1.5, seed=23)
    np.testing.assert_allclose((a + b).data, a.data + b.data)
    np.testing.assert_allclose((a - b).data, a.data - b.data)
    np.testing.assert_allclose((a * b).data, a.data * b.data)
    np.testing.assert_allclose((a / b).data, a.data / b.data)
    np.testing.assert_allclose((-a).data, -a.data)
