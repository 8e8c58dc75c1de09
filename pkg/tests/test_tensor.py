import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saliency_nas import ops
from saliency_nas.tensor import (ShapeError, Tensor, backward, dtype_for, exp, log, no_grad, sqrt,
                                 where_mask)

from _oracles import central_difference, rel_error


def leaf(a, dtype=np.float64):
    return Tensor(np.array(a, dtype=dtype), requires_grad=True)


def grad_check(build, *arrays, h=1e-5, tol=1e-4):
    """Compare backward() against central differences for every input."""
    leaves = [leaf(a) for a in arrays]
    out = build(*leaves)
    backward(out)
    for t in leaves:
        def f(t=t):
            with no_grad():
                return float(build(*leaves).data)
        num = central_difference(f, t.data, h)
        assert rel_error(t.grad, num) < tol


class TestTensorBasics:
    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24 == int(np.prod(t.shape))
        assert t.ndim == 3

    def test_precisions(self):
        assert dtype_for("high") == np.float64
        assert dtype_for("standard") == np.float32
        with pytest.raises(ValueError):
            dtype_for("half")

    def test_sum_grad_is_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sigmoid_grad_at_zero(self):
        x = leaf(0.0)
        backward(ops.sigmoid(x))
        assert x.grad == pytest.approx(0.25, abs=1e-15)

    def test_backward_non_scalar_raises(self):
        x = leaf(np.ones(3))
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_backward_without_grad_raises(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.ones(1)).sum())

    def test_fan_out_accumulates(self):
        x = leaf(3.0)
        y = x * x + x * 2.0 + x
        backward(y)
        assert x.grad == pytest.approx(2 * 3.0 + 3.0)

    def test_grads_accumulate_across_backward_calls(self):
        x = leaf(np.ones(4))
        backward((x * 2.0).sum())
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, np.full(4, 5.0))

    def test_no_grad_records_nothing(self):
        x = leaf(np.ones(3))
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_traversal_is_reverse_recording_order(self):
        x = leaf(np.linspace(0.1, 1.0, 5))
        a = x * 2.0
        b = exp(a)
        c = a + b
        d = log(c + 1.0)
        loss = d.sum()
        visited = backward(loss)
        seqs = [n.seq for n in visited]
        assert seqs == sorted(seqs, reverse=True)
        assert len(visited) >= 5

    def test_constant_takes_tensor_dtype(self):
        x = Tensor(np.ones(3, np.float32), requires_grad=True)
        assert (x * 0.5 + 1).dtype == np.float32


class TestPrimitiveGradients:
    def test_binary_ops(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))
        grad_check(lambda x, y: (x * y + x / y - y).sum(), a, b)

    def test_power_exp_log_sqrt(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0.5, 2.0, size=7)
        grad_check(lambda x: (x ** 3 + exp(x) + log(x) + sqrt(x)).sum(), a)

    def test_reductions_and_reshape(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 3, 4))
        grad_check(lambda x: (x.mean(axis=1, keepdims=True) * x.sum(axis=(0, 2))[None, :, None]
                              ).reshape(-1).sum(), a)

    def test_getitem(self):
        a = np.random.default_rng(3).normal(size=(4, 5))
        grad_check(lambda x: (x[1:3, ::2] * x[1:3, ::2]).sum(), a)

    def test_where_mask(self):
        a = np.random.default_rng(4).normal(size=6)
        mask = a > 0
        grad_check(lambda x: (where_mask(mask, x, 1.0) ** 2).sum(), a)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([((3, 1), (1, 4)), ((2, 3), (3,)), ((1,), (2, 2)), ((2, 1, 3), (4, 1))]),
           st.integers(0, 10_000))
    def test_broadcasting_gradients(self, shapes, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=shapes[0]), rng.normal(size=shapes[1])
        grad_check(lambda x, y: (x * y + x - y).sum(), a, b)

    def test_forward_is_pure(self):
        a = np.random.default_rng(5).normal(size=(2, 3))
        r1 = (exp(Tensor(a)) * 2.0).data
        r2 = (exp(Tensor(a)) * 2.0).data
        assert r1.tobytes() == r2.tobytes()
