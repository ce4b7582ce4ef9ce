"""Тесты ленты автодифференцирования и проверки градиентов"""

import numpy as np
import pytest

from src.numerics import autodiff as ops
from src.numerics.autodiff import Tape, Tensor, backward, grad_check, grad_check_parameters
from src.numerics.errors import NotScalarLoss, ShapeMismatch, TapeReused
from src.training.objective import relative_l2_loss


class TestPrimitives:

    def test_matmul_identity(self, rng):
        x0 = rng.standard_normal((3, 4))
        with Tape():
            x = Tensor(x0, grad_required=True)
            y = ops.matmul(np.eye(3), x)
            backward(ops.sum(y))
        np.testing.assert_array_equal(y.data, x0)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_grad(self):
        with Tape():
            x = Tensor(3.0, grad_required=True)
            backward(ops.sum(ops.square(x)))
        assert float(x.grad) == 6.0

    def test_layer_norm_constant_row(self):
        with Tape():
            x = Tensor(np.full((2, 5), 7.0), grad_required=True)
            y = ops.layer_norm(x)
            backward(ops.sum(y * np.arange(5.0)))
        np.testing.assert_array_equal(y.data, np.zeros((2, 5)))
        assert np.all(np.isfinite(x.grad))

    def test_sqrt_grad_at_zero(self):
        with Tape():
            x = Tensor(np.array([0.0, 4.0]), grad_required=True)
            backward(ops.sum(ops.sqrt(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.25])

    def test_relative_l2_grad_at_exact_fit(self, rng):
        target = rng.standard_normal((2, 6, 1))
        with Tape():
            pred = Tensor(target.copy(), grad_required=True)
            loss = relative_l2_loss(pred, target)
            backward(loss)
        assert float(loss.data) == 0.0
        np.testing.assert_array_equal(pred.grad, np.zeros_like(target))

    def test_broadcast_grad_reduced(self, rng):
        with Tape():
            b = Tensor(np.zeros(4), grad_required=True)
            backward(ops.sum(rng.standard_normal((3, 4)) + b))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ops.add(np.ones((2, 3)), np.ones(4))
        with pytest.raises(ShapeMismatch):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_no_tape_no_record(self):
        y = ops.square(Tensor(2.0, grad_required=True))
        assert y.tape is None
        assert float(y.data) == 4.0

    def test_concat_slice(self, rng):
        a0, b0 = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        with Tape():
            a = Tensor(a0, grad_required=True)
            b = Tensor(b0, grad_required=True)
            c = ops.concat([a, b], axis=-1)
            backward(ops.sum(c[:, 1:4]))
        np.testing.assert_array_equal(a.grad, [[0, 1, 1], [0, 1, 1]])
        np.testing.assert_array_equal(b.grad, [[1, 0], [1, 0]])


class TestBackward:

    def test_linear_loss(self, rng):
        x = rng.standard_normal(5)
        with Tape():
            w = Tensor(rng.standard_normal(5), grad_required=True)
            grads = backward(ops.sum(w * x))
        np.testing.assert_allclose(grads[w], x)

    def test_squared_norm(self, rng):
        w0 = rng.standard_normal(6)
        with Tape():
            w = Tensor(w0, grad_required=True)
            backward(ops.sum(ops.square(w)))
        np.testing.assert_allclose(w.grad, 2 * w0)

    def test_shared_subexpression_accumulates(self):
        with Tape():
            x = Tensor(2.0, grad_required=True)
            y = x * x
            backward(y + y)
        assert float(x.grad) == 8.0

    def test_non_scalar(self):
        with Tape():
            x = Tensor(np.ones(3), grad_required=True)
            with pytest.raises(NotScalarLoss):
                backward(x * 2.0)

    def test_tape_reused(self):
        with Tape():
            x = Tensor(1.0, grad_required=True)
            loss = ops.square(x)
            backward(loss)
            with pytest.raises(TapeReused):
                backward(loss)


class TestGradCheck:

    def test_constant_function(self, rng):
        assert grad_check(lambda x: ops.sum(ops.scale(x, 0.0)) + 5.0, rng.standard_normal(4)) == 0.0

    def test_quadratic(self, rng):
        assert grad_check(lambda x: ops.sum(ops.square(x)), rng.standard_normal((3, 3))) < 1e-6

    def test_two_layer_composition(self, rng):
        w1 = rng.standard_normal((4, 6))
        w2 = rng.standard_normal((6, 2))
        f = lambda x: ops.sum(ops.square(ops.matmul(ops.tanh(ops.matmul(x, w1)), w2)))
        assert grad_check(f, rng.standard_normal((3, 4))) < 1e-6

    def test_cholesky(self, rng):
        weights = rng.standard_normal((3, 3))
        f = lambda x: ops.sum(ops.cholesky(ops.matmul(x, ops.transpose(x)) + np.eye(3)) * weights)
        assert grad_check(f, rng.standard_normal((3, 4))) < 1e-5

    def test_solve_lower_t_both_inputs(self, rng):
        y0 = rng.standard_normal((5, 3))
        weights = rng.standard_normal((5, 3))
        mask = np.tril(np.ones((3, 3)))
        f_l = lambda l: ops.sum(ops.solve_lower_t(y0, l * mask + 3.0 * np.eye(3)) * weights)
        assert grad_check(f_l, rng.standard_normal((3, 3))) < 1e-5
        lower = np.tril(rng.standard_normal((3, 3)), -1) + 2.0 * np.eye(3)
        f_x = lambda x: ops.sum(ops.solve_lower_t(x, lower) * weights)
        assert grad_check(f_x, y0) < 1e-6

    @pytest.mark.parametrize('op', [ops.gelu, ops.elu, ops.tanh, ops.exp, ops.layer_norm])
    def test_elementwise(self, op, rng):
        weights = rng.standard_normal((2, 5))
        assert grad_check(lambda x: ops.sum(op(x) * weights), rng.standard_normal((2, 5))) < 1e-5

    def test_parameters(self, rng):
        w = Tensor(rng.standard_normal((4, 3)), grad_required=True)
        b = Tensor(rng.standard_normal(3), grad_required=True)
        x = rng.standard_normal((5, 4))
        loss_fn = lambda: ops.sum(ops.gelu(ops.matmul(x, w) + b))
        assert grad_check_parameters(loss_fn, {'w': w, 'b': b}) < 1e-5

    def test_eps_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: ops.sum(x), np.ones(2), eps=1e-2)
