import logging
import math

import numpy as np
import pytest

from evroad.core.errors import NumericError, PreconditionError, ShapeError
from evroad.core.logger import TapeTraceFilter
from evroad.services import tensor as T
from evroad.services.tensor import Tape, Tensor, grad_check


class TestForwardValues:
    def test_softmax_uniform(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = T.softmax_rows(Tensor(rng.normal(scale=10.0, size=(20, 7)))).data
        assert np.all(out >= 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_l2_normalize(self):
        np.testing.assert_allclose(T.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])

    def test_l2_normalize_zero_row(self):
        np.testing.assert_array_equal(T.l2_normalize_rows(Tensor(np.zeros((1, 3)))).data, 0.0)

    def test_gelu_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_layer_norm_moments(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
        out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_logsumexp_large_values(self):
        out = T.logsumexp_rows(Tensor([[1000.0, 1000.0]])).data
        assert out[0] == pytest.approx(1000.0 + math.log(2.0))

    def test_deterministic(self):
        x = np.random.default_rng(2).normal(size=(5, 5))
        a = T.gelu(T.matmul(Tensor(x), Tensor(x))).data
        b = T.gelu(T.matmul(Tensor(x), Tensor(x))).data
        np.testing.assert_array_equal(a, b)


class TestShapeRules:
    def test_add_bias_row_only(self):
        assert T.add(Tensor(np.zeros((3, 2))), Tensor(np.ones(2))).shape == (3, 2)
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((3, 2))), Tensor(np.ones(3)))

    def test_mul_requires_same_shape(self):
        with pytest.raises(ShapeError):
            T.mul(Tensor(np.zeros((3, 2))), Tensor(np.ones(2)))

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))))

    def test_non_finite_output(self):
        with pytest.raises(NumericError):
            T.log(Tensor([0.0]))

    def test_shape_ops_pass_infinite_raw_values(self):
        raw = Tensor([[-np.inf, 0.0], [1.0, -np.inf]])
        row = T.reshape(T.slice_axis(raw, 1, 2, axis=0), (2,))
        np.testing.assert_array_equal(row.data, [1.0, -np.inf])
        np.testing.assert_allclose(T.softplus(row).data, [math.log1p(math.e), 0.0])
        with pytest.raises(NumericError):
            T.exp(T.neg(row))


class TestTape:
    def test_no_recording_without_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.square(x)
        assert not y.requires_grad

    def test_shared_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(x, x))
        np.testing.assert_allclose(tape.gradient(loss, {"x": x})["x"], [6.0])

    def test_backward_trace_is_filtered(self, caplog):
        x = Tensor([3.0], requires_grad=True)
        with caplog.at_level(logging.DEBUG, logger="evroad.services.tensor"):
            with Tape() as tape:
                loss = T.sum(T.square(x))
            tape.gradient(loss, {"x": x})
        traces = [r for r in caplog.records if r.name == "evroad.services.tensor"]
        assert traces
        assert not any(TapeTraceFilter().filter(r) for r in traces)
        other = logging.LogRecord("evroad", logging.INFO, __file__, 1, "Parsed 3 events", None, None)
        assert TapeTraceFilter().filter(other)

    def test_unused_leaf_gets_zero(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.exp(x))
        np.testing.assert_array_equal(tape.gradient(loss, {"u": unused})["u"], 0.0)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.square(x)
        with pytest.raises(ShapeError):
            tape.gradient(y, {"x": x})


class TestGradCheck:
    def test_quadratic_is_exact(self):
        report = grad_check(lambda p: T.sum(T.square(p["theta"])), {"theta": np.array([3.0])})
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_constant_function(self):
        x = np.array([1.0, 2.0])
        report = grad_check(lambda p: T.sum(Tensor(np.ones(3))), {"x": x})
        assert report.passed
        assert report.max_abs_error == 0.0

    def test_rejects_non_positive_eps(self):
        with pytest.raises(PreconditionError):
            grad_check(lambda p: T.sum(p["x"]), {"x": np.ones(2)}, eps=0.0)

    @pytest.mark.parametrize("shape", [(2, 3, 4), (1, 5, 1), (4, 4, 2)])
    def test_matmul_backward(self, shape):
        m, k, n = shape
        rng = np.random.default_rng(sum(shape))
        params = {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))}
        target = rng.normal(size=(m, n))
        f = lambda p: T.sum(T.square(T.sub(T.matmul(p["a"], p["b"]), Tensor(target))))
        assert grad_check(f, params).passed

    def test_every_op_backward(self):
        rng = np.random.default_rng(7)
        params = {
            "x": rng.normal(size=(3, 4)),
            "g": rng.uniform(0.5, 1.5, size=4),
            "b": rng.normal(size=4),
            "s": rng.normal(size=(3,)),
        }

        def f(p):
            h = T.layer_norm(p["x"], p["g"], p["b"])
            h = T.gelu(h)
            h = T.add(h, T.relu(T.scale(p["x"], 0.5)))
            h = T.l2_normalize_rows(h)
            h = T.softmax_rows(T.shift(h, 0.1))
            h = T.concat([h, T.log_softmax(p["x"])], axis=1)
            h = T.slice_axis(h, 1, 6, axis=1)
            col = T.broadcast_cols(T.logsumexp_rows(h), 4)
            h = T.mul(T.transpose(T.broadcast_rows(p["b"], 3)), T.transpose(col))
            h = T.add(T.reshape(h, (3, 4)), T.broadcast_cols(T.softplus(p["s"]), 4))
            z = T.mul(T.exp(T.scale(h, 0.1)), T.broadcast_scalar(T.sum(T.square(p["g"])), (3, 4)))
            return T.mean(T.log(T.shift(T.square(z), 1.0)))

        report = grad_check(f, params)
        assert report.passed, report
