"""Tensor and autodiff primitives against hand values and FD oracles."""

import numpy as np
import pytest
import scipy.special

import est.core as core
from est.core import (
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mul,
    scale,
    softmax_rows,
    take_columns,
    tensor_sum,
    transpose,
)
from est.errors import NumericalError, ShapeError, TapeError

from helpers import fd_gradient, random_tensor, rel_err


def grad_check(build_loss, tensors, tol, n_samples=6, seed=0):
    """Autodiff vs Richardson central differences on sampled elements."""
    with Tape():
        loss = build_loss()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        for _ in range(n_samples):
            i = int(rng.integers(t.data.size))
            fd = fd_gradient(lambda: float(build_loss().data), t.data, i)
            ad = float(t.grad.reshape(-1)[i]) if t.grad is not None else 0.0
            worst = max(worst, rel_err(fd, ad))
    assert worst <= tol, f"max relative gradient error {worst:.3e} > {tol:g}"


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = matmul(eye, eye)
        np.testing.assert_array_equal(out.data, np.eye(2, dtype=out.data.dtype))

    def test_hand_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_allclose(matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(a, b)

    def test_gradient_fp64(self):
        core.set_dtype("float64")
        a = random_tensor((3, 4), seed=1)
        b = random_tensor((4, 2), seed=2)
        grad_check(lambda: tensor_sum(mul(matmul(a, b), matmul(a, b))), [a, b], tol=1e-7)

    def test_gradient_fp32(self):
        a32 = random_tensor((3, 4), seed=1)
        b32 = random_tensor((4, 2), seed=2)
        with Tape():
            loss = tensor_sum(mul(matmul(a32, b32), matmul(a32, b32)))
        backward(loss)
        core.set_dtype("float64")
        a = Tensor(a32.data, requires_grad=True)
        b = Tensor(b32.data, requires_grad=True)

        def loss64():
            return float(tensor_sum(mul(matmul(a, b), matmul(a, b))).data)

        rng = np.random.default_rng(0)
        for t32, t in ((a32, a), (b32, b)):
            for _ in range(4):
                i = int(rng.integers(t.data.size))
                fd = fd_gradient(loss64, t.data, i)
                assert rel_err(fd, float(t32.grad.reshape(-1)[i])) <= 1e-4

    def test_batched_against_loop(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        out = matmul(a, b)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], a.data[i] @ b.data, rtol=1e-6)

    def test_batched_gradients(self):
        core.set_dtype("float64")
        a = random_tensor((2, 3, 4), seed=4)
        b = random_tensor((4, 3), seed=5)
        c = random_tensor((2, 3, 3), seed=6)
        grad_check(lambda: tensor_sum(mul(matmul(a, b), c)), [a, b, c], tol=1e-7)


class TestSoftmax:
    def test_symmetric_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_no_overflow_on_large_logits(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one(self):
        x = random_tensor((4, 4), seed=7)
        out = softmax_rows(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)

    def test_nan_input_rejected(self):
        x = Tensor([[0.0, np.nan]])
        with pytest.raises(NumericalError):
            softmax_rows(x)

    def test_gradient(self):
        core.set_dtype("float64")
        x = random_tensor((3, 5), seed=8)
        w = random_tensor((3, 5), seed=9, requires_grad=False)
        grad_check(lambda: tensor_sum(mul(softmax_rows(x), w)), [x], tol=1e-7)


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        g = Tensor(np.ones(4), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), g, b)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-6)

    def test_already_normalized_row(self):
        g = Tensor(np.ones(2))
        b = Tensor(np.zeros(2))
        out = layer_norm(Tensor([[1.0, -1.0]]), g, b)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_gradient(self):
        core.set_dtype("float64")
        x = random_tensor((3, 6), seed=10)
        g = random_tensor((6,), seed=11, scale=0.5)
        g.data += 1.0
        b = random_tensor((6,), seed=12, scale=0.5)
        w = random_tensor((3, 6), seed=13, requires_grad=False)
        grad_check(lambda: tensor_sum(mul(layer_norm(x, g, b), w)), [x, g, b], tol=1e-6)


class TestGelu:
    def test_zero(self):
        assert float(gelu(Tensor([0.0])).data[0]) == 0.0

    def test_large_positive_asymptote(self):
        assert abs(float(gelu(Tensor([10.0])).data[0]) - 10.0) <= 1e-6

    def test_matches_erf_form_closely(self):
        x = np.linspace(-4, 4, 101)
        out = gelu(Tensor(x, dtype=np.float64)).data
        exact = 0.5 * x * (1.0 + scipy.special.erf(x / np.sqrt(2.0)))
        np.testing.assert_allclose(out, exact, atol=1e-3)

    def test_gradient(self):
        core.set_dtype("float64")
        x = random_tensor((4, 5), seed=14)
        w = random_tensor((4, 5), seed=15, requires_grad=False)
        grad_check(lambda: tensor_sum(mul(gelu(x), w)), [x], tol=1e-7)


class TestEmbeddingAndCrossEntropy:
    def test_lookup_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = embedding_lookup(table, [2, 0])
        np.testing.assert_array_equal(out.data, table.data[[2, 0]])

    def test_lookup_out_of_range_reports_position(self):
        table = Tensor(np.zeros((4, 3)))
        with pytest.raises(IndexError, match="position 1"):
            embedding_lookup(table, [0, 7])

    def test_lookup_gradient_accumulates_duplicates(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True)
        with Tape():
            loss = tensor_sum(embedding_lookup(table, [1, 1, 2]))
        backward(loss)
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])

    def test_uniform_logits_loss_is_log_v(self):
        logits = Tensor(np.zeros((4, 7)))
        loss = cross_entropy(logits, [0, 1, 2, 3])
        assert abs(float(loss.data) - np.log(7)) <= 1e-6

    def test_confident_logits_loss_near_zero(self):
        logits = np.full((3, 5), -50.0)
        logits[np.arange(3), [1, 2, 3]] = 50.0
        assert float(cross_entropy(Tensor(logits), [1, 2, 3]).data) <= 1e-6

    def test_against_scipy_log_softmax(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(size=(3, 5))
        targets = [4, 0, 2]
        expected = -scipy.special.log_softmax(logits, axis=-1)[np.arange(3), targets].mean()
        got = float(cross_entropy(Tensor(logits, dtype=np.float64), targets).data)
        assert abs(got - expected) <= 1e-6

    def test_target_out_of_range_reports_position(self):
        with pytest.raises(IndexError, match="position 2"):
            cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 9])

    def test_gradient(self):
        core.set_dtype("float64")
        logits = random_tensor((4, 6), seed=17)
        grad_check(lambda: cross_entropy(logits, [1, 5, 0, 3]), [logits], tol=1e-7)


class TestTakeColumnsAndTranspose:
    def test_take_columns_values(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        out = take_columns(x, [0, 3])
        np.testing.assert_array_equal(out.data, x.data[:, [0, 3]])

    def test_take_columns_gradient_scatters(self):
        x = Tensor(np.zeros((2, 4)), requires_grad=True)
        with Tape():
            loss = tensor_sum(take_columns(x, [1, 2]))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [[0, 1, 1, 0], [0, 1, 1, 0]])

    def test_transpose_gradient(self):
        core.set_dtype("float64")
        x = random_tensor((3, 4), seed=18)
        w = random_tensor((4, 3), seed=19, requires_grad=False)
        grad_check(lambda: tensor_sum(mul(transpose(x), w)), [x], tol=1e-7)


class TestTapeSemantics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            loss = tensor_sum(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=x.data.dtype))

    def test_quadratic_gradient(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        col = Tensor(x.data.reshape(3, 1), requires_grad=False)
        with Tape():
            loss = tensor_sum(mul(x, x))
        backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-6)
        assert col.grad is None

    def test_backward_twice_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(x)
        backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            backward(loss)

    def test_backward_without_tape_raises(self):
        x = Tensor([1.0], requires_grad=True)
        loss = tensor_sum(x)  # not recording
        with pytest.raises(TapeError):
            backward(loss)

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = add(x, x)
        assert out.requires_grad is False and out._tape is None

    def test_gradient_accumulates_across_uses(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(add(mul(x, x), x))  # x^2 + x
        backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_determinism_bitwise(self):
        def run():
            x = Tensor(np.linspace(-1, 1, 24).reshape(4, 6), requires_grad=True)
            w = Tensor(np.linspace(0.5, 1.5, 36).reshape(6, 6), requires_grad=True)
            with Tape():
                loss = cross_entropy(matmul(gelu(matmul(x, w)), transpose(w)), [0, 1, 2, 3])
            backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first = run()
        second = run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestBroadcastingGradients:
    def test_add_broadcast_reduces_grad(self):
        core.set_dtype("float64")
        x = random_tensor((2, 3, 4), seed=20)
        b = random_tensor((3, 4), seed=21)
        w = random_tensor((2, 3, 4), seed=22, requires_grad=False)
        grad_check(lambda: tensor_sum(mul(add(x, b), w)), [x, b], tol=1e-7)

    def test_scale_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(scale(x, 2.5))
        backward(loss)
        np.testing.assert_allclose(x.grad, [2.5, 2.5])
