import numpy as np
import pytest

from scenegraph_ise.autograd import (
    ShapeError,
    Tensor,
    add,
    attention_weights,
    backward,
    clamp_min,
    concat,
    dropout,
    embedding,
    grad_check,
    index,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    sub,
    tmax,
    transpose,
    tsum,
)

TOL = 1e-4
SHAPES = [(1, 1), (2, 3), (3, 2), (4, 5), (5, 4)]


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted(out: Tensor, rng) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    return tsum(mul(out, rng.normal(size=out.shape)))


@pytest.mark.parametrize("shape", SHAPES)
class TestPrimitiveGradients:
    def test_arithmetic(self, shape):
        rng = np.random.default_rng(0)
        a, b = param(rng, *shape), param(rng, *shape)
        row = param(rng, shape[-1])
        w = rng.normal(size=shape)
        fn = lambda: tsum(mul(add(mul(a, b), row), w)) + tsum(sub(a, row))  # noqa: E731
        assert grad_check(fn, [a, b, row]) < TOL

    def test_matmul_linear(self, shape):
        rng = np.random.default_rng(1)
        x, w, b = param(rng, *shape), param(rng, shape[1], 3), param(rng, 3)
        v = param(rng, 3, 2)
        assert grad_check(lambda: weighted(matmul(linear(x, w, b), v), np.random.default_rng(9)), [x, w, b, v]) < TOL

    def test_batched_matmul(self, shape):
        rng = np.random.default_rng(2)
        a, b = param(rng, 2, *shape), param(rng, 2, shape[1], 2)
        assert grad_check(lambda: weighted(matmul(a, b), np.random.default_rng(3)), [a, b]) < TOL

    def test_softmax_masked(self, shape):
        rng = np.random.default_rng(3)
        x = param(rng, *shape)
        mask = np.zeros(shape)
        if shape[1] > 1:
            mask[:, 0] = -np.inf
        assert grad_check(lambda: weighted(softmax(x, mask=mask), np.random.default_rng(4)), [x]) < TOL

    def test_attention_weights(self, shape):
        rng = np.random.default_rng(4)
        q, k = param(rng, *shape), param(rng, shape[0] + 1, shape[1])
        assert grad_check(lambda: weighted(attention_weights(q, k), np.random.default_rng(5)), [q, k]) < TOL

    def test_layer_norm(self, shape):
        shape = (shape[0], max(shape[1], 2))  # one feature normalizes to a constant row
        rng = np.random.default_rng(5)
        x, g, b = param(rng, *shape), param(rng, shape[1]), param(rng, shape[1])
        assert grad_check(lambda: weighted(layer_norm(x, g, b), np.random.default_rng(6)), [x, g, b]) < TOL

    def test_log_relu_clamp(self, shape):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)
        y = param(rng, *shape)
        y.data[np.abs(y.data) < 0.1] = 0.5  # keep away from the relu kink
        fn = lambda: weighted(add(log(clamp_min(x, 1e-12)), relu(y)), np.random.default_rng(7))  # noqa: E731
        assert grad_check(fn, [x, y]) < TOL

    def test_structural(self, shape):
        rng = np.random.default_rng(7)
        x, y = param(rng, *shape), param(rng, *shape)

        def fn():
            z = concat([x, y], axis=0)
            z = transpose(reshape(z, (shape[1], 2 * shape[0])))
            return add(weighted(index(z, slice(0, 1)), np.random.default_rng(8)), tsum(mean(z, axis=0)))

        assert grad_check(fn, [x, y]) < TOL

    def test_max_and_embedding(self, shape):
        rng = np.random.default_rng(8)
        table = param(rng, 6, shape[1])
        rows = [0, 3, 3, 5][: max(1, shape[0])]
        fn = lambda: weighted(tmax(embedding(table, rows), 0), np.random.default_rng(9))  # noqa: E731
        assert grad_check(fn, [table]) < TOL


class TestSemantics:
    def test_masked_entries_get_zero_weight(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[0.0, -np.inf, 0.0], [0.0, 0.0, 0.0]])
        y = softmax(x, mask=mask).data
        assert y[0, 1] == 0.0 and y[0, 0] == pytest.approx(0.5)
        assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_layer_norm_constant_row(self):
        x = Tensor(np.full((1, 4), 3.0))
        g = Tensor(np.full(4, 2.0))
        b = Tensor(np.arange(4.0))
        assert np.array_equal(layer_norm(x, g, b).data, b.data[None, :])

    def test_layer_norm_statistics(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 8)) * 5 + 2)
        y = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_backward_rejects_vector(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(mul(x, 2.0))

    def test_gradients_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(tsum(mul(x, x)))
        backward(tsum(mul(x, 3.0)))
        assert np.allclose(x.grad, [2.0 + 3.0, 4.0 + 3.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = tsum(mul(x, x))
        assert not y.requires_grad

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_dropout_off_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert dropout(x, 0.5, None, train=False) is x

    def test_dropout_scaling(self):
        x = Tensor(np.ones((200, 50)))
        y = dropout(x, 0.2, np.random.default_rng(0), train=True).data
        kept = y[y > 0]
        assert np.allclose(kept, 1.25)
        assert abs((y == 0).mean() - 0.2) < 0.02

    def test_float64_everywhere(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        assert x.data.dtype == np.float64
