import numpy as np
import pytest

from nmsparse import tensor as T
from nmsparse.tensor import GraphError, Tensor, backward, grad_check, no_grad


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def leaf(*shape, seed=0):
    return Tensor(rand(*shape, seed=seed), requires_grad=True)


def test_matmul_grad_matches_closed_form():
    a, b = leaf(3, 4, seed=1), leaf(4, 5, seed=2)
    out = T.tensor_sum(T.matmul(a, b))
    backward(out)
    ones = np.ones((3, 5))
    np.testing.assert_allclose(a.grad, ones @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ ones)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\)"):
        T.matmul(leaf(3, 4), leaf(5, 2))


def test_batched_matmul_grad():
    b = leaf(2, 5, 3, seed=4)
    a = Tensor(rand(2, 4, 5, seed=3))
    assert grad_check(lambda x: T.tensor_sum(T.mul(T.matmul(a, x), T.matmul(a, x))), b) < 1e-6


@pytest.mark.parametrize(
    "f",
    [
        lambda x: T.tensor_sum(T.relu(x)),
        lambda x: T.tensor_sum(T.mul(T.layer_norm(x, Tensor(np.full(6, 1.3)), Tensor(np.full(6, 0.2))), Tensor(rand(4, 6, seed=9)))),
        lambda x: T.tensor_sum(T.mul(T.softmax(x), Tensor(rand(4, 6, seed=8)))),
        lambda x: T.tensor_sum(T.mul(T.transpose(T.reshape(x, (2, 2, 6)), (0, 2, 1)), Tensor(rand(2, 6, 2, seed=7)))),
        lambda x: T.tensor_sum(T.scale(T.add(x, Tensor(rand(6, seed=6))), -2.5)),
        lambda x: T.cross_entropy(x, np.array([1, 0, 3, 5])),
    ],
    ids=["relu", "layer_norm", "softmax", "reshape_transpose", "bias_scale", "cross_entropy"],
)
def test_op_gradients_against_finite_differences(f):
    x = leaf(4, 6, seed=5)
    x.data += 0.01  # keep relu kinks away from the probe points
    assert grad_check(f, x) < 1e-7


def test_layer_norm_param_grads():
    x = Tensor(rand(3, 8, seed=1))
    g = leaf(8, seed=2)
    w = Tensor(rand(3, 8, seed=3))
    assert grad_check(lambda p: T.tensor_sum(T.mul(T.layer_norm(x, p, Tensor(np.zeros(8))), w)), g) < 1e-7


def test_masked_softmax_zeroes_disallowed_and_grads_finite():
    allowed = np.tril(np.ones((4, 4), dtype=bool))
    x = leaf(4, 4)
    p = T.softmax(x, mask=allowed)
    assert np.all(p.data[~allowed] == 0)
    np.testing.assert_allclose(p.data.sum(-1), 1.0)
    w = Tensor(rand(4, 4, seed=2))
    assert grad_check(lambda t: T.tensor_sum(T.mul(T.softmax(t, mask=allowed), w)), x) < 1e-7


def test_embedding_lookup_accumulates_repeated_ids():
    table = leaf(5, 3)
    out = T.embedding_lookup(table, np.array([[1, 1, 4]]))
    backward(T.tensor_sum(out))
    expected = np.zeros((5, 3))
    expected[1] = 2
    expected[4] = 1
    np.testing.assert_array_equal(table.grad, expected)


def test_cross_entropy_ignores_padding():
    logits = rand(3, 5)
    full = T.cross_entropy(Tensor(logits[:2]), np.array([2, 3]))
    padded = T.cross_entropy(Tensor(logits), np.array([2, 3, 0]))
    assert float(full.data) == pytest.approx(float(padded.data))
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(logits), np.zeros(3, dtype=int))


def test_cross_entropy_extreme_logits_stay_finite():
    logits = leaf(2, 3)
    logits.data[:] = [[1e4, -1e4, 0.0], [-1e4, 1e4, 0.0]]
    loss = T.cross_entropy(logits, np.array([1, 2]))
    backward(loss)
    assert np.isfinite(loss.data).all() and np.isfinite(logits.grad).all()


def test_leaf_grads_accumulate_across_backward_calls():
    x = leaf(3)
    for _ in range(2):
        backward(T.tensor_sum(T.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))


def test_shared_subexpression_gradient():
    x = leaf(4)
    y = T.mul(x, x)
    backward(T.tensor_sum(T.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_double_backward_raises():
    x = leaf(3)
    loss = T.tensor_sum(T.mul(x, x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(GraphError):
        backward(T.scale(leaf(3), 2.0))


def test_no_grad_builds_no_graph():
    x = leaf(3)
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


def test_grad_check_rejects_non_scalar():
    with pytest.raises(GraphError):
        grad_check(lambda t: T.scale(t, 2.0), leaf(3))


def test_check_finite():
    T.check_finite(Tensor(np.ones(2)))
    with pytest.raises(T.NonFiniteError):
        T.check_finite(Tensor(np.array([1.0, np.nan])))
