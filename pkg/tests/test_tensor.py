import math

import numpy as np
import pytest

from quantmark import tensor as T
from quantmark.tensor import Tensor

from gradcheck import (
    REL_TOL,
    numeric_grad,
    ref_causal_softmax,
    ref_cross_entropy,
    ref_gelu,
    ref_layer_norm,
    rel_error,
)


def leaf(a):
    return Tensor(np.asarray(a, np.float32), requires_grad=True)


# examples -----------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_scalar_matrices():
    assert T.matmul(Tensor([[2]]), Tensor([[3]])).data[0, 0] == 6


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_random_grad_matches_fd():
    rng = np.random.default_rng(0)
    a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    r = rng.standard_normal((3, 2))
    a, b = leaf(a0), leaf(b0)
    T.sum(T.matmul(a, b) * r).backward()
    assert rel_error(a.grad, numeric_grad(lambda x: float(((x @ b0) * r).sum()), a0)) < 1e-4
    assert rel_error(b.grad, numeric_grad(lambda x: float(((a0 @ x) * r).sum()), b0)) < 1e-4


def test_cross_entropy_uniform():
    loss = T.softmax_cross_entropy(Tensor(np.zeros(4)), 2)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_saturated():
    loss = T.softmax_cross_entropy(Tensor([1000.0, 0, 0, 0]), 0)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros(4)), 4)


def test_cross_entropy_grad_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    z = rng.standard_normal(7)
    x = leaf(z)
    T.softmax_cross_entropy(x, 3).backward()
    p = np.exp(z - z.max())
    p /= p.sum()
    onehot = np.eye(7)[3]
    np.testing.assert_allclose(x.grad, p - onehot, atol=1e-6)
    fd = numeric_grad(lambda v: ref_cross_entropy(v[None], [3]), z)
    assert rel_error(x.grad, fd) < REL_TOL


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = leaf([3.0])
    T.sum(x * x).backward()
    assert x.grad[0] == 6.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        T.backward(leaf(np.ones(3)) * 2.0)


def test_backward_populates_all_reachable_nodes():
    x = leaf(np.ones((2, 2)))
    y = x * 2.0
    z = T.gelu(y)
    loss = T.sum(z)
    loss.backward()
    for node in (x, y, z, loss):
        assert node.grad is not None and node.grad.shape == node.shape


def test_shared_node_accumulates():
    x = leaf([2.0])
    y = x * x
    T.sum(y + y).backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_two_layer_mlp_matches_fd():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((5, 4))
    W1, b1 = rng.standard_normal((4, 6)) * 0.5, rng.standard_normal(6) * 0.1
    W2 = rng.standard_normal((6, 3)) * 0.5
    tgt = rng.integers(0, 3, 5)

    def ref(w1=W1, bb=b1, w2=W2):
        return ref_cross_entropy(ref_gelu(X @ w1 + bb) @ w2, tgt)

    w1, bb, w2 = leaf(W1), leaf(b1), leaf(W2)
    loss = T.cross_entropy(T.matmul(T.gelu(T.matmul(Tensor(X), w1) + bb), w2), tgt)
    assert loss.item() == pytest.approx(ref(), rel=1e-5)
    loss.backward()
    assert rel_error(w1.grad, numeric_grad(lambda v: ref(w1=v), W1)) < 1e-4
    assert rel_error(bb.grad, numeric_grad(lambda v: ref(bb=v), b1)) < 1e-4
    assert rel_error(w2.grad, numeric_grad(lambda v: ref(w2=v), W2)) < 1e-4


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(leaf(np.ones((3, 2))), [3])


def test_embedding_repeated_ids_accumulate():
    w = leaf(np.zeros((4, 2)))
    T.sum(T.embedding(w, [1, 1, 3])).backward()
    np.testing.assert_array_equal(w.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_causal_softmax_masks_future():
    p = T.causal_softmax(Tensor(np.random.default_rng(0).standard_normal((3, 3)))).data
    assert np.all(np.triu(p, 1) == 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-6)


def test_layer_norm_forward_matches_reference():
    rng = np.random.default_rng(3)
    x, g, b = rng.standard_normal((2, 5)), rng.standard_normal(5), rng.standard_normal(5)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(out, ref_layer_norm(x, g, b), rtol=1e-5, atol=1e-5)


def test_no_nan_at_desk_magnitudes():
    x = leaf(np.array([[-1e3, 0.0, 1e3, 5.0]]))
    out = T.sum(T.gelu(x)) + T.sum(T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))))
    out = out + T.sum(T.causal_softmax(Tensor(np.full((4, 4), 1e3))))
    out = out + T.cross_entropy(x, [2])
    out.backward()
    assert np.isfinite(out.data).all() and np.isfinite(x.grad).all()


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        a, b = leaf(rng.standard_normal((4, 8))), leaf(rng.standard_normal((8, 5)))
        loss = T.cross_entropy(T.gelu(T.matmul(a, b)), [0, 1, 2, 3])
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()
