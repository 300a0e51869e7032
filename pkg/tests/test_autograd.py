import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ntpp import autograd as ag
from ntpp.errors import NonFiniteError, ShapeError

H = 1e-5


def numeric_grad(f, x):
    """Central differences of scalar f over every entry of array x."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + H
        hi = f()
        x[idx] = old - H
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * H)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def check_op(build, *shapes, seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    leaves = [ag.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    # random projection so every output entry matters
    w = rng.normal(size=build(*leaves).shape)

    def f():
        return float(np.sum(build(*leaves).data * w))

    out = ag.sum_(ag.mul(build(*leaves), ag.Tensor(w)))
    ag.backward(out)
    for leaf in leaves:
        num = numeric_grad(f, leaf.data)
        assert rel_err(leaf.grad, num) < tol


def test_softmax_uniform():
    assert np.allclose(ag.softmax(ag.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(ag.matmul(ag.Tensor(np.eye(3)), ag.Tensor(a)).data, a)


def test_cross_entropy_uniform_is_ln4():
    ce = ag.cross_entropy(ag.Tensor(np.zeros((1, 4))), np.array([2]))
    assert ce.item() == pytest.approx(math.log(4), abs=1e-12)
    assert round(ce.item(), 6) == 1.386294


def test_cross_entropy_ignores_masked_targets():
    logits = ag.Tensor(np.array([[0.0, 0.0], [5.0, -5.0]]))
    ce = ag.cross_entropy(logits, np.array([0, 1]), np.array([True, False]))
    assert ce.item() == pytest.approx(math.log(2))


def test_sum_grad_is_ones():
    x = ag.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ag.backward(ag.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_matmul_gradient():
    check_op(ag.matmul, (3, 4), (4, 5))


def test_batched_matmul_gradient():
    check_op(ag.matmul, (2, 3, 4), (2, 4, 2))


@pytest.mark.parametrize("op,shapes", [
    (ag.add, [(3, 4), (4,)]),
    (ag.mul, [(3, 4), (3, 1)]),
    (lambda a: ag.scale(a, 2.5), [(3, 2)]),
    (ag.gelu, [(4, 3)]),
    (ag.softmax, [(3, 5)]),
    (lambda x, g: ag.rms_norm(x, g, 1e-6), [(3, 6), (6,)]),
    (lambda a: ag.transpose(a, (1, 0, 2)), [(2, 3, 2)]),
    (lambda a: ag.reshape(a, (6, 2)), [(3, 4)]),
    (lambda a: ag.getitem(a, (slice(None), [0, 2, 2])), [(2, 4)]),
    (lambda a, b: ag.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    (lambda a: ag.flip(a, 0), [(3, 2)]),
    (lambda a: ag.sum_(a, axis=1), [(3, 4)]),
])
def test_elementwise_and_shape_op_gradients(op, shapes):
    check_op(op, *shapes)


def test_rope_gradient():
    rng = np.random.default_rng(3)
    cos, sin = np.cos(rng.normal(size=(5, 2))), np.sin(rng.normal(size=(5, 2)))
    check_op(lambda x: ag.rope(x, cos, sin), (5, 4))


def test_embedding_gradient_accumulates_repeats():
    table = ag.Tensor(np.zeros((4, 2)), requires_grad=True)
    ag.backward(ag.sum_(ag.embedding(table, np.array([1, 1, 3]))))
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    targets = rng.integers(0, 5, size=4)
    logits = ag.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    ag.backward(ag.cross_entropy(logits, targets))
    num = numeric_grad(lambda: ag.cross_entropy(ag.Tensor(logits.data), targets).item(), logits.data)
    assert rel_err(logits.grad, num) < 1e-4


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ag.add(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones(4)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        ag.softmax(ag.Tensor([0.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ag.cross_entropy(ag.Tensor([[np.inf, 0.0]]), np.array([0]))


def test_backward_requires_scalar():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ag.backward(ag.scale(x, 2.0))


def test_shared_node_visited_once():
    x = ag.Tensor(np.array([2.0]), requires_grad=True)
    y = ag.mul(x, x)
    z = ag.add(y, y)
    ag.backward(ag.sum_(z))
    assert x.grad[0] == pytest.approx(8.0)
    order = ag.topological_order(z)
    assert len(order) == len({id(n) for n in order})


def test_deep_graph_does_not_recurse():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ag.scale(y, 1.0)
    ag.backward(ag.sum_(y))
    assert np.array_equal(x.grad, np.ones(2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_normalized(x):
    p = ag.softmax(ag.Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_forward_deterministic():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    r1 = ag.softmax(ag.matmul(ag.Tensor(a), ag.Tensor(b))).data
    r2 = ag.softmax(ag.matmul(ag.Tensor(a), ag.Tensor(b))).data
    assert np.array_equal(r1, r2)
