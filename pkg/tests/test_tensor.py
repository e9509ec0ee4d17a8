import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trgkd import tensor as T
from trgkd.errors import DimensionError, NumericError, UsageError
from trgkd.tensor import Tensor, backward, grad_check

from oracles import kl_direct, matmul_loops, mse_direct


def leaf(arr):
    return Tensor(arr, requires_grad=True)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_permutation():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[0, 1], [1, 0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    expected = matmul_loops(a.tolist(), b.tolist())
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, rtol=1e-13, atol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_ln2():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], rtol=1e-14)


def test_softmax_large_inputs_do_not_overflow():
    out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[float("nan"), 0.0]]))


@given(st.integers(1, 6), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(m, n, seed):
    x = np.random.default_rng(seed).standard_normal((m, n)) * 5
    out = T.softmax_rows(Tensor(x)).data
    assert np.abs(out.sum(axis=1) - 1).max() <= 1e-12
    assert ((out > 0) & (out < 1)).all() or n == 1


# -- KL / MSE ---------------------------------------------------------------


def test_kl_identity_is_zero():
    p = Tensor([[0.2, 0.8], [0.5, 0.5]])
    assert T.kl_rows(p, p).item() == 0.0


def test_kl_point_mass_vs_uniform():
    assert T.kl_rows(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item() == pytest.approx(math.log(2), rel=1e-14)


def test_kl_matches_direct_summation(rng):
    p = rng.random((4, 5))
    q = rng.random((4, 5))
    p /= p.sum(1, keepdims=True)
    q /= q.sum(1, keepdims=True)
    assert T.kl_rows(Tensor(p), Tensor(q)).item() == pytest.approx(kl_direct(p.tolist(), q.tolist()), rel=1e-12)


def test_kl_zero_q_is_clamped():
    value = T.kl_rows(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0]])).item()
    assert value == pytest.approx(0.5 * (math.log(0.5) - math.log(1e-12)) + 0.5 * math.log(0.5), rel=1e-12)


def test_kl_rejects_non_stochastic_rows():
    with pytest.raises(UsageError):
        T.kl_rows(Tensor([[0.7, 0.7]]), Tensor([[0.5, 0.5]]))


@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_kl_nonnegative(m, n, seed):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(n), size=m)
    q = r.dirichlet(np.ones(n), size=m)
    assert T.kl_rows(Tensor(p), Tensor(q)).item() >= -1e-15


def test_mse_cases(rng):
    assert T.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert T.mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    assert T.mse(Tensor(a), Tensor(b)).item() == pytest.approx(mse_direct(a.tolist(), b.tolist()), rel=1e-13)
    with pytest.raises(DimensionError):
        T.mse(Tensor([1.0]), Tensor([1.0, 2.0]))


# -- backward -----------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_mse_against_zero():
    x = leaf([3.0])
    backward(T.mse(x, Tensor([0.0])))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(x * 2.0)


def test_backward_needs_a_connected_loss():
    with pytest.raises(UsageError):
        backward(Tensor(1.0))


def test_tape_visits_each_node_once():
    x = leaf([1.0, 2.0])
    y = x * x
    z = (y + y).sum()
    tape = T.GradientTape(z)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids)) == 3
    # inputs come before their consumers
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n.tape_node.parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]
    tape.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_no_gradient_flows_into_frozen_inputs():
    frozen = Tensor([1.0, 2.0])
    x = leaf([0.5, 0.5])
    backward((x * frozen).sum())
    assert frozen.grad is None


@given(st.integers(0, 2**31 - 1))
def test_backward_is_linear_in_the_loss(seed):
    r = np.random.default_rng(seed)
    w0 = r.standard_normal((3, 4))
    a, b = r.standard_normal((2, 3)), r.standard_normal((4, 2))

    def loss1(w):
        return T.tsum(T.exp(T.matmul(Tensor(a), w) * 0.3))

    def loss2(w):
        return T.mse(T.matmul(w, Tensor(b)), Tensor(np.ones((3, 2))))

    w = leaf(w0)
    backward(loss1(w))
    g1 = w.grad
    w = leaf(w0)
    backward(loss2(w))
    g2 = w.grad
    w = leaf(w0)
    backward(loss1(w) + loss2(w))
    np.testing.assert_allclose(w.grad, g1 + g2, rtol=1e-12, atol=1e-12)


# -- gradient check -------------------------------------------------------------


def test_grad_check_exact_on_quadratic(rng):
    a = rng.standard_normal((4, 4))
    q = a @ a.T
    x = leaf(rng.standard_normal((4, 1)))
    err = grad_check(lambda: T.tsum(T.matmul(T.swap_last(x), T.matmul(Tensor(q), x))), [x], h=1e-3)
    assert err <= 1e-10


def test_grad_check_flags_a_wrong_gradient(rng):
    x = leaf(rng.standard_normal(5))

    def bad_square(t):
        return T._record(t.data ** 2, "bad", (t,), lambda g: (g * t.data,))  # missing factor 2

    assert grad_check(lambda: T.tsum(bad_square(x)), [x]) > 0.1


PRIMITIVES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
    "matmul": lambda a, b: T.matmul(a, T.swap_last(b)),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(T.add(T.mul(a, a), 0.5)),
    "sqrt": lambda a, b: T.sqrt(T.add(T.mul(b, b), 0.5)),
    "pow": lambda a, b: T.power(T.add(T.mul(a, a), 1.0), 1.5),
    "relu": lambda a, b: T.relu(a),
    "softmax": lambda a, b: T.softmax_rows(a),
    "log_softmax": lambda a, b: T.log_softmax(a),
    "permute": lambda a, b: T.permute(T.reshape(a, (2, 3, 2)), (2, 0, 1)),
    "take_rows": lambda a, b: T.take_rows(a, [2, 0, 2]),
    "mean_axis": lambda a, b: T.mean(a, axis=0),
    "pairwise": lambda a, b: T.pairwise_sq_distances(a),
    "clamp_min": lambda a, b: T.clamp_min(a, 0.1),
    "kl_rows": lambda a, b: T.kl_rows(T.softmax_rows(a), T.softmax_rows(b)),
    "mse": lambda a, b: T.mse(a, b),
    "cross_entropy": lambda a, b: T.cross_entropy(a, [0, 3, 1]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    op = PRIMITIVES[name]
    for seed in range(20):
        r = np.random.default_rng(seed)
        a = leaf(r.standard_normal((3, 4)))
        b = leaf(r.standard_normal((3, 4)))
        weights = Tensor(r.standard_normal(op(a, b).shape))
        err = grad_check(lambda: T.tsum(T.mul(op(a, b), weights)), [a, b], h=1e-5)
        assert err <= 1e-4, (name, seed, err)


def test_conv2d_matches_direct_loops_and_gradients(rng):
    x = leaf(rng.standard_normal((2, 2, 4, 4)))
    w = leaf(rng.standard_normal((3, 2, 3, 3)))
    out = T.conv2d(x, w, padding=1).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 4, 4))
    for b in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(4):
                    ref[b, o, i, j] = (xp[b, :, i:i + 3, j:j + 3] * w.data[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
    weights = Tensor(rng.standard_normal(out.shape))
    assert grad_check(lambda: T.tsum(T.conv2d(x, w, padding=1) * weights), [x, w]) <= 1e-4
