import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trgkd import tensor as T
from trgkd.errors import ConfigError, UsageError
from trgkd.graph import TokenGraph, build_token_graph
from trgkd.losses import (
    Projection,
    contextual_similarity,
    global_loss,
    inner_loss,
    kd_loss,
    local_loss,
    logit_loss,
    soften,
    token_similarity,
    total_loss,
)
from trgkd.tensor import Tensor, grad_check
from trgkd.tokens import TokenBatch

from oracles import cosine, infonce_direct, kl_direct, mse_direct, softmax_list


def graph_from(adj):
    adj = np.asarray(adj, dtype=float)
    s = len(adj)
    tb = TokenBatch(Tensor(np.zeros((s, 1))), np.zeros(s, np.int64), "teacher")
    return TokenGraph(Tensor(adj), adj > 0, 1, 1.0, tb)


def token_batch(t):
    return TokenBatch(t, np.zeros(t.shape[0], np.int64), "student")


# -- softening and logit loss ---------------------------------------------------


def test_soften_large_temperature_is_uniform(rng):
    p = soften(rng.standard_normal((4, 7)) * 10, 1e6).data
    assert np.abs(p - 1 / 7).max() <= 1e-5


def test_soften_unit_temperature():
    p = soften([[1.0, 0.0]], 1.0).data[0]
    assert p[0] == pytest.approx(math.e / (math.e + 1), rel=1e-14)
    assert p[1] == pytest.approx(1 / (math.e + 1), rel=1e-14)


def test_soften_rejects_nonpositive_tau():
    with pytest.raises(ConfigError):
        soften([[1.0]], 0.0)


def test_kd_loss_cases(rng):
    p = Tensor([[0.3, 0.7]])
    assert kd_loss(p, p).item() == 0.0
    assert kd_loss(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item() == pytest.approx(math.log(2), rel=1e-14)
    a = rng.dirichlet(np.ones(5), size=6)
    b = rng.dirichlet(np.ones(5), size=6)
    assert kd_loss(Tensor(a), Tensor(b)).item() == pytest.approx(kl_direct(a.tolist(), b.tolist()), rel=1e-12)


def test_logit_loss_lambda_zero_is_cross_entropy(rng):
    z = rng.standard_normal((5, 4))
    labels = [0, 1, 2, 3, 1]
    got = logit_loss(z, rng.standard_normal((5, 4)), labels, tau=4.0, lam=0.0).item()
    ref = -sum(math.log(softmax_list(row)[y]) for row, y in zip(z.tolist(), labels)) / 5
    assert got == pytest.approx(ref, rel=1e-12)


def test_logit_loss_kd_term_vanishes_for_equal_logits(rng):
    z = rng.standard_normal((3, 4))
    labels = [1, 0, 3]
    ce = logit_loss(z, z, labels, tau=4.0, lam=0.0).item()
    assert logit_loss(z, z, labels, tau=4.0, lam=1.0).item() == ce


def test_logit_loss_term_by_term(rng):
    zs, zt = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    labels = [2, 0, 1, 1]
    tau, lam = 4.0, 0.7
    ce = -sum(math.log(softmax_list(r)[y]) for r, y in zip(zs.tolist(), labels)) / 4
    ps = [softmax_list([v / tau for v in r]) for r in zs.tolist()]
    pt = [softmax_list([v / tau for v in r]) for r in zt.tolist()]
    ref = ce + lam * kl_direct(ps, pt)
    assert logit_loss(zs, zt, labels, tau, lam).item() == pytest.approx(ref, rel=1e-12)
    scaled = ce + lam * tau * tau * kl_direct(ps, pt)
    assert logit_loss(zs, zt, labels, tau, lam, tau2_scaling=True).item() == pytest.approx(scaled, rel=1e-12)


def test_logit_loss_bad_label():
    with pytest.raises(UsageError):
        logit_loss([[0.0, 1.0]], [[0.0, 1.0]], [2], 4.0, 1.0)


# -- local loss -------------------------------------------------------------------


def test_local_loss_identity():
    g = graph_from([[0, 0.3, 0.1], [0.3, 0, 0.9], [0.1, 0.9, 0]])
    assert local_loss(g, g).item() == 0.0


def test_local_loss_two_node_example():
    got = local_loss(graph_from([[0, 1], [1, 0]]), graph_from([[0, 0.5], [0.5, 0]])).item()
    ref = 2 * kl_direct([softmax_list([0, 1])], [softmax_list([0, 0.5])])
    assert got == pytest.approx(ref, rel=1e-13)


def test_local_loss_size_mismatch():
    with pytest.raises(UsageError):
        local_loss(graph_from(np.zeros((2, 2))), graph_from(np.zeros((3, 3))))


def test_local_loss_neighbors_only_restricts_the_softmax():
    a_t = [[0, 0.5, 0.0], [0.5, 0, 0.2], [0.0, 0.2, 0]]
    a_s = [[0, 0.9, 0.4], [0.9, 0, 0.1], [0.4, 0.1, 0]]
    gt, gs = graph_from(a_t), graph_from(a_s)
    ref = 0.0
    for i in range(3):
        nb = [j for j in range(3) if a_t[i][j] > 0]
        ref += kl_direct([softmax_list([a_s[i][j] for j in nb])], [softmax_list([a_t[i][j] for j in nb])])
    assert local_loss(gs, gt, neighbors_only=True).item() == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_local_loss_gradient_wrt_student_tokens(rng):
    tt = rng.standard_normal((10, 3))
    gt = build_token_graph(TokenBatch(Tensor(tt), np.zeros(10, np.int64), "teacher"), 3)
    ts = Tensor(rng.standard_normal((10, 2)), requires_grad=True)

    def f():
        gs = build_token_graph(token_batch(ts), 3, sigma=gt.sigma)
        return local_loss(gs, gt)

    assert grad_check(f, [ts]) <= 1e-4


# -- similarity and global loss -------------------------------------------------------


def test_identity_projection_orthonormal_tokens_give_identity_sim():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    sim = token_similarity(q, q, Projection(4, 4, weight=np.eye(4))).data
    np.testing.assert_allclose(sim, np.eye(4), atol=1e-14)


def test_antiparallel_is_minus_one():
    sim = token_similarity([[1.0, 2.0]], [[-2.0, -4.0]], Projection(2, 2, weight=np.eye(2))).data
    assert sim[0, 0] == pytest.approx(-1.0, abs=1e-15)


def test_similarity_matches_cosine_oracle(rng):
    ts, tt = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
    proj = Projection(3, 4, seed=2)
    sim = token_similarity(ts, tt, proj).data
    projected = (ts @ proj.weight.data).tolist()
    for i in range(5):
        for j in range(5):
            assert sim[i, j] == pytest.approx(cosine(projected[i], tt[j].tolist()), abs=1e-13)


def test_zero_token_does_not_divide_by_zero():
    sim = token_similarity([[0.0, 0.0]], [[1.0, 0.0]], Projection(2, 2, weight=np.eye(2))).data
    assert sim[0, 0] == 0.0


def test_global_loss_single_token_is_zero():
    assert global_loss([[0.3]], 0.1).item() == 0.0


def test_global_loss_identity_sim():
    assert global_loss(np.eye(2), 1.0).item() == pytest.approx(2 * math.log(1 + math.exp(-1)), rel=1e-14)
    assert global_loss(np.eye(2), 1.0).item() == pytest.approx(0.6265, abs=1e-4)


def test_global_loss_perfect_alignment_limit():
    sim = 2 * np.eye(4) - 1
    values = [global_loss(sim, t).item() for t in (1.0, 0.1, 0.01)]
    assert values[0] > values[1] > values[2] and values[2] < 1e-80


def test_global_loss_matches_direct(rng):
    sim = rng.uniform(-1, 1, (6, 6))
    assert global_loss(sim, 0.3).item() == pytest.approx(infonce_direct(sim.tolist(), 0.3), rel=1e-12)


def test_global_loss_bad_temperature():
    with pytest.raises(ConfigError):
        global_loss(np.eye(2), 0.0)


@given(st.floats(0.01, 100.0), st.integers(0, 10**6))
def test_global_loss_invariant_to_student_scale(c, seed):
    r = np.random.default_rng(seed)
    ts, tt = r.standard_normal((6, 3)), r.standard_normal((6, 5))
    proj = Projection(3, 5, seed=seed)
    a = global_loss(token_similarity(ts, tt, proj), 0.1).item()
    b = global_loss(token_similarity(ts * c, tt, proj), 0.1).item()
    assert abs(a - b) <= 1e-10


# -- contextual similarity and inner loss -------------------------------------------


def test_contextual_single_token():
    np.testing.assert_array_equal(contextual_similarity([[2.0, -1.0]]).data, [[1.0]])


def test_contextual_identity_features():
    cs = contextual_similarity(np.eye(2)).data
    first = softmax_list([1 / math.sqrt(2), 0.0])
    np.testing.assert_allclose(cs, [first, first[::-1]], rtol=1e-14)
    assert cs[0, 0] == pytest.approx(0.6698, abs=1e-4)


def test_contextual_batched_equals_per_instance(rng):
    f = rng.standard_normal((3, 4, 5))
    batched = contextual_similarity(f).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], contextual_similarity(f[b]).data, rtol=1e-14)


def test_inner_loss_cases(rng):
    a = rng.random((2, 3, 3))
    assert inner_loss(a, a).item() == 0.0
    assert inner_loss(np.eye(2), np.full((2, 2), 0.5)).item() == 0.25
    b = rng.random((3, 3))
    c = rng.random((3, 3))
    assert inner_loss(b, c).item() == pytest.approx(mse_direct(b.tolist(), c.tolist()), rel=1e-13)
    with pytest.raises(UsageError):
        inner_loss(np.eye(2), np.eye(3))


# -- total ----------------------------------------------------------------------------


def test_total_zero_coefficients():
    br = total_loss(Tensor(1.5), Tensor(2.0), Tensor(3.0), Tensor(4.0), 0.0, 0.0, 0.0)
    assert br.total == 1.5


def test_total_all_ones():
    one = Tensor(1.0)
    assert total_loss(one, one, one, one, 1.0, 1.0, 1.0).total == 4.0


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.lists(st.floats(0, 10), min_size=3, max_size=3))
def test_total_is_the_linear_combination(parts, coefs):
    br = total_loss(*[Tensor(p) for p in parts], *coefs)
    ref = parts[0] + coefs[0] * parts[1] + coefs[1] * parts[2] + coefs[2] * parts[3]
    assert abs(br.total - ref) <= 1e-10 * max(1.0, abs(ref))
    assert br.as_dict()["logit_term"] == parts[0]
    assert "total_tensor" not in br.as_dict()


def test_total_negative_coefficient():
    with pytest.raises(ConfigError):
        total_loss(Tensor(1.0), None, None, None, -1.0, 0.0, 0.0)


def test_removed_part_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    br = total_loss(T.tsum(x * x), None, None, T.tsum(y), 1.0, 1.0, 0.0)
    T.backward(br.total_tensor)
    assert y.grad is None or not y.grad.any()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


# -- gradients of each loss -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_full_loss_gradients(seed):
    r = np.random.default_rng(seed)
    tt = r.standard_normal((8, 4))
    gt = build_token_graph(TokenBatch(Tensor(tt), np.zeros(8, np.int64), "teacher"), 3)
    ts = Tensor(r.standard_normal((8, 3)), requires_grad=True)
    zs = Tensor(r.standard_normal((4, 5)), requires_grad=True)
    fs = Tensor(r.standard_normal((2, 4, 3)), requires_grad=True)
    proj = Projection(3, 4, seed=seed)
    cs_t = contextual_similarity(r.standard_normal((2, 4, 4)))
    zt = r.standard_normal((4, 5))

    def f():
        gs = build_token_graph(token_batch(ts), 3, sigma=gt.sigma)
        return total_loss(
            logit_loss(zs, zt, [0, 1, 2, 3], 4.0, 1.0),
            inner_loss(cs_t, contextual_similarity(fs)),
            local_loss(gs, gt),
            global_loss(token_similarity(ts, tt, proj), 0.1),
            0.5, 1.0, 0.3,
        ).total_tensor

    assert grad_check(f, [ts, zs, fs, proj.weight]) <= 1e-4
