"""Finite-difference checks of every loss on small random instances."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .graph import build_token_graph
from .losses import (
    Projection,
    contextual_similarity,
    global_loss,
    inner_loss,
    local_loss,
    logit_loss,
    token_similarity,
    total_loss,
)
from .tensor import Tensor, _record, grad_check
from .tokens import TokenBatch

TOLERANCE = 1e-4
LOSSES = ("kd", "local", "global", "inner", "total")


def _corrupt(t: Tensor) -> Tensor:
    """Same value, gradient scaled by 1.5: a deliberately wrong backward rule."""
    return _record(t.data, "corrupt", (t,), lambda g: (1.5 * g,))


def _case(name: str, rng: np.random.Generator):
    """Build (closure, params) for one random instance of loss ``name``."""
    s = int(rng.integers(4, 17))
    d_t, d_s = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    k_cls = int(rng.integers(2, 6))
    k_nn = int(rng.integers(1, min(4, s - 1) + 1))
    b = int(rng.integers(2, 5))
    n_tok = int(rng.integers(2, 6))

    def leaf(shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    tt = rng.standard_normal((s, d_t))
    g_t = build_token_graph(TokenBatch(Tensor(tt), np.zeros(s, np.int64), "teacher"), k_nn)
    # student tokens on the teacher's distance scale, since the student graph reuses the teacher's sigma
    ts = Tensor(rng.standard_normal((s, d_s)) * np.sqrt(d_t / d_s), requires_grad=True)
    proj = Projection(d_s, d_t, seed=int(rng.integers(1 << 31)))
    zs, zt = leaf((b, k_cls)), rng.standard_normal((b, k_cls))
    labels = rng.integers(0, k_cls, size=b)
    fs = leaf((b, n_tok, d_s))
    cs_t = contextual_similarity(rng.standard_normal((b, n_tok, d_t)))
    tau = float(rng.uniform(1.0, 6.0))
    tau_g = float(rng.uniform(0.1, 1.0))

    def kd():
        return logit_loss(zs, zt, labels, tau, lam=1.0)

    def local():
        g_s = build_token_graph(TokenBatch(ts, np.zeros(s, np.int64), "student"), k_nn, sigma=g_t.sigma)
        return local_loss(g_s, g_t)

    def glob():
        return global_loss(token_similarity(ts, tt, proj), tau_g)

    def inner():
        return inner_loss(cs_t, contextual_similarity(fs))

    def total():
        # composed as the trainer does it: graph terms averaged over the S sampled tokens
        return total_loss(kd(), inner(), local() / float(s), glob() / float(s), 0.7, 1.3, 0.4).total_tensor

    table: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {
        "kd": (kd, [zs]),
        "local": (local, [ts]),
        "global": (glob, [ts, proj.weight]),
        "inner": (inner, [fs]),
        "total": (total, [zs, ts, fs, proj.weight]),
    }
    return table[name]


def run_suite(seeds: int = 20, losses=LOSSES, corrupt: str | None = None, base_seed: int = 0) -> dict[str, float]:
    """Max relative autodiff-vs-central-difference error per loss over ``seeds`` instances.

    ``corrupt`` names a loss whose backward rule is sabotaged, to show the
    check catches it.
    """
    report = {}
    for name in losses:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([base_seed, LOSSES.index(name), seed])
            f, params = _case(name, rng)
            g = (lambda f=f: _corrupt(f())) if corrupt == name else f
            worst = max(worst, grad_check(g, params, h=1e-5))
        report[name] = worst
    return report
