"""Distillation objectives: logit KD, graph local/global losses, contextual loss, total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .graph import TokenGraph
from .tensor import (
    Tensor,
    as_tensor,
    clamp_min,
    cross_entropy,
    kl_rows,
    log_softmax,
    matmul,
    mse,
    mul,
    softmax_rows,
    sqrt,
    swap_last,
    tsum,
)

# rows of masked-out logits get this value so that exp() underflows to 0
_MASKED = -1e300


def soften(z, tau: float) -> Tensor:
    """Temperature-softened class probabilities."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return softmax_rows(as_tensor(z) / float(tau))


def kd_loss(p_student, p_teacher, tau_squared: float | None = None) -> Tensor:
    """Batch-mean KL(student || teacher), student distribution first.

    ``tau_squared`` optionally rescales the result (Hinton's tau^2 factor).
    """
    loss = kl_rows(p_student, p_teacher)
    if tau_squared is not None:
        loss = loss * float(tau_squared)
    return loss


def logit_loss(z_student, z_teacher, labels, tau: float, lam: float, tau2_scaling: bool = False) -> Tensor:
    z_student = as_tensor(z_student)
    labels = np.asarray(labels)
    k = z_student.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k})")
    ce = cross_entropy(z_student, labels)
    if lam == 0:
        return ce
    kd = kd_loss(soften(z_student, tau), soften(z_teacher, tau),
                 tau_squared=tau * tau if tau2_scaling else None)
    return ce + float(lam) * kd


def _row_kl_sum(a_student: Tensor, a_teacher: Tensor, restrict: np.ndarray | None) -> Tensor:
    """sum_i KL(softmax(a_student[i]) || softmax(a_teacher[i]))."""
    if restrict is not None:
        off = np.where(restrict, 0.0, _MASKED)
        a_student = a_student + off
        a_teacher = a_teacher + off
    log_p = log_softmax(a_student)
    log_q = log_softmax(a_teacher)
    p = softmax_rows(a_student)
    if restrict is not None:
        # masked entries have p == 0; zero their log-ratio to avoid 0 * inf
        keep = restrict.astype(np.float64)
        return tsum(p * (log_p - log_q) * keep)
    return tsum(p * (log_p - log_q))


def local_loss(graph_student: TokenGraph, graph_teacher: TokenGraph, neighbors_only: bool = False) -> Tensor:
    """Sum over tokens of KL between row-softmaxed student and teacher adjacencies.

    By default the softmax spans the whole row, zeros included. With
    ``neighbors_only`` it spans the teacher's neighbor set of each token.
    """
    a_s, a_t = graph_student.adjacency, graph_teacher.adjacency
    if a_s.shape != a_t.shape:
        raise UsageError(f"local_loss: graph sizes differ ({a_s.shape} vs {a_t.shape})")
    restrict = graph_teacher.neighbor_mask if neighbors_only else None
    return _row_kl_sum(a_s, a_t, restrict)


class Projection:
    """Bias-free linear map from student token width to teacher token width."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0, weight=None):
        if weight is None:
            bound = 1.0 / math.sqrt(in_dim)
            rng = np.random.default_rng(seed)
            weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.weight = Tensor(weight, requires_grad=True, name="proj.weight")
        if self.weight.shape != (in_dim, out_dim):
            raise DimensionError(f"projection weight must be {in_dim}x{out_dim}, got {self.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        return matmul(as_tensor(x), self.weight)

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("proj.weight", self.weight)]


def _unit_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = sqrt(clamp_min(tsum(x * x, axis=-1, keepdims=True), eps * eps))
    return x / norms


def token_similarity(ts, tt, proj: Projection) -> Tensor:
    """S x S cosine similarities between projected student tokens and teacher tokens."""
    ts, tt = as_tensor(ts), as_tensor(tt)
    if ts.ndim != 2 or tt.ndim != 2 or ts.shape[0] != tt.shape[0]:
        raise DimensionError(f"token_similarity: shapes {ts.shape} and {tt.shape} do not pair up")
    if ts.shape[1] != proj.in_dim or tt.shape[1] != proj.out_dim:
        raise DimensionError(
            f"projection is {proj.in_dim}->{proj.out_dim} but tokens are {ts.shape[1]} and {tt.shape[1]} wide"
        )
    return matmul(_unit_rows(proj(ts)), swap_last(_unit_rows(tt)))


def global_loss(sim, tau_g: float) -> Tensor:
    """InfoNCE with the diagonal as positives, summed over tokens."""
    if not tau_g > 0:
        raise ConfigError(f"graph temperature must be positive, got {tau_g}")
    sim = as_tensor(sim)
    s = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != s:
        raise DimensionError(f"global_loss expects a square similarity matrix, got {sim.shape}")
    logp = log_softmax(sim / float(tau_g))
    return -tsum(mul(logp, np.eye(s)))


def contextual_similarity(feats) -> Tensor:
    """softmax(F F^T / sqrt(D)) per instance; accepts N x D or B x N x D."""
    feats = as_tensor(feats)
    if feats.ndim not in (2, 3):
        raise DimensionError(f"contextual_similarity expects N x D or B x N x D, got {feats.shape}")
    d = feats.shape[-1]
    return softmax_rows(matmul(feats, swap_last(feats)) / math.sqrt(d))


def inner_loss(cs_teacher, cs_student) -> Tensor:
    """MSE between contextual similarity maps, averaged over instances."""
    cs_teacher, cs_student = as_tensor(cs_teacher), as_tensor(cs_student)
    if cs_teacher.shape != cs_student.shape:
        raise UsageError(f"inner_loss: shapes {cs_teacher.shape} and {cs_student.shape} differ")
    # every instance has the same N x N size, so the global mean is the mean of per-instance MSEs
    return mse(cs_teacher, cs_student)


@dataclass
class LossBreakdown:
    logit_term: float
    inner_term: float
    local_term: float
    global_term: float
    total: float
    alpha: float
    beta: float
    gamma: float
    lam: float = 0.0
    tau: float = 0.0
    tau_g: float = 0.0
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("total_tensor")
        return d


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(logit, inner, local, glob, alpha: float, beta: float, gamma: float,
               lam: float = 0.0, tau: float = 0.0, tau_g: float = 0.0) -> LossBreakdown:
    """logit + alpha*inner + beta*local + gamma*global, with the parts recorded.

    Parts given as ``None`` are treated as removed: they contribute neither a
    value nor a gradient.
    """
    for name, c in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if c < 0:
            raise ConfigError(f"{name} must be non-negative, got {c}")
    total = logit
    for coef, part in ((alpha, inner), (beta, local), (gamma, glob)):
        if part is not None:
            total = total + float(coef) * part
    tensor = total if isinstance(total, Tensor) else None
    return LossBreakdown(
        logit_term=_value(logit),
        inner_term=0.0 if inner is None else _value(inner),
        local_term=0.0 if local is None else _value(local),
        global_term=0.0 if glob is None else _value(glob),
        total=_value(total),
        alpha=float(alpha), beta=float(beta), gamma=float(gamma),
        lam=float(lam), tau=float(tau), tau_g=float(tau_g),
        total_tensor=tensor,
    )
