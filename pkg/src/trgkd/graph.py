"""Symmetric k-NN token graphs with Gaussian edge weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, as_tensor, exp, mul, neg
from .tensor import pairwise_sq_distances as _pairwise
from .tokens import TokenBatch


def pairwise_sq_distances(tokens) -> Tensor:
    """S x S matrix of squared Euclidean distances (symmetric, zero diagonal)."""
    return _pairwise(tokens)


def knn_select(dist2, k: int, mutual: bool = False) -> np.ndarray:
    """Boolean neighbor mask: each node picks its k nearest others, ties to the lower index.

    The directed picks are symmetrized by union, or by intersection when
    ``mutual`` is set.
    """
    d = np.array(dist2.data if isinstance(dist2, Tensor) else dist2, dtype=np.float64)
    s = d.shape[0]
    if not 1 <= k < s:
        raise ConfigError(f"k must satisfy 1 <= k < S (k={k}, S={s})")
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    directed = np.zeros((s, s), dtype=bool)
    directed[np.repeat(np.arange(s), k), order.reshape(-1)] = True
    return directed & directed.T if mutual else directed | directed.T


def gaussian_adjacency(dist2, mask: np.ndarray, sigma: float) -> Tensor:
    """exp(-d^2 / (2 sigma)) on masked pairs, 0 elsewhere."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    dist2 = as_tensor(dist2)
    weights = exp(neg(dist2 / (2.0 * sigma)))
    return mul(weights, mask.astype(np.float64))


def median_sigma(dist2, mask: np.ndarray) -> float:
    """Median squared distance over the masked pairs; 1.0 if that median is 0."""
    d = dist2.data if isinstance(dist2, Tensor) else np.asarray(dist2)
    vals = d[np.triu(mask, 1)]
    if vals.size == 0:
        return 1.0
    med = float(np.median(vals))
    return med if med > 0 else 1.0


@dataclass
class TokenGraph:
    adjacency: Tensor
    neighbor_mask: np.ndarray
    k: int
    sigma: float
    tokens: TokenBatch

    @property
    def size(self) -> int:
        return self.neighbor_mask.shape[0]

    def edges(self) -> list[tuple[int, int, float]]:
        ii, jj = np.nonzero(np.triu(self.neighbor_mask, 1))
        a = self.adjacency.data
        return [(int(i), int(j), float(a[i, j])) for i, j in zip(ii, jj)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "weight"])
            for i, j, wt in self.edges():
                w.writerow([i, j, repr(wt)])


def build_token_graph(batch: TokenBatch, k: int, sigma="median", mutual: bool = False) -> TokenGraph:
    """k-NN graph over a token batch.

    ``sigma`` is either a positive bandwidth or ``"median"`` to use the median
    squared distance over this graph's edges. Pass the teacher graph's sigma
    explicitly when building the matching student graph.
    """
    dist2 = pairwise_sq_distances(batch.tokens)
    if dist2.shape[0] <= k:
        raise ConfigError(f"graph needs more than k={k} tokens, got {dist2.shape[0]}")
    mask = knn_select(dist2, k, mutual=mutual)
    if isinstance(sigma, str):
        if sigma != "median":
            raise ConfigError(f"unknown sigma policy {sigma!r}")
        sigma_value = median_sigma(dist2, mask)
    else:
        sigma_value = float(sigma)
    adj = gaussian_adjacency(dist2, mask, sigma_value)
    return TokenGraph(adj, mask, k, sigma_value, batch)
