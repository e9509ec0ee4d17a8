"""Independent reference computations used as test oracles.

Everything here is plain Python loops over floats, never the library's own
vectorized paths.
"""

import math

import numpy as np


def matmul_loops(a, b):
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def softmax_list(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def kl_direct(p, q):
    """Row-averaged KL(p || q) with the 0 log 0 = 0 convention."""
    total = 0.0
    for prow, qrow in zip(p, q):
        for pv, qv in zip(prow, qrow):
            if pv > 0:
                total += pv * (math.log(pv) - math.log(qv))
    return total / len(p)


def mse_direct(a, b):
    flat_a = [v for row in a for v in row]
    flat_b = [v for row in b for v in row]
    return sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)


def sq_dist_loops(tokens):
    """Squared distances accumulated left to right over features."""
    s = len(tokens)
    out = [[0.0] * s for _ in range(s)]
    for i in range(s):
        for j in range(s):
            acc = 0.0
            for a, b in zip(tokens[i], tokens[j]):
                d = a - b
                acc += d * d
            out[i][j] = acc
    return out


def brute_force_graph(tokens, k, sigma=None, mutual=False):
    """Exhaustive k-NN graph: returns (mask, adjacency, sigma) as nested lists.

    Each node ranks every other node by (distance, index) and keeps the first
    k; the directed choices are symmetrized by union (or intersection).
    ``sigma=None`` selects the median of the edge distances.
    """
    d = sq_dist_loops(tokens)
    s = len(tokens)
    picks = []
    for i in range(s):
        ranked = sorted((d[i][j], j) for j in range(s) if j != i)
        picks.append({j for _, j in ranked[:k]})
    mask = [[False] * s for _ in range(s)]
    for i in range(s):
        for j in range(s):
            if i == j:
                continue
            a, b = j in picks[i], i in picks[j]
            mask[i][j] = (a and b) if mutual else (a or b)
    if sigma is None:
        vals = sorted(d[i][j] for i in range(s) for j in range(i + 1, s) if mask[i][j])
        n = len(vals)
        med = vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])
        sigma = med if med > 0 else 1.0
    adj = [[0.0] * s for _ in range(s)]
    for i in range(s):
        for j in range(s):
            if mask[i][j]:
                # numpy's exp is used on purpose: libm's differs from it by 1 ulp on some inputs
                adj[i][j] = float(np.exp(-(d[i][j] / (2.0 * sigma))))
    return mask, adj, sigma


def infonce_direct(sim, tau):
    total = 0.0
    for i, row in enumerate(sim):
        denom = sum(math.exp(v / tau) for v in row)
        total -= math.log(math.exp(row[i] / tau) / denom)
    return total


def cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return sum(x * y for x, y in zip(u, v)) / (max(nu, 1e-12) * max(nv, 1e-12))


def mul_loops(tokens):
    s = len(tokens)
    total = 0.0
    for i in range(s):
        for j in range(s):
            total += sum((a - b) ** 2 for a, b in zip(tokens[i], tokens[j]))
    return total / s
