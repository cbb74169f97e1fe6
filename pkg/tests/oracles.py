"""Independent brute-force oracles used to freeze expected values.

These deliberately avoid the library's own code paths: metrics are computed
by direct counting over pairs, neighbor search by a full O(N^2) scan, and
gradients by central finite differences.
"""

from __future__ import annotations

import math
from collections import Counter

import torch


def purity_oracle(clusters, labels) -> float:
    """Direct count: per cluster, the most common label."""
    per_cluster: dict[int, Counter] = {}
    for c, l in zip(clusters, labels):
        per_cluster.setdefault(c, Counter())[l] += 1
    return sum(max(counts.values()) for counts in per_cluster.values()) / len(clusters)


def nmi_oracle(clusters, labels) -> float:
    """Direct count over joint occurrences; 2I/(H_c + H_l) in nats."""
    n = len(clusters)
    pc = Counter(clusters)
    pl = Counter(labels)
    joint = Counter(zip(clusters, labels))
    h_c = -sum((v / n) * math.log(v / n) for v in pc.values())
    h_l = -sum((v / n) * math.log(v / n) for v in pl.values())
    if h_c == 0.0 and h_l == 0.0:
        return 1.0
    if h_c == 0.0 or h_l == 0.0:
        return 0.0
    mi = 0.0
    for (c, l), v in joint.items():
        p = v / n
        mi += p * math.log(p / ((pc[c] / n) * (pl[l] / n)))
    return 2.0 * mi / (h_c + h_l)


def knn_oracle(ids, vectors, k) -> list[tuple[str, ...]]:
    """Full O(N^2) scan; descending cosine similarity, ties by ascending id."""
    n = len(ids)
    rows = []
    for i in range(n):
        sims = [(float(vectors[i] @ vectors[j]), ids[j], j) for j in range(n) if j != i]
        sims.sort(key=lambda t: (-t[0], t[1]))
        rows.append(tuple(s[1] for s in sims[:k]))
    return rows


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of a scalar function wrt a float64 tensor."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_grad_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom
