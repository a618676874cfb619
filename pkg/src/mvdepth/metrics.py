"""Point-cloud distances and generative-set metrics (MMD, COV, 1-NNA)."""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

Distance = Callable[[np.ndarray, np.ndarray], float]


def _cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point cloud, got shape {x.shape}")
    if len(x) == 0:
        raise ValueError("empty point cloud")
    return x


def chamfer(X, Y) -> float:
    """Sum of squared nearest-neighbour distances, in both directions."""
    X, Y = _cloud(X), _cloud(Y)
    d2 = cdist(X, Y, "sqeuclidean")
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


def emd(X, Y) -> float:
    """Minimum total Euclidean cost over bijections between equal-size clouds."""
    X, Y = _cloud(X), _cloud(Y)
    if len(X) != len(Y):
        raise ValueError(f"EMD needs equal point counts, got {len(X)} and {len(Y)}")
    cost = cdist(X, Y)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


DISTANCES: dict[str, Distance] = {"cd": chamfer, "emd": emd}


def pairwise_distances(A: Sequence, B: Sequence, distance: Distance) -> np.ndarray:
    """Matrix ``D[i, j] = distance(A[i], B[j])``."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("cloud sets must be nonempty")
    return np.array([[distance(a, b) for b in B] for a in A], dtype=np.float64)


def coverage(Sg, Sr, distance: Distance = chamfer, D: np.ndarray | None = None) -> float:
    """Fraction of references that are the nearest neighbour of some generated cloud."""
    D = pairwise_distances(Sg, Sr, distance) if D is None else D
    return len(set(np.argmin(D, axis=1).tolist())) / D.shape[1]


def mmd(Sg, Sr, distance: Distance = chamfer, D: np.ndarray | None = None) -> float:
    """Mean over references of the distance to the closest generated cloud."""
    D = pairwise_distances(Sg, Sr, distance) if D is None else D
    return float(D.min(axis=0).mean())


def one_nna(Sg, Sr, distance: Distance = chamfer, D: np.ndarray | None = None) -> float:
    """Leave-one-out 1-NN accuracy over the pooled sets.

    Clouds are ordered generated-first; ties go to the lowest pooled index.
    ``D`` may be the full pooled (ng + nr) square distance matrix.
    """
    ng, nr = len(Sg), len(Sr)
    if ng == 0 or nr == 0:
        raise ValueError("cloud sets must be nonempty")
    if D is None:
        pooled = list(Sg) + list(Sr)
        D = pairwise_distances(pooled, pooled, distance)
    D = np.array(D, dtype=np.float64)
    np.fill_diagonal(D, np.inf)
    labels = np.r_[np.zeros(ng, bool), np.ones(nr, bool)]
    nearest = np.argmin(D, axis=1)
    return float(np.mean(labels[nearest] == labels))


def subsample(cloud, n: int, seed: int = 0) -> np.ndarray:
    """Uniform subsample of ``n`` points without replacement (seeded)."""
    cloud = _cloud(cloud)
    if n > len(cloud):
        raise ValueError(f"cannot take {n} points from a cloud of {len(cloud)}")
    idx = np.random.default_rng(seed).choice(len(cloud), size=n, replace=False)
    return cloud[np.sort(idx)]


def evaluate(Sg, Sr, metrics: Sequence[str] = ("cd", "emd")) -> dict:
    """MMD, COV and 1-NNA for every requested distance, keyed like ``"mmd-cd"``."""
    report = {}
    pooled = list(Sg) + list(Sr)
    ng = len(Sg)
    for name in metrics:
        full = pairwise_distances(pooled, pooled, DISTANCES[name])
        cross = full[:ng, ng:]
        report[f"mmd-{name}"] = mmd(Sg, Sr, D=cross)
        report[f"cov-{name}"] = coverage(Sg, Sr, D=cross)
        report[f"1nna-{name}"] = one_nna(Sg, Sr, D=full)
    return report


# ---------------------------------------------------------------------------
# Brute-force references used by ``eval --oracle`` and the tests
# ---------------------------------------------------------------------------

def chamfer_bruteforce(X, Y) -> float:
    total = 0.0
    for a, b in ((X, Y), (Y, X)):
        for p in a:
            total += min(float(np.sum((np.asarray(p) - np.asarray(q)) ** 2)) for q in b)
    return total


def emd_bruteforce(X, Y) -> float:
    from itertools import permutations
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    return min(sum(float(np.linalg.norm(X[i] - Y[j])) for i, j in enumerate(perm))
               for perm in permutations(range(len(Y))))


def evaluate_bruteforce(Sg, Sr, metrics: Sequence[str] = ("cd", "emd")) -> dict:
    """Loop-level recomputation of ``evaluate`` without shared helpers."""
    dist = {"cd": chamfer_bruteforce, "emd": emd_bruteforce}
    report = {}
    pooled = list(Sg) + list(Sr)
    ng = len(Sg)
    for name in metrics:
        f = dist[name]
        matched = set()
        for X in Sg:
            best, arg = np.inf, -1
            for j, Y in enumerate(Sr):
                d = f(X, Y)
                if d < best:
                    best, arg = d, j
            matched.add(arg)
        mins = [min(f(X, Y) for X in Sg) for Y in Sr]
        correct = 0
        for i, A in enumerate(pooled):
            best, arg = np.inf, -1
            for j, B in enumerate(pooled):
                if j == i:
                    continue
                d = f(A, B)
                if d < best:
                    best, arg = d, j
            correct += (arg < ng) == (i < ng)
        report[f"mmd-{name}"] = sum(mins) / len(mins)
        report[f"cov-{name}"] = len(matched) / len(Sr)
        report[f"1nna-{name}"] = correct / len(pooled)
    return report


def format_table(report: dict) -> str:
    width = max(len(k) for k in report)
    lines = [f"{'metric':<{width}}  value", "-" * (width + 14)]
    lines += [f"{k:<{width}}  {v:.6f}" for k, v in report.items()]
    return "\n".join(lines)


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
