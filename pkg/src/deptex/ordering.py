"""Confusion-matrix axis ordering from a 2-D manifold.

The ordering is a one-dimensional embedding of the class centroids: the
shortest open path that visits every centroid once, so classes that sit close
on the manifold end up adjacent on the axes. Projection onto the first
principal axis is also available; it is only good when the centroids lie
roughly along a line.
"""
from itertools import combinations

import numpy as np

from .errors import DataError


def class_centroids(coords, labels, classes):
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty((len(classes), coords.shape[1]))
    for k, c in enumerate(classes):
        mask = labels == c
        if not mask.any():
            raise DataError(f"class {c!r} has no points in the embedding")
        out[k] = coords[mask].mean(axis=0)
    return out


def principal_order(centroids):
    """Indices sorting the centroids along their first principal axis.

    The axis sign is fixed so its largest-magnitude component is positive and
    ties break by index, which keeps the ordering deterministic.
    """
    C = np.asarray(centroids, dtype=np.float64)
    if len(C) < 2:
        return np.arange(len(C))
    Cc = C - C.mean(axis=0)
    evals, evecs = np.linalg.eigh(Cc.T @ Cc)
    axis = evecs[:, np.argmax(evals)]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return np.lexsort((np.arange(len(C)), Cc @ axis))


def path_order(centroids, exact_limit=12):
    """Shortest open path through the centroids, oriented along the principal axis.

    Exact (Held-Karp dynamic programming) for up to ``exact_limit`` classes;
    above that, 2-opt moves starting from :func:`principal_order`. The path
    is reversed if needed so it starts at the end with the lower principal
    projection.
    """
    C = np.asarray(centroids, dtype=np.float64)
    n = len(C)
    if n < 3:
        return principal_order(C)
    D = np.linalg.norm(C[:, None] - C[None], axis=2)
    path = _held_karp(D) if n <= exact_limit else _two_opt(D, list(principal_order(C)))
    rank = np.empty(n, dtype=int)
    rank[principal_order(C)] = np.arange(n)
    if rank[path[0]] > rank[path[-1]]:
        path = path[::-1]
    return np.array(path)


def _held_karp(D):
    n = len(D)
    full = (1 << n) - 1
    cost = np.full((1 << n, n), np.inf)
    prev = np.full((1 << n, n), -1)
    for j in range(n):
        cost[1 << j, j] = 0.0
    for size in range(1, n):
        for members in combinations(range(n), size):
            mask = sum(1 << j for j in members)
            best = cost[mask][:, None] + D
            arg = np.argmin(best, axis=0)  # first minimum, so ties go to the lower index
            for k in range(n):
                if mask & (1 << k):
                    continue
                new = mask | (1 << k)
                if best[arg[k], k] < cost[new, k]:
                    cost[new, k] = best[arg[k], k]
                    prev[new, k] = arg[k]
    end = int(np.argmin(cost[full]))
    path, mask = [], full
    while end >= 0:
        path.append(end)
        mask, end = mask & ~(1 << end), prev[mask, end]
    return path[::-1]


def _two_opt(D, path):
    improved = True
    while improved:
        improved = False
        for i in range(len(path) - 1):
            for j in range(i + 2, len(path) + 1):
                # reversing path[i+1:j] swaps edges (i, i+1) and (j-1, j)
                a, b, c = path[i], path[i + 1], path[j - 1]
                old = D[a, b] + (D[c, path[j]] if j < len(path) else 0.0)
                new = D[a, c] + (D[b, path[j]] if j < len(path) else 0.0)
                if new < old - 1e-12:
                    path[i + 1 : j] = path[i + 1 : j][::-1]
                    improved = True
    return path


def adjacent_distance(centroids, order):
    """Mean 2-D distance between classes that are neighbours in ``order``."""
    C = np.asarray(centroids)[np.asarray(order)]
    if len(C) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(C, axis=0), axis=1).mean())


def shuffle_wins(centroids, order, shuffles=100, seed=0):
    """How many of ``shuffles`` random orderings have a strictly larger adjacent distance."""
    rng = np.random.default_rng(seed)
    ours = adjacent_distance(centroids, order)
    n = len(centroids)
    return sum(adjacent_distance(centroids, rng.permutation(n)) > ours for _ in range(shuffles))


def reorder(matrix, order):
    m = np.asarray(matrix)
    return m[np.ix_(order, order)]
