"""Spatially blocked cross-validation folds.

Zones are partitioned into k contiguous blocks by capacity-balanced k-means
on centroids, so every fold holds all timestamps of its zones and fold sizes
stay within one zone of N/k.
"""

from __future__ import annotations

import numpy as np

from ..core import RngSeed
from ..errors import ParameterError


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2),
            axis=1,
        )
        total = d2.sum()
        if total == 0:
            centers.append(points[rng.integers(n)])
            continue
        probs = d2 / total
        centers.append(points[rng.choice(n, p=probs)])
    return np.asarray(centers)


def _balanced_assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Greedy nearest-center assignment under per-center capacities."""
    n, k = points.shape[0], centers.shape[0]
    cap = np.full(k, n // k)
    cap[: n % k] += 1
    d = np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    order = np.argsort(d, axis=None, kind="stable")
    labels = np.full(n, -1, dtype=int)
    remaining = cap.copy()
    assigned = 0
    for flat in order:
        i, c = divmod(int(flat), k)
        if labels[i] != -1 or remaining[c] == 0:
            continue
        labels[i] = c
        remaining[c] -= 1
        assigned += 1
        if assigned == n:
            break
    return labels


def spatial_cv_folds(centroids, k: int = 5, seed: RngSeed | int = 0, max_iter: int = 50) -> np.ndarray:
    """Per-zone fold labels in 0..k-1; deterministic given the seed."""
    points = np.asarray(centroids, dtype=float)
    if points.ndim != 2:
        points = np.array([z.centroid for z in centroids], dtype=float)
    n = points.shape[0]
    if k > n:
        raise ParameterError(f"k={k} exceeds the zone count {n}")
    rng = (seed if isinstance(seed, RngSeed) else RngSeed(seed)).derive("spatial-cv", k)
    centers = _kmeans_pp_init(points, k, rng)
    labels = _balanced_assign(points, centers)
    for _ in range(max_iter):
        new_centers = np.vstack(
            [points[labels == c].mean(axis=0) for c in range(k)]
        )
        new_labels = _balanced_assign(points, new_centers)
        if (new_labels == labels).all():
            break
        labels, centers = new_labels, new_centers
    return labels
