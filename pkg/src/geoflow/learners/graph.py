"""Zone graph with the degree-normalized convolution operator cached."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..errors import ParameterError


@dataclass(frozen=True, eq=False)
class TrafficGraph:
    """Nonnegative weighted adjacency A and Dhat^{-1/2} (A+I) Dhat^{-1/2}."""

    adjacency: sparse.csr_matrix
    normalized: sparse.csr_matrix

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def dense_normalized(self) -> np.ndarray:
        return self.normalized.toarray()

    @classmethod
    def from_adjacency(cls, A) -> "TrafficGraph":
        A = sparse.csr_matrix(A, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ParameterError("adjacency must be square")
        if A.nnz and A.data.min() < 0:
            raise ParameterError("adjacency weights must be nonnegative")
        A_hat = A + sparse.identity(A.shape[0], format="csr")
        degrees = np.asarray(A_hat.sum(axis=1)).ravel()
        inv_sqrt = 1.0 / np.sqrt(degrees)
        D = sparse.diags(inv_sqrt)
        normalized = sparse.csr_matrix(D @ A_hat @ D)
        return cls(adjacency=A, normalized=normalized)


def build_traffic_graph(zones, radius: float, speed: float = 0.05) -> TrafficGraph:
    """Inverse-travel-time weighted edges between same-city zones closer
    than `radius`; travel time is centroid distance over `speed`."""
    if radius <= 0 or speed <= 0:
        raise ParameterError("radius and speed must be positive")
    pts = np.array([z.centroid for z in zones], dtype=float)
    cities = np.array([z.city for z in zones])
    n = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    same_city = cities[:, None] == cities[None, :]
    mask = same_city & (dist < radius) & (dist > 0)
    rows, cols = np.nonzero(mask)
    weights = speed / dist[rows, cols]  # 1 / travel time
    A = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    return TrafficGraph.from_adjacency(A)
