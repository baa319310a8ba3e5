"""Density-peaks clustering with a k-nearest-neighbour density estimate.

Pipeline: local density from the k nearest neighbours, distance to the
nearest denser token, centers as the top ``M`` by density x distance, then
nearest-center assignment. Every tie is resolved in favour of the lower index,
including ties in density, so the whole pipeline is deterministic.

Squared distances are accumulated one coordinate at a time in column order,
which keeps results bit-stable and reproducible by a plain scalar loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError


@dataclass
class DensityProfile:
    rho: np.ndarray
    delta: np.ndarray | None = None
    gamma: np.ndarray | None = None


@dataclass
class ClusterAssignment:
    """Partition of N items into M clusters.

    ``member_of[i]`` indexes into ``centers``; ``centers`` holds item indices
    in ascending order. ``importance`` is the negated center distance.
    """

    member_of: np.ndarray
    centers: np.ndarray
    center_distance: np.ndarray
    importance: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.member_of == j)

    def ranked_members(self, j: int) -> list[int]:
        """Cluster j's items, most important first, ties to lower index."""
        idx = self.members(j)
        return sorted(idx.tolist(), key=lambda i: (-self.importance[i], i))

    @classmethod
    def identity(cls, n: int) -> "ClusterAssignment":
        ar = np.arange(n)
        zeros = np.zeros(n)
        return cls(ar.copy(), ar, zeros, -zeros)


def as_matrix(embeddings) -> np.ndarray:
    x = np.asarray(embeddings)
    if np.iscomplexobj(x):
        out = np.empty(x.shape[:-1] + (2 * x.shape[-1],))
        out[..., 0::2] = x.real
        out[..., 1::2] = x.imag
        x = out
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"embeddings must be a 2D array (N, width), got shape {x.shape}")
    return x


def squared_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Pairwise squared Euclidean distances, summed in fixed coordinate order."""
    y = x if y is None else y
    d2 = np.zeros((x.shape[0], y.shape[0]))
    diff = np.empty_like(d2)
    for c in range(x.shape[1]):
        np.subtract(x[:, c, None], y[None, :, c], out=diff)
        np.multiply(diff, diff, out=diff)
        d2 += diff
    return d2


def default_k(n: int) -> int:
    return max(3, math.ceil(math.sqrt(n)))


def cluster_count(ratio: float, n: int) -> int:
    """max(1, round(ratio * n)) with halves rounded up."""
    if not 0 < ratio <= 1:
        raise ParameterError(f"ratio must lie in (0, 1], got {ratio}")
    return max(1, math.floor(ratio * n + 0.5))


def knn_density(embeddings, k: int, d2: np.ndarray | None = None) -> DensityProfile:
    """rho_i = exp(-mean squared distance to the k nearest other tokens)."""
    x = as_matrix(embeddings)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < N={n}, got {k}")
    d2 = squared_distances(x) if d2 is None else d2.copy()
    np.fill_diagonal(d2, np.inf)
    nearest = np.sort(d2, axis=1)[:, :k]
    acc = np.zeros(n)
    for c in range(k):
        acc = acc + nearest[:, c]
    # scalar libm exp: numpy's vectorised exp is not bit-stable across builds
    return DensityProfile(rho=np.array([math.exp(v) for v in (-acc / k).tolist()]))


def density_order(rho: np.ndarray) -> np.ndarray:
    """Indices from densest to sparsest; equal density goes to the lower index."""
    return np.lexsort((np.arange(len(rho)), -rho))


def fill_delta(profile: DensityProfile, embeddings,
               d2: np.ndarray | None = None) -> DensityProfile:
    rho = profile.rho
    n = len(rho)
    dist = np.sqrt(squared_distances(as_matrix(embeddings)) if d2 is None else d2)
    rank = np.empty(n, dtype=np.int64)
    rank[density_order(rho)] = np.arange(n)
    denser = rank[None, :] < rank[:, None]
    masked = np.where(denser, dist, np.inf)
    delta = masked.min(axis=1)
    # only the single densest token has no denser neighbour
    delta[~denser.any(axis=1)] = dist.max()
    return DensityProfile(rho=rho, delta=delta, gamma=rho * delta)


def select_centers(profile: DensityProfile, M: int) -> np.ndarray:
    n = len(profile.rho)
    if not 1 <= M <= n:
        raise ParameterError(f"M must satisfy 1 <= M <= N={n}, got {M}")
    if profile.gamma is None:
        raise ContractError("profile has no delta/gamma; call fill_delta first")
    order = np.lexsort((np.arange(n), -profile.gamma))
    return np.sort(order[:M])


def assign_members(embeddings, centers, d2: np.ndarray | None = None) -> ClusterAssignment:
    x = as_matrix(embeddings)
    centers = np.asarray(centers, dtype=np.int64)
    if len(centers) == 0 or len(np.unique(centers)) != len(centers):
        raise ContractError("centers must be distinct and non-empty")
    d2 = squared_distances(x, x[centers]) if d2 is None else d2[:, centers]
    member_of = np.argmin(d2, axis=1)
    # a center always owns itself, even if a duplicate center sits at distance 0
    member_of[centers] = np.arange(len(centers))
    dist = np.sqrt(d2[np.arange(len(x)), member_of])
    dist[centers] = 0.0
    return ClusterAssignment(member_of, centers, dist, -dist)


def dpc_knn(embeddings, M: int, k: int | None = None) -> ClusterAssignment:
    """Full density-peaks pipeline producing M clusters."""
    x = as_matrix(embeddings)
    n = x.shape[0]
    if not 1 <= M <= n:
        raise ParameterError(f"M must satisfy 1 <= M <= N={n}, got {M}")
    if M == n:
        return ClusterAssignment.identity(n)
    k = min(default_k(n) if k is None else k, n - 1)
    d2 = squared_distances(x)
    profile = fill_delta(knn_density(x, k, d2), x, d2)
    return assign_members(x, select_centers(profile, M), d2)


def temporal_cluster(frame_means, ratio: float, k: int | None = None) -> ClusterAssignment:
    """Group T frames into max(1, round(ratio*T)) events from per-frame mean embeddings."""
    x = as_matrix(frame_means)
    if x.shape[0] < 1:
        raise ContractError("need at least one frame")
    return dpc_knn(x, cluster_count(ratio, x.shape[0]), k)
