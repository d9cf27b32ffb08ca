"""k-means, spectral clustering and cluster-count selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

__all__ = [
    "ClusterAssignment",
    "kmeans",
    "knn_affinity",
    "normalized_laplacian",
    "spectral_cluster",
    "select_k",
    "elbow_from_inertia",
    "eigengap_from_spectrum",
    "same_partition",
]


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    inertia: float
    centroids: np.ndarray | None = None
    history: list[float] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return len(np.unique(self.labels)) < self.k

    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.k).tolist()


def _plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(points, centers, max_iter):
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = cdist(points, centers, "sqeuclidean")
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(points)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            members = labels == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
            else:
                # reseed at the point lying farthest from its own centroid
                far = np.argmax(np.sum((points - centers[labels]) ** 2, axis=1))
                centers[c] = points[far]
                labels = labels.copy()
                labels[far] = c
    d2 = cdist(points, centers, "sqeuclidean")
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return labels, centers, inertia, history


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeds; the best of ``restarts`` runs (seeded seed + r) wins."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"kmeans: k={k} must lie in [1, {n}]")
    best = None
    for r in range(max(1, restarts)):
        rng = np.random.default_rng(seed + r)
        labels, centers, inertia, history = _lloyd(points, _plus_plus(points, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(labels, k, inertia, centers, history)
    if best.degenerate:
        log.warning("kmeans: %d of %d clusters are empty", k - len(np.unique(best.labels)), k)
    return best


def knn_affinity(points, knn_k: int) -> np.ndarray:
    """Binary k-NN adjacency, symmetrized by union."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    kk = min(knn_k, n - 1)
    a = np.zeros((n, n))
    if kk < 1:
        return a
    dist = cdist(points, points)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :kk]
    a[np.repeat(np.arange(n), kk), order.ravel()] = 1.0
    return np.maximum(a, a.T)


def normalized_laplacian(affinity) -> np.ndarray:
    a = np.asarray(affinity, dtype=np.float64)
    deg = a.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(a)) - inv[:, None] * a * inv[None, :]


def _spectrum(affinity):
    vals, vecs = np.linalg.eigh(normalized_laplacian(affinity))
    return np.clip(vals, 0.0, None), vecs


def spectral_cluster(points=None, k: int = 2, knn_k: int = 10, seed: int = 0, affinity=None,
                     restarts: int = 10) -> ClusterAssignment:
    """Normalized-Laplacian spectral clustering on a binary k-NN graph.

    Pass ``affinity`` to cluster a precomputed adjacency matrix instead of points.
    """
    a = knn_affinity(points, knn_k) if affinity is None else np.asarray(affinity, dtype=np.float64)
    n = len(a)
    if k < 1 or k > n:
        raise ValueError(f"spectral_cluster: k={k} must lie in [1, {n}]")
    _, vecs = _spectrum(a)
    u = vecs[:, :k]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    u = np.divide(u, norms, out=np.zeros_like(u), where=norms > 0)
    result = kmeans(u, k, seed=seed, restarts=restarts)
    result.centroids = None
    return result


def elbow_from_inertia(ks: Sequence[int], inertias: Sequence[float]) -> int:
    """k at the largest second difference of the inertia curve.

    Flat or too-short curves return the smallest k with a warning.
    """
    ks = list(ks)
    inertia = np.asarray(inertias, dtype=np.float64)
    if len(ks) < 3:
        log.warning("elbow: fewer than three k values; returning the smallest")
        return ks[0]
    second = (inertia[:-2] - inertia[1:-1]) - (inertia[1:-1] - inertia[2:])
    if np.allclose(second, second[0], rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(inertia).max()))):
        log.warning("elbow: degenerate inertia curve; returning the smallest k")
        return ks[0]
    return ks[1 + int(np.argmax(second))]


def eigengap_from_spectrum(eigenvalues: Sequence[float], k_range: Sequence[int]) -> int:
    """k maximizing lambda_{k+1} - lambda_k (1-indexed ascending spectrum)."""
    lam = np.sort(np.asarray(eigenvalues, dtype=np.float64))
    candidates = [k for k in k_range if 1 <= k < len(lam)]
    if not candidates:
        raise ValueError("eigengap: no k in range below the spectrum size")
    gaps = [lam[k] - lam[k - 1] for k in candidates]
    return candidates[int(np.argmax(gaps))]


def select_k(points, k_range: Sequence[int], method: str = "eigengap", seed: int = 0, knn_k: int = 10,
             affinity=None) -> int:
    k_range = sorted(k_range)
    if method == "elbow":
        points = np.asarray(points, dtype=np.float64)
        if k_range[0] < 1 or k_range[-1] > len(points):
            raise ValueError("select_k: k range outside [1, n]")
        inertias = [kmeans(points, k, seed=seed).inertia for k in k_range]
        return elbow_from_inertia(k_range, inertias)
    if method == "eigengap":
        a = knn_affinity(points, knn_k) if affinity is None else np.asarray(affinity, dtype=np.float64)
        vals, _ = _spectrum(a)
        return eigengap_from_spectrum(vals, k_range)
    raise ValueError(f"unknown selection method {method!r}")


def same_partition(a, b) -> bool:
    """True when two label vectors induce the same partition."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return False
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))
