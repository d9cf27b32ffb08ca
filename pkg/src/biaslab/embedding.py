"""k-NN geodesics, classical MDS, Isomap, and box-filter resizing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

__all__ = [
    "EmbeddingConfig",
    "Geodesics",
    "knn_geodesics",
    "classical_mds",
    "jacobi_eigh",
    "isomap",
    "area_matrix",
    "resize",
    "downscale",
]


@dataclass(frozen=True)
class EmbeddingConfig:
    k_neighbors: int = 10
    target_dims: int = 2
    solver: str = "lapack"

    def __post_init__(self):
        if self.k_neighbors < 1 or self.target_dims < 1:
            raise ValueError("k_neighbors and target_dims must be >= 1")
        if self.solver not in ("lapack", "jacobi"):
            raise ValueError(f"unknown eigensolver {self.solver!r}")


class Geodesics(NamedTuple):
    distances: np.ndarray
    repairs: int


def _knn_graph(dist: np.ndarray, k: int) -> np.ndarray:
    """Union-symmetrized k-NN edge weights; 0 marks a missing edge."""
    n = len(dist)
    order = np.argsort(dist + np.diag(np.full(n, np.inf)), axis=1, kind="stable")[:, :k]
    w = np.zeros_like(dist)
    rows = np.repeat(np.arange(n), k)
    w[rows, order.ravel()] = dist[rows, order.ravel()]
    return np.maximum(w, w.T)


def _connect(w: np.ndarray, dist: np.ndarray) -> int:
    """Add shortest bridging edges until the graph is connected; returns the number added."""
    repairs = 0
    while True:
        count, comp = connected_components(csr_matrix(w), directed=False)
        if count <= 1:
            return repairs
        across = np.where(comp[:, None] != comp[None, :], dist, np.inf)
        i, j = np.unravel_index(np.argmin(across), across.shape)
        w[i, j] = w[j, i] = dist[i, j]
        repairs += 1
        log.info("knn_geodesics: bridged components with edge (%d, %d)", i, j)


def knn_geodesics(points, k: int = 10) -> Geodesics:
    """All-pairs shortest paths over the Euclidean k-NN graph.

    Disconnected graphs are repaired by repeatedly adding the single shortest
    edge between different components. Duplicate points share a row.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k + 1:
        raise ValueError(f"knn_geodesics: need at least k+1={k + 1} points, got {n}")
    # zero-length edges vanish in sparse graphs, so collapse duplicates first
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    m = len(unique)
    if m == 1:
        return Geodesics(np.zeros((n, n)), 0)
    dist = cdist(unique, unique)
    w = _knn_graph(dist, min(k, m - 1))
    repairs = _connect(w, dist)
    geo = shortest_path(csr_matrix(w), method="D", directed=False)
    geo = np.minimum(geo, geo.T)
    np.fill_diagonal(geo, 0.0)
    return Geodesics(geo[np.ix_(inverse, inverse)], repairs)


def jacobi_eigh(a, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors as columns), unsorted.
    """
    a = np.array(a, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        log.warning("jacobi_eigh: did not converge in %d sweeps", max_sweeps)
    return np.diag(a).copy(), v


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def classical_mds(distances, target_dims: int, solver: str = "lapack") -> np.ndarray:
    """Coordinates from the top eigenpairs of the double-centered -D^2/2.

    Negative eigenvalues are clamped to 0; dimensions beyond the positive
    spectrum come out as zero columns with a warning.
    """
    d = np.asarray(distances, dtype=np.float64)
    n = len(d)
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if target_dims < 1:
        raise ValueError("target_dims must be >= 1")
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ (d**2) @ j
    b = (b + b.T) / 2
    if solver == "jacobi":
        vals, vecs = jacobi_eigh(b)
    elif solver == "lapack":
        vals, vecs = np.linalg.eigh(b)
    else:
        raise ValueError(f"unknown eigensolver {solver!r}")
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], _fix_signs(vecs[:, order])
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    positive = int(np.sum(vals > 1e-12 * scale))
    if target_dims > positive:
        log.warning("classical_mds: only %d positive eigenvalues for %d dims; padding with zeros", positive, target_dims)
    out = np.zeros((n, target_dims))
    keep = min(target_dims, positive, n)
    out[:, :keep] = vecs[:, :keep] * np.sqrt(np.maximum(vals[:keep], 0.0))
    return out


def isomap(points, cfg: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if cfg.target_dims >= len(points):
        raise ValueError("target_dims must be smaller than the number of points")
    geo, _ = knn_geodesics(points, min(cfg.k_neighbors, len(points) - 1))
    out = classical_mds(geo, cfg.target_dims, cfg.solver)
    # duplicates agree only up to rounding after the eigensolver; copy the first row
    _, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    return out[first[inverse.ravel()]]


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) box-filter weights by interval overlap."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize(image, side: int) -> np.ndarray:
    """Area-weighted resample of a 2-D array to side x side."""
    image = np.asarray(image, dtype=np.float64)
    if side < 1:
        raise ValueError("side must be >= 1")
    return area_matrix(image.shape[0], side) @ image @ area_matrix(image.shape[1], side).T


def downscale(image, side: int) -> np.ndarray:
    """Box-filter average to side x side, flattened row-major."""
    image = np.asarray(image, dtype=np.float64)
    if side > min(image.shape):
        raise ValueError("downscale: target side exceeds image side")
    return resize(image, side).ravel()
