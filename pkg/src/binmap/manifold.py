"""Mutual-kNN graphs and tangent-space alignment embeddings of cue vectors."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class NeighborGraph:
    n_points: int
    adjacency: List[np.ndarray]      # sorted neighbor indices per point
    isolated: np.ndarray             # points without any edge

    def matrix(self) -> sparse.csr_matrix:
        rows = np.repeat(np.arange(self.n_points), [a.size for a in self.adjacency])
        cols = np.concatenate(self.adjacency) if self.n_points else np.zeros(0, int)
        data = np.ones(rows.size, dtype=bool)
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_points, self.n_points))

    def degree(self) -> np.ndarray:
        return np.array([a.size for a in self.adjacency])


@dataclass(frozen=True)
class Embedding:
    coords: np.ndarray               # (n_kept, out_dim)
    eigvals: np.ndarray              # (out_dim,)
    kept_indices: np.ndarray
    dropped_indices: np.ndarray


def knn_indices(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Indices of each point's ``k`` nearest others; equal distances favor the lower index."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    out = np.empty((n, k), dtype=int)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        # direct differences keep duplicate points exactly tied
        d2 = cdist(points[start:stop], points, "sqeuclidean")
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def symmetric_knn(points: np.ndarray, k: int) -> NeighborGraph:
    """Mutual kNN graph: ``i ~ j`` iff each is among the other's ``k`` nearest."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if k < 1 or n <= k:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    nn = knn_indices(points, k)
    directed = sparse.csr_matrix((np.ones(n * k, dtype=bool),
                                  (np.repeat(np.arange(n), k), nn.ravel())), shape=(n, n))
    mutual = directed.multiply(directed.T).tocsr()
    adjacency = [np.sort(mutual.indices[mutual.indptr[i]:mutual.indptr[i + 1]])
                 for i in range(n)]
    isolated = np.array([i for i, a in enumerate(adjacency) if a.size == 0], dtype=int)
    return NeighborGraph(n, adjacency, isolated)


def _largest_component(graph: NeighborGraph, usable: np.ndarray) -> np.ndarray:
    mat = graph.matrix()
    idx = np.flatnonzero(usable)
    sub = mat[idx][:, idx]
    n_comp, labels = connected_components(sub, directed=False)
    if n_comp == 0:
        return idx
    sizes = np.bincount(labels)
    return idx[labels == np.argmax(sizes)]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def ltsa_embed(points: np.ndarray, k: int, intrinsic_dim: int = 2, out_dim: int = None,
               eigen_order: str = "smallest") -> Embedding:
    """Local tangent-space alignment on the mutual kNN graph.

    Each point's neighborhood is itself plus its graph neighbors; points with
    fewer than ``intrinsic_dim + 1`` members, and points outside the largest
    connected component, are dropped. ``eigen_order="smallest"`` keeps the
    smallest eigenpairs of the alignment matrix after the constant one;
    ``"largest"`` keeps the largest ones.
    """
    points = np.asarray(points, dtype=float)
    L = intrinsic_dim
    out_dim = L + 1 if out_dim is None else out_dim
    if k < L + 1:
        raise ValueError(f"k={k} is below intrinsic_dim + 1 = {L + 1}")
    if eigen_order not in ("smallest", "largest"):
        raise ValueError(f"unknown eigen_order {eigen_order!r}")
    graph = symmetric_knn(points, k)
    usable = graph.degree() + 1 >= L + 1
    kept = _largest_component(graph, usable)
    n = kept.size
    if n <= out_dim + 1:
        raise ValueError(f"only {n} connected points remain, too few for {out_dim} coordinates")
    position = np.full(points.shape[0], -1)
    position[kept] = np.arange(n)

    align = np.zeros((n, n))
    for i in kept:
        members = np.concatenate([[i], graph.adjacency[i]])
        members = members[position[members] >= 0]
        local = points[members] - points[members].mean(axis=0)
        u, _, _ = np.linalg.svd(local, full_matrices=False)
        basis = np.column_stack([np.full(members.size, 1.0 / np.sqrt(members.size)),
                                 u[:, :L]])
        pos = position[members]
        align[np.ix_(pos, pos)] += np.eye(members.size) - basis @ basis.T

    vals, vecs = np.linalg.eigh(align)
    if eigen_order == "smallest":
        sel = np.arange(1, out_dim + 1)
    else:
        sel = np.arange(n - 1, n - 1 - out_dim, -1)
    dropped = np.setdiff1d(np.arange(points.shape[0]), kept)
    return Embedding(_fix_signs(vecs[:, sel]), vals[sel], kept, dropped)


def pca_embed(points: np.ndarray, out_dim: int) -> Embedding:
    """Projection of centered points on the ``out_dim`` leading principal axes."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n <= out_dim:
        raise ValueError(f"need more than {out_dim} points, got {n}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dim]
    vals, vecs = np.maximum(vals[order], 0.0), _fix_signs(vecs[:, order])
    informative = vals > 1e-12 * max(vals[0], 1e-300)
    if not informative.all():
        warnings.warn(f"degenerate covariance: only {int(informative.sum())} of {out_dim} "
                      "axes carry variance", RuntimeWarning)
    return Embedding(centered @ vecs, vals, np.arange(n), np.zeros(0, dtype=int))


def trustworthiness(high: np.ndarray, low: np.ndarray, k: int = 10) -> float:
    """Neighborhood preservation of an embedding (1 is perfect)."""
    from sklearn.manifold import trustworthiness as _tw
    return float(_tw(high, low, n_neighbors=k))


def procrustes_residual(reference: np.ndarray, coords: np.ndarray) -> float:
    """RMS residual of the best affine fit of ``coords`` onto ``reference``."""
    design = np.column_stack([coords, np.ones(coords.shape[0])])
    coef, *_ = np.linalg.lstsq(design, reference, rcond=None)
    resid = reference - design @ coef
    return float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))


def embedding_residual(a: Embedding, b: Embedding) -> float:
    """Affine-alignment residual between two embeddings on their common points."""
    common, ia, ib = np.intersect1d(a.kept_indices, b.kept_indices, return_indices=True)
    if common.size == 0:
        raise ValueError("embeddings share no points")
    return procrustes_residual(a.coords[ia], b.coords[ib])
