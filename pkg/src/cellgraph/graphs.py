"""Cell graphs: feature-similarity kNN, spatial-proximity kNN, and the
degree-normalized adjacency used for feature propagation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

_CHUNK_ROWS = 1024


class GraphError(Exception):
    pass


@dataclass
class CellGraph:
    """Directed weighted edge list over cells.

    ``node_keys[i]`` is the (sample_id, cell_id) behind node i. Self-loops
    are never stored; normalization adds them.
    """

    n_nodes: int
    edges: np.ndarray  # (m, 2) int64 (src, dst)
    weights: np.ndarray  # (m,) float64, all > 0
    node_keys: list  # of (sample_id, cell_id)

    def __post_init__(self):
        if len(self.edges) != len(self.weights):
            raise GraphError("edge and weight counts differ")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= self.n_nodes):
            raise GraphError("edge endpoint out of range")
        if len(self.edges) and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise GraphError("self-loops are not stored in a CellGraph")
        if len(self.weights) and np.any(self.weights <= 0):
            raise GraphError("edge weights must be positive")

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass
class NormAdj:
    """Symmetric normalized adjacency in CSR layout.

    Built as D^{-1/2} (A + I) D^{-1/2} over the symmetrized edge set, where
    D holds the row sums of A + I. All entries lie in (0, 1] and the
    spectral radius is at most 1.
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def matmul(self, X: np.ndarray) -> np.ndarray:
        return self.to_csr() @ X

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


def _pairwise_sq_euclidean(Q: np.ndarray, X: np.ndarray) -> np.ndarray:
    sq = (Q * Q).sum(axis=1)[:, None] + (X * X).sum(axis=1)[None, :] - 2.0 * (Q @ X.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def _pairwise_cosine(Q: np.ndarray, X: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(Q, axis=1)
    xn = np.linalg.norm(X, axis=1)
    qn[qn == 0] = 1.0
    xn = np.where(xn == 0, 1.0, xn)
    return 1.0 - (Q / qn[:, None]) @ (X / xn[:, None]).T


def _knn_rows(D: np.ndarray, row_offset: int, k: int, out: list) -> None:
    """Append the k nearest columns of each row, ties broken by lower index.

    Rows refer to query points ``row_offset + i``; their self column is
    excluded. Exact tie handling: all strictly closer columns are taken,
    then equal-distance columns in ascending index order.
    """
    m, n = D.shape
    for i in range(m):
        drow = D[i]
        drow[row_offset + i] = np.inf
        take = min(k, n - 1)
        # argpartition gives candidates; widen deterministically on boundary ties
        cand = np.argpartition(drow, take - 1)[:take]
        thresh = drow[cand].max()
        if np.count_nonzero(drow <= thresh) > take:
            closer = np.flatnonzero(drow < thresh)
            at = np.flatnonzero(drow == thresh)
            need = take - len(closer)
            chosen = np.concatenate((closer, at[:need]))
        else:
            chosen = cand
        order = np.lexsort((chosen, drow[chosen]))
        out.append(chosen[order])


def knn_feature_graph(X: np.ndarray, k: int, metric: str = "euclidean", node_keys: list | None = None) -> CellGraph:
    """Directed kNN graph in feature space; each node points to its
    min(k, n-1) nearest neighbors with weight 1, ties broken by lower index."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise GraphError("need at least 2 points")
    if k < 1:
        raise GraphError("k must be >= 1")
    if metric not in ("euclidean", "cosine"):
        raise GraphError(f"unknown metric {metric!r}")
    n = X.shape[0]
    take = min(k, n - 1)
    neighbor_lists: list = []
    for start in range(0, n, _CHUNK_ROWS):
        Q = X[start : start + _CHUNK_ROWS]
        if metric == "euclidean":
            D = _pairwise_sq_euclidean(Q, X)
        else:
            D = _pairwise_cosine(Q, X)
        _knn_rows(D, start, k, neighbor_lists)
    src = np.repeat(np.arange(n, dtype=np.int64), take)
    dst = np.concatenate(neighbor_lists).astype(np.int64)
    edges = np.stack([src, dst], axis=1)
    keys = node_keys if node_keys is not None else [("", i) for i in range(n)]
    return CellGraph(n_nodes=n, edges=edges, weights=np.ones(len(edges)), node_keys=keys)


def spatial_knn_graph(centroids: np.ndarray, sample_ids: list, k: int, node_keys: list | None = None) -> CellGraph:
    """Per-sample kNN graph on 2-D centroids; samples stay disjoint.

    A sample with fewer than 2 cells contributes no edges (with a warning).
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    n = centroids.shape[0]
    if n < 1:
        raise GraphError("empty centroid set")
    if k < 1:
        raise GraphError("k must be >= 1")
    if len(sample_ids) != n:
        raise GraphError("sample_ids length does not match centroids")
    sample_arr = np.array(sample_ids)
    edges = []
    for sid in sorted(set(sample_ids)):
        idx = np.flatnonzero(sample_arr == sid)
        if len(idx) < 2:
            warnings.warn(f"sample {sid} has {len(idx)} cell(s); no spatial edges")
            continue
        local = knn_feature_graph(centroids[idx], k, metric="euclidean")
        edges.append(idx[local.edges])
    all_edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    keys = node_keys if node_keys is not None else [("", i) for i in range(n)]
    return CellGraph(n_nodes=n, edges=all_edges, weights=np.ones(len(all_edges)), node_keys=keys)


def normalize_adjacency(g: CellGraph) -> NormAdj:
    """Symmetrize, add unit self-loops, and degree-normalize.

    An undirected edge exists where either direction is present; its weight
    is the max of the stored directions.
    """
    n = g.n_nodes
    if len(g.edges):
        # collapse duplicate (src, dst) pairs by max weight, then symmetrize by max
        codes = g.edges[:, 0] * n + g.edges[:, 1]
        order = np.lexsort((g.weights, codes))
        codes, weights = codes[order], g.weights[order]
        last = np.concatenate((codes[1:] != codes[:-1], [True]))
        codes, weights = codes[last], weights[last]
        A = sp.coo_matrix((weights, (codes // n, codes % n)), shape=(n, n)).tocsr()
        A = A.maximum(A.T)
    else:
        A = sp.csr_matrix((n, n))
    A_tilde = (A + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(A_tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    D = sp.diags(inv_sqrt)
    A_hat = (D @ A_tilde @ D).tocsr()
    A_hat.sort_indices()
    return NormAdj(
        n_nodes=n,
        indptr=A_hat.indptr.copy(),
        indices=A_hat.indices.copy(),
        values=A_hat.data.copy(),
    )


def assemble_training_graph(tables: list, kind: str, k: int, metric: str = "euclidean"):
    """Pool per-sample cell tables into one training graph.

    Node order is sorted by (sample_id, cell_id). ``kind`` selects a global
    feature-space kNN or the disjoint union of per-sample spatial graphs.
    Returns (graph, feature matrix, label vector).
    """
    if kind not in ("feature", "spatial"):
        raise GraphError(f"unknown graph kind {kind!r}")
    if not tables:
        raise GraphError("no cell tables given")
    names = tables[0].feature_names
    for t in tables:
        if t.feature_names != names:
            raise GraphError(
                f"feature names mismatch: {t.sample_ids[0] if t.sample_ids else '?'} "
                f"has {len(t.feature_names)} features, expected {len(names)}"
            )
    rows = []
    for t in tables:
        for i in range(len(t)):
            rows.append((t.sample_ids[i], int(t.cell_ids[i]), t.features[i], int(t.labels[i]), t.centroids[i]))
    rows.sort(key=lambda r: (r[0], r[1]))
    node_keys = [(r[0], r[1]) for r in rows]
    X = np.array([r[2] for r in rows])
    y = np.array([r[3] for r in rows], dtype=np.int64)
    centroids = np.array([r[4] for r in rows])
    sample_ids = [r[0] for r in rows]
    if kind == "feature":
        graph = knn_feature_graph(X, k, metric=metric, node_keys=node_keys)
    else:
        graph = spatial_knn_graph(centroids, sample_ids, k, node_keys=node_keys)
    return graph, X, y


def write_edge_list(path: str, g: CellGraph) -> None:
    lines = [f"# nodes {g.n_nodes}"]
    for (src, dst), w in zip(g.edges.tolist(), g.weights.tolist()):
        lines.append(f"{src} {dst} {format(w, '.17g')}")
    from .dataset import _atomic_write

    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_edge_list(path: str) -> CellGraph:
    with open(path, "r") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# nodes "):
        raise GraphError(f"{path}: expected '# nodes N' header")
    n = int(lines[0][len("# nodes ") :])
    edges = np.zeros((len(lines) - 1, 2), dtype=np.int64)
    weights = np.zeros(len(lines) - 1)
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != 3:
            raise GraphError(f"{path}: malformed edge line {ln!r}")
        edges[i] = (int(parts[0]), int(parts[1]))
        weights[i] = float(parts[2])
    return CellGraph(n_nodes=n, edges=edges, weights=weights, node_keys=[("", i) for i in range(n)])


def connected_components(g: CellGraph) -> int:
    """Number of weakly connected components (union-find)."""
    parent = list(range(g.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for src, dst in g.edges.tolist():
        a, b = find(src), find(dst)
        if a != b:
            parent[a] = b
    return len({find(i) for i in range(g.n_nodes)})
