import numpy as np
import pytest

from cellgraph.dataset import CellTable
from cellgraph.graphs import (
    CellGraph,
    GraphError,
    assemble_training_graph,
    connected_components,
    knn_feature_graph,
    normalize_adjacency,
    read_edge_list,
    spatial_knn_graph,
    write_edge_list,
)


def edges_as_set(g):
    return {(int(s), int(d)) for s, d in g.edges}


def test_knn_line_example():
    X = np.array([[0.0], [1.0], [10.0]])
    g = knn_feature_graph(X, k=1)
    assert edges_as_set(g) == {(0, 1), (1, 0), (2, 1)}


def test_knn_edge_count_exact():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    for k in (1, 3, 7, 50):
        g = knn_feature_graph(X, k)
        take = min(k, 39)
        assert g.n_edges == take * 40
        out_degrees = np.bincount(g.edges[:, 0], minlength=40)
        assert np.all(out_degrees == take)


def test_knn_duplicate_points_tie_break():
    X = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    g = knn_feature_graph(X, k=1)
    # all distances tie at 0; lower index wins
    assert edges_as_set(g) == {(0, 1), (1, 0), (2, 0)}


def test_knn_tie_break_at_boundary():
    # node 0 equidistant to 1, 2, 3; k=2 must pick the two lowest indices
    X = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    g = knn_feature_graph(X, k=2)
    nbrs0 = sorted(d for s, d in edges_as_set(g) if s == 0)
    assert nbrs0 == [1, 2]


def test_knn_cosine_metric():
    X = np.array([[1.0, 0.0], [2.0, 0.001], [0.0, 1.0]])
    g = knn_feature_graph(X, k=1, metric="cosine")
    assert (0, 1) in edges_as_set(g)


def test_knn_errors():
    with pytest.raises(GraphError):
        knn_feature_graph(np.zeros((1, 2)), 1)
    with pytest.raises(GraphError):
        knn_feature_graph(np.zeros((3, 2)), 0)


def test_spatial_two_samples_no_cross_edges():
    centroids = np.array([[0, 0], [1, 0], [2, 0], [0, 5], [1, 5], [2, 5]], dtype=float)
    sample_ids = ["a", "a", "a", "b", "b", "b"]
    g = spatial_knn_graph(centroids, sample_ids, k=1)
    assert g.n_edges == 6
    for s, d in edges_as_set(g):
        assert sample_ids[s] == sample_ids[d]


def test_spatial_single_cell_sample_warns():
    centroids = np.array([[0, 0], [0, 1], [9, 9]], dtype=float)
    sample_ids = ["a", "a", "b"]
    with pytest.warns(UserWarning, match="no spatial edges"):
        g = spatial_knn_graph(centroids, sample_ids, k=1)
    assert g.n_edges == 2


def test_spatial_duplicate_centroids_deterministic():
    centroids = np.zeros((3, 2))
    g1 = spatial_knn_graph(centroids, ["a"] * 3, k=1)
    g2 = spatial_knn_graph(centroids, ["a"] * 3, k=1)
    assert edges_as_set(g1) == edges_as_set(g2)


def test_normalize_two_nodes():
    g = CellGraph(
        n_nodes=2,
        edges=np.array([[0, 1]]),
        weights=np.ones(1),
        node_keys=[("", 0), ("", 1)],
    )
    dense = normalize_adjacency(g).to_dense()
    np.testing.assert_allclose(dense, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_normalize_triangle():
    g = CellGraph(
        n_nodes=3,
        edges=np.array([[0, 1], [1, 2], [2, 0]]),
        weights=np.ones(3),
        node_keys=[("", i) for i in range(3)],
    )
    dense = normalize_adjacency(g).to_dense()
    np.testing.assert_allclose(dense, np.full((3, 3), 1.0 / 3.0), atol=1e-15)


def test_normalize_isolated_node():
    g = CellGraph(n_nodes=1, edges=np.zeros((0, 2), dtype=np.int64), weights=np.zeros(0), node_keys=[("", 0)])
    dense = normalize_adjacency(g).to_dense()
    assert dense[0, 0] == 1.0


def test_normalized_adjacency_exactly_symmetric():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 3))
    adj = normalize_adjacency(knn_feature_graph(X, 4))
    dense = adj.to_dense()
    assert np.max(np.abs(dense - dense.T)) == 0.0
    assert np.all(dense[dense > 0] <= 1.0)
    degrees = (dense > 0).sum(axis=1)
    assert np.all(dense.sum(axis=1) <= degrees.max())


def test_spectral_radius_at_most_one():
    rng = np.random.default_rng(9)
    for seed in range(3):
        X = np.random.default_rng(seed).normal(size=(25, 4))
        adj = normalize_adjacency(knn_feature_graph(X, 3))
        v = rng.normal(size=25)
        v /= np.linalg.norm(v)
        csr = adj.to_csr()
        for _ in range(200):
            w = csr @ v
            norm = np.linalg.norm(w)
            v = w / norm
        assert norm <= 1.0 + 1e-9


def make_table(sample_id, ids, features, labels=None, centroids=None):
    n = len(ids)
    return CellTable(
        cell_ids=np.asarray(ids, dtype=np.int64),
        sample_ids=[sample_id] * n,
        centroids=np.asarray(centroids if centroids is not None else np.zeros((n, 2)), dtype=float),
        labels=np.asarray(labels if labels is not None else np.zeros(n), dtype=np.int64),
        features=np.asarray(features, dtype=float),
        feature_names=[f"f{j}" for j in range(np.asarray(features).shape[1])],
    )


def test_assemble_sorts_by_sample_then_cell():
    t1 = make_table("s02", [2, 1], [[1.0], [2.0]])
    t2 = make_table("s01", [5], [[3.0]])
    graph, X, y = assemble_training_graph([t1, t2], "feature", k=1)
    assert graph.node_keys == [("s01", 5), ("s02", 1), ("s02", 2)]
    np.testing.assert_array_equal(X.ravel(), [3.0, 2.0, 1.0])


def test_assemble_spatial_components_lower_bound():
    tables = [
        make_table(f"s{i}", [1, 2, 3], np.zeros((3, 1)), centroids=[[0, 0], [1, 0], [2, 0]])
        for i in range(3)
    ]
    graph, _, _ = assemble_training_graph(tables, "spatial", k=1)
    assert connected_components(graph) >= 3


def test_assemble_pools_every_cell():
    rng = np.random.default_rng(17)
    tables = [
        make_table(
            f"s{i:02d}", range(1, 16), rng.normal(size=(15, 2)), centroids=rng.uniform(0, 50, (15, 2))
        )
        for i in range(20)
    ]
    graph, X, y = assemble_training_graph(tables, "spatial", k=3)
    assert graph.n_nodes == 20 * 15
    assert X.shape == (300, 2) and len(y) == 300
    assert connected_components(graph) >= 20


def test_assemble_single_sample_matches_direct():
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(6, 2))
    t = make_table("s01", range(1, 7), feats)
    graph, X, _ = assemble_training_graph([t], "feature", k=2)
    direct = knn_feature_graph(feats, 2)
    assert edges_as_set(graph) == edges_as_set(direct)


def test_assemble_feature_mismatch_errors():
    t1 = make_table("a", [1], [[1.0, 2.0]])
    t2 = make_table("b", [1], [[1.0]])
    with pytest.raises(GraphError, match="mismatch"):
        assemble_training_graph([t1, t2], "feature", k=1)


def test_edge_list_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    g = knn_feature_graph(rng.normal(size=(10, 2)), 3)
    path = str(tmp_path / "g.edges")
    write_edge_list(path, g)
    back = read_edge_list(path)
    assert back.n_nodes == g.n_nodes
    np.testing.assert_array_equal(back.edges, g.edges)
    np.testing.assert_array_equal(back.weights, g.weights)
    header = open(path).readline().strip()
    assert header == "# nodes 10"


def test_edge_budget_scaled_down():
    # same edge/node ratio as the production graph at desk scale
    rng = np.random.default_rng(15)
    X = rng.normal(size=(4050, 8))
    g = knn_feature_graph(X, 5)
    assert g.n_edges == 4050 * 5
