import json

import numpy as np
import pytest

from gsp.autodiff import SparseMatrix
from gsp.graph import (Dataset, DatasetError, Graph, dataset_to_dict, degree_features,
                       kshot_split, load_dataset, load_features_csv, make_batch,
                       normalize_adjacency, save_dataset, synthesize_graph_bag, synthesize_sbm)

from oracles import dense_gcn_norm


def adj_from_edges(n, edges):
    return Graph.from_edges(n, edges, np.zeros((n, 1))).adjacency


# ---------------------------------------------------------------- normalization

def test_normalize_single_isolated_node():
    out = normalize_adjacency(adj_from_edges(1, []))
    assert np.array_equal(out.to_dense(), [[1.0]])


def test_normalize_single_edge():
    out = normalize_adjacency(adj_from_edges(2, [[0, 1]]))
    assert np.array_equal(out.to_dense(), np.full((2, 2), 0.5))


def test_normalize_path_graph_matches_dense_oracle():
    edges = [[0, 1], [1, 2], [2, 3], [3, 4]]
    A = np.zeros((5, 5))
    for u, v in edges:
        A[u, v] = A[v, u] = 1
    out = normalize_adjacency(adj_from_edges(5, edges)).to_dense()
    ref = dense_gcn_norm(A)
    assert np.max(np.abs(out - ref)) <= 1e-12
    assert np.max(np.abs(out.sum(axis=1) - ref.sum(axis=1))) <= 1e-12


def test_normalize_existing_self_loop_weight_is_kept():
    a = SparseMatrix.from_dense([[2.0, 1.0], [1.0, 0.0]])
    ref = np.array([[3.0, 1.0], [1.0, 1.0]])
    d = ref.sum(axis=1)
    assert np.allclose(normalize_adjacency(a).to_dense(), ref / np.sqrt(np.outer(d, d)), atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_normalize_is_symmetric(seed):
    ds = synthesize_sbm(3, [7, 8, 9], 0.4, 0.1, 3, seed)
    out = normalize_adjacency(ds.graphs[0].adjacency).to_dense()
    assert np.max(np.abs(out - out.T)) <= 1e-12
    assert np.all(np.isfinite(out))


# ---------------------------------------------------------------- loading

MINIMAL = {"task": "node", "classes": 2,
           "graphs": [{"numNodes": 2, "edges": [[0, 1]], "features": [[1.0, 0.0], [0.0, 1.0]],
                       "nodeLabels": [0, 1]}]}


def write(tmp_path, obj, name="d.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


def test_load_minimal(tmp_path):
    ds = load_dataset(write(tmp_path, MINIMAL))
    assert ds.task == "node" and ds.graphs[0].num_nodes == 2
    assert ds.graphs[0].edges == [(0, 1)]
    assert np.array_equal(ds.graphs[0].adjacency.to_dense(), [[0, 1], [1, 0]])


def _mutate(**changes):
    obj = json.loads(json.dumps(MINIMAL))
    g = obj["graphs"][0]
    for k, v in changes.items():
        if k in ("task", "classes", "graphs"):
            obj[k] = v
        elif v is None and k != "features":
            g.pop(k)
        else:
            g[k] = v
    return obj


MALFORMED = {
    "dangling_edge": (_mutate(numNodes=5, edges=[[0, 99]], features=[[0.0]] * 5,
                              nodeLabels=[0] * 5), "endpoint 99"),
    "negative_endpoint": (_mutate(edges=[[-1, 0]]), "endpoint -1"),
    "label_too_big": (_mutate(nodeLabels=[0, 2]), "label 2"),
    "label_not_int": (_mutate(nodeLabels=[0, "a"]), "nodeLabels\\[1\\]"),
    "missing_edges": (_mutate(edges=None), "edges"),
    "missing_labels": (_mutate(nodeLabels=None), "nodeLabels"),
    "label_count": (_mutate(nodeLabels=[0]), "nodeLabels"),
    "ragged_features": (_mutate(features=[[1.0], [1.0, 2.0]]), "features"),
    "feature_rows": (_mutate(features=[[1.0, 2.0]]), "features"),
    "bad_edge_shape": (_mutate(edges=[[0, 1, 1]]), "edges\\[0\\]"),
    "bad_task": (_mutate(task="edge"), "task"),
    "zero_classes": (_mutate(classes=0), "classes"),
    "no_graphs": (_mutate(graphs=[]), "graphs"),
    "bad_num_nodes": (_mutate(numNodes=0), "numNodes"),
}


@pytest.mark.parametrize("name", sorted(MALFORMED))
def test_loader_rejects_malformed(tmp_path, name):
    obj, pattern = MALFORMED[name]
    with pytest.raises(DatasetError, match=pattern):
        load_dataset(write(tmp_path, obj))


def test_parse_error_reports_line(tmp_path):
    p = write(tmp_path, '{"task": "node",\n "classes": 2,\n "graphs": [\n')
    with pytest.raises(DatasetError, match="line 4"):
        load_dataset(p)


def test_graph_level_missing_label(tmp_path):
    obj = {"task": "graph", "classes": 2, "graphs": [{"numNodes": 1, "edges": [], "features": None}]}
    with pytest.raises(DatasetError, match="graphLabel"):
        load_dataset(write(tmp_path, obj))


def test_featureless_graphs_get_degree_one_hot(tmp_path):
    obj = {"task": "graph", "classes": 2, "graphs": [
        {"numNodes": 3, "edges": [[0, 1], [0, 2]], "features": None, "graphLabel": 0},
        {"numNodes": 2, "edges": [], "features": None, "graphLabel": 1}]}
    ds = load_dataset(write(tmp_path, obj), max_degree=1)
    assert np.array_equal(ds.graphs[0].features, [[0, 1], [0, 1], [0, 1]])
    assert np.array_equal(ds.graphs[1].features, [[1, 0], [1, 0]])
    assert np.array_equal(degree_features(3, [[0, 1], [0, 2]], 5)[0], [0, 0, 1, 0, 0, 0])


def test_undirected_edges_symmetrized():
    g = Graph.from_edges(3, [[0, 1], [2, 1], [1, 0]], np.zeros((3, 1)))
    dense = g.adjacency.to_dense()
    assert np.array_equal(dense, dense.T)
    assert g.edges == [(0, 1), (1, 2)]


def test_round_trip_random_graph(tmp_path):
    rng = np.random.default_rng(0)
    n = 50
    edges = {tuple(sorted(e)) for e in rng.integers(0, n, size=(120, 2)) if e[0] != e[1]}
    labels = rng.integers(0, 3, size=n).tolist()
    labels[5] = None
    obj = {"task": "node", "classes": 3, "graphs": [{
        "numNodes": n, "edges": [list(map(int, e)) for e in sorted(edges)],
        "features": rng.normal(size=(n, 4)).tolist(), "nodeLabels": labels}]}
    ds = load_dataset(write(tmp_path, obj))
    save_dataset(ds, tmp_path / "out.json")
    again = load_dataset(tmp_path / "out.json")
    assert dataset_to_dict(again) == dataset_to_dict(ds)
    assert np.array_equal(again.graphs[0].features, ds.graphs[0].features)
    assert dataset_to_dict(ds)["graphs"][0]["edges"] == obj["graphs"][0]["edges"]
    assert (tmp_path / "out.json").read_text() == json.dumps(dataset_to_dict(again))


def test_features_csv(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("f0,f1\n1,2\n3,4.5\n")
    assert np.array_equal(load_features_csv(p, 2), [[1, 2], [3, 4.5]])
    p.write_text("f0,f1\n1,2\n3\n")
    with pytest.raises(DatasetError, match="line 3"):
        load_features_csv(p)


# ---------------------------------------------------------------- splits

def three_class():
    return synthesize_sbm(3, [40, 35, 35], 0.2, 0.02, 4, seed=1)


def test_one_shot_three_classes():
    sp = kshot_split(three_class(), 1, seed=0)
    assert sp.train.size == 3
    labels = three_class().labels()
    assert sorted(labels[sp.train].tolist()) == [0, 1, 2]


def test_split_deterministic():
    a, b = kshot_split(three_class(), 2, 5), kshot_split(three_class(), 2, 5)
    for x, y in ((a.train, b.train), (a.val, b.val), (a.test, b.test)):
        assert np.array_equal(x, y)
    c = kshot_split(three_class(), 2, 6)
    assert not np.array_equal(a.test, c.test)


def test_val_test_ratio_on_100_remaining():
    # 4 classes of 26 items, 1-shot -> 100 remain
    ds = synthesize_sbm(4, [26] * 4, 0.1, 0.01, 2, seed=0)
    sp = kshot_split(ds, 1, 0)
    assert (sp.val.size, sp.test.size) == (10, 90)


@pytest.mark.parametrize("k,stratified", [(1, False), (3, False), (5, True), (50, False)])
def test_split_partitions_labeled_items(k, stratified):
    ds = three_class()
    sp = kshot_split(ds, k, 3, stratified)
    allids = np.concatenate([sp.train, sp.val, sp.test])
    assert np.array_equal(np.sort(allids), np.arange(110))
    labels = ds.labels()
    for c, size in enumerate((40, 35, 35)):
        assert np.sum(labels[sp.train] == c) == min(k, size)


def test_split_skips_unlabeled_and_rejects_empty_class():
    x = np.zeros((5, 1))
    g = Graph.from_edges(5, [], x, [0, 0, -1, 1, 1])
    sp = kshot_split(Dataset("node", (g,), 2), 1, 0)
    assert 2 not in np.concatenate([sp.train, sp.val, sp.test])
    g = Graph.from_edges(3, [], np.zeros((3, 1)), [0, 0, 0])
    with pytest.raises(DatasetError, match="class 1"):
        kshot_split(Dataset("node", (g,), 2), 1, 0)


def test_graph_level_split():
    ds = synthesize_graph_bag(30, 3, 6, 4, seed=0)
    sp = kshot_split(ds, 1, 0)
    assert sp.train.size == 3 and sp.val.size == 2 and sp.test.size == 25


# ---------------------------------------------------------------- SBM

def test_sbm_disjoint_cliques():
    ds = synthesize_sbm(2, [4, 5], 1.0, 0.0, 3, seed=0)
    A = ds.graphs[0].adjacency.to_dense()
    expected = np.zeros((9, 9))
    expected[:4, :4] = 1
    expected[4:, 4:] = 1
    np.fill_diagonal(expected, 0)
    assert np.array_equal(A, expected)


def test_sbm_sizes_and_determinism():
    a = synthesize_sbm(2, [10, 10], 0.3, 0.05, 5, seed=3)
    b = synthesize_sbm(2, [10, 10], 0.3, 0.05, 5, seed=3)
    assert a.graphs[0].num_nodes == 20
    assert dataset_to_dict(a) == dataset_to_dict(b)


def test_sbm_edge_density_within_three_sigma():
    sizes, p_in, p_out = [15, 20, 25], 0.3, 0.05
    n_in = sum(s * (s - 1) // 2 for s in sizes)
    n_out = sum(sizes) * (sum(sizes) - 1) // 2 - n_in
    blocks = np.repeat(np.arange(3), sizes)
    within = across = 0
    seeds = range(20)
    for seed in seeds:
        g = synthesize_sbm(3, sizes, p_in, p_out, 2, seed).graphs[0]
        for u, v in g.edges:
            if blocks[u] == blocks[v]:
                within += 1
            else:
                across += 1
    for count, trials, p in ((within, n_in * len(seeds), p_in), (across, n_out * len(seeds), p_out)):
        sigma = np.sqrt(trials * p * (1 - p))
        assert abs(count - trials * p) <= 3 * sigma


def test_sbm_features_are_class_correlated():
    ds = synthesize_sbm(2, [100, 100], 0.1, 0.01, 20, seed=0, feature_signal=2.0)
    x, y = ds.graphs[0].features, ds.labels()
    gap = np.linalg.norm(x[y == 0].mean(axis=0) - x[y == 1].mean(axis=0))
    assert gap > 3.0


def test_sbm_rejects_bad_probability():
    with pytest.raises(ValueError):
        synthesize_sbm(2, [3, 3], 1.5, 0.0, 2, 0)


def test_batch_is_block_diagonal():
    ds = synthesize_graph_bag(4, 2, 5, 3, seed=1)
    b = make_batch(ds)
    dense = b.adjacency.to_dense()
    assert dense.shape == (20, 20)
    assert np.all(dense[:5, 5:] == 0)
    assert np.array_equal(b.segment_ids, np.repeat(np.arange(4), 5))
