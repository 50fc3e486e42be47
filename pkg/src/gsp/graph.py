"""Graphs, datasets, JSON I/O, adjacency normalization and few-shot splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import SparseMatrix

__all__ = [
    "Graph",
    "Dataset",
    "FewShotSplit",
    "Batch",
    "DatasetError",
    "normalize_adjacency",
    "load_dataset",
    "save_dataset",
    "dataset_from_dict",
    "dataset_to_dict",
    "load_features_csv",
    "kshot_split",
    "synthesize_sbm",
    "synthesize_graph_bag",
    "degree_features",
    "make_batch",
]

NODE_TASK = "node"
GRAPH_TASK = "graph"


class DatasetError(ValueError):
    """Malformed or invalid dataset input; the message names the location."""


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    adjacency: SparseMatrix
    features: np.ndarray
    node_labels: np.ndarray | None = None  # -1 marks an unlabeled node
    graph_label: int | None = None

    def __post_init__(self):
        if self.adjacency.shape != (self.num_nodes, self.num_nodes):
            raise DatasetError("adjacency must be numNodes x numNodes")
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise DatasetError("features must have one row per node")
        diag = [r for r in range(self.num_nodes)
                if r in self.adjacency.indices[self.adjacency.indptr[r]:self.adjacency.indptr[r + 1]]]
        if diag:
            raise DatasetError(f"self-loops are not stored (node {diag[0]})")
        self.features.flags.writeable = False
        if self.node_labels is not None:
            self.node_labels.flags.writeable = False

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges (u < v), each once."""
        out = []
        a = self.adjacency
        for u in range(self.num_nodes):
            for v in a.indices[a.indptr[u]:a.indptr[u + 1]]:
                if u < v:
                    out.append((u, int(v)))
        return out

    @classmethod
    def from_edges(cls, num_nodes, edges, features, node_labels=None, graph_label=None) -> "Graph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            keep = edges[:, 0] != edges[:, 1]
            edges = edges[keep]
        r = np.concatenate([edges[:, 0], edges[:, 1]])
        c = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = SparseMatrix.from_coo(num_nodes, num_nodes, r, c, np.ones(r.size))
        # duplicates were summed; adjacency is binary
        adj = SparseMatrix(num_nodes, num_nodes, adj.indptr, adj.indices, np.ones(adj.nnz))
        labels = None if node_labels is None else np.array(node_labels, dtype=np.int64)
        return cls(num_nodes, adj, np.array(features, dtype=np.float64), labels, graph_label)


@dataclass(frozen=True)
class Dataset:
    task: str
    graphs: tuple
    num_classes: int

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].features.shape[1]

    def labels(self) -> np.ndarray:
        """Item labels: node labels for node tasks, graph labels otherwise."""
        if self.task == NODE_TASK:
            return self.graphs[0].node_labels
        return np.array([g.graph_label for g in self.graphs], dtype=np.int64)


@dataclass(frozen=True)
class FewShotSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    shots: int
    seed: int


def normalize_adjacency(a: SparseMatrix) -> SparseMatrix:
    """D^-1/2 (A + I) D^-1/2, where D is the degree matrix of A + I."""
    if a.rows != a.cols:
        raise ValueError("adjacency must be square")
    if np.any(a.data < 0):
        raise ValueError("adjacency must be nonnegative")
    n = a.rows
    row_of = np.repeat(np.arange(n), np.diff(a.indptr))
    off = row_of != a.indices
    r = np.concatenate([row_of[off], np.arange(n)])
    c = np.concatenate([a.indices[off], np.arange(n)])
    diag = np.zeros(n)
    np.add.at(diag, row_of[~off], a.data[~off])
    v = np.concatenate([a.data[off], diag + 1.0])
    with_loops = SparseMatrix.from_coo(n, n, r, c, v)
    deg = np.zeros(n)
    rows = np.repeat(np.arange(n), np.diff(with_loops.indptr))
    np.add.at(deg, rows, with_loops.data)
    data = with_loops.data / np.sqrt(deg[rows] * deg[with_loops.indices])
    return SparseMatrix(n, n, with_loops.indptr, with_loops.indices, data)


def degree_features(num_nodes: int, edges, max_degree: int = 10) -> np.ndarray:
    """One-hot node degree, degrees above ``max_degree`` share the last slot."""
    deg = np.zeros(num_nodes, dtype=np.int64)
    for u, v in edges:
        if u != v:
            deg[u] += 1
            deg[v] += 1
    out = np.zeros((num_nodes, max_degree + 1))
    out[np.arange(num_nodes), np.minimum(deg, max_degree)] = 1.0
    return out


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------

def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{where}: missing field '{key}'")
    return obj[key]


def _int_field(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetError(f"{where}: expected an integer, got {value!r}")
    return value


def dataset_from_dict(obj, max_degree: int = 10) -> Dataset:
    """Validate a parsed dataset document and build a ``Dataset``."""
    task = _require(obj, "task", "$")
    if task not in (NODE_TASK, GRAPH_TASK):
        raise DatasetError(f"$.task: expected 'node' or 'graph', got {task!r}")
    classes = _int_field(_require(obj, "classes", "$"), "$.classes")
    if classes < 1:
        raise DatasetError("$.classes: must be >= 1")
    raw_graphs = _require(obj, "graphs", "$")
    if not isinstance(raw_graphs, list) or not raw_graphs:
        raise DatasetError("$.graphs: expected a nonempty list")
    if task == NODE_TASK and len(raw_graphs) != 1:
        raise DatasetError("$.graphs: node task requires exactly one graph")

    graphs = []
    dim = None
    for gi, g in enumerate(raw_graphs):
        where = f"$.graphs[{gi}]"
        n = _int_field(_require(g, "numNodes", where), f"{where}.numNodes")
        if n < 1:
            raise DatasetError(f"{where}.numNodes: must be >= 1")
        edges = _require(g, "edges", where)
        if not isinstance(edges, list):
            raise DatasetError(f"{where}.edges: expected a list")
        for ei, e in enumerate(edges):
            if not (isinstance(e, list) and len(e) == 2):
                raise DatasetError(f"{where}.edges[{ei}]: expected [u, v]")
            for end in e:
                _int_field(end, f"{where}.edges[{ei}]")
                if not 0 <= end < n:
                    raise DatasetError(f"{where}.edges[{ei}]: endpoint {end} outside [0, {n})")
        feats = g.get("features")
        if feats is None:
            x = degree_features(n, edges, max_degree)
        else:
            try:
                x = np.array(feats, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{where}.features: {exc}") from None
            if x.ndim != 2 or x.shape[0] != n:
                raise DatasetError(f"{where}.features: expected numNodes rows of equal length")
            if not np.all(np.isfinite(x)):
                raise DatasetError(f"{where}.features: non-finite value")
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise DatasetError(f"{where}.features: dimension {x.shape[1]} != {dim}")

        node_labels = graph_label = None
        if task == NODE_TASK:
            raw = _require(g, "nodeLabels", where)
            if not isinstance(raw, list) or len(raw) != n:
                raise DatasetError(f"{where}.nodeLabels: expected numNodes entries")
            node_labels = []
            for li, lab in enumerate(raw):
                if lab is None:
                    node_labels.append(-1)
                    continue
                _int_field(lab, f"{where}.nodeLabels[{li}]")
                if not 0 <= lab < classes:
                    raise DatasetError(f"{where}.nodeLabels[{li}]: label {lab} outside [0, {classes})")
                node_labels.append(lab)
        else:
            graph_label = _int_field(_require(g, "graphLabel", where), f"{where}.graphLabel")
            if not 0 <= graph_label < classes:
                raise DatasetError(f"{where}.graphLabel: label {graph_label} outside [0, {classes})")
        graphs.append(Graph.from_edges(n, edges, x, node_labels, graph_label))
    return Dataset(task, tuple(graphs), classes)


def dataset_to_dict(ds: Dataset) -> dict:
    graphs = []
    for g in ds.graphs:
        item = {
            "numNodes": g.num_nodes,
            "edges": [[u, v] for u, v in g.edges],
            "features": g.features.tolist(),
        }
        if ds.task == NODE_TASK:
            item["nodeLabels"] = [None if lab < 0 else int(lab) for lab in g.node_labels]
        else:
            item["graphLabel"] = int(g.graph_label)
        graphs.append(item)
    return {"task": ds.task, "classes": ds.num_classes, "graphs": graphs}


def load_dataset(path, format: str = "json", max_degree: int = 10) -> Dataset:
    path = Path(path)
    if format != "json":
        raise DatasetError(f"unsupported dataset format {format!r}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return dataset_from_dict(obj, max_degree)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds)))


def load_features_csv(path, num_nodes: int | None = None) -> np.ndarray:
    """Node features from CSV: a header naming each dimension, one row per node."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty feature file")
    dim = len(rows[0])
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != dim:
            raise DatasetError(f"{path}: line {i} has {len(row)} fields, header has {dim}")
        try:
            out.append([float(v) for v in row])
        except ValueError as exc:
            raise DatasetError(f"{path}: line {i}: {exc}") from None
    x = np.array(out, dtype=np.float64).reshape(-1, dim)
    if num_nodes is not None and x.shape[0] != num_nodes:
        raise DatasetError(f"{path}: {x.shape[0]} feature rows for {num_nodes} nodes")
    return x


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def kshot_split(ds: Dataset, k: int, seed: int, stratified: bool = False) -> FewShotSplit:
    """k labeled items per class for training; the rest split 1:9 into val/test.

    A single seeded stream drives both the per-class draw and the val/test
    shuffle. With ``stratified`` the 1:9 split is done inside each class.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = ds.labels()
    rng = np.random.default_rng(seed)
    train, rest = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise DatasetError(f"class {c} has no labeled items")
        perm = rng.permutation(members)
        train.extend(perm[:k].tolist())
        rest.append(perm[k:])

    def split_rest(items):
        items = rng.permutation(np.sort(items))
        n_val = items.size // 10
        return items[:n_val], items[n_val:]

    if stratified:
        parts = [split_rest(r) for r in rest]
        val = np.concatenate([p[0] for p in parts])
        test = np.concatenate([p[1] for p in parts])
    else:
        val, test = split_rest(np.concatenate(rest))
    return FewShotSplit(np.array(train, dtype=np.int64), val.astype(np.int64),
                        test.astype(np.int64), k, seed)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _sbm_edges(sizes, p_in, p_out, rng):
    blocks = np.repeat(np.arange(len(sizes)), sizes)
    n = blocks.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(blocks[iu] == blocks[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    return blocks, np.stack([iu[keep], ju[keep]], axis=1)


def synthesize_sbm(blocks: int, sizes, p_in: float, p_out: float, feature_dim: int,
                   seed: int, feature_signal: float = 1.0, feature_noise: float = 1.0) -> Dataset:
    """Node-classification SBM; block id is the label.

    Features are a per-block Gaussian mean (scaled by ``feature_signal``)
    plus isotropic noise.
    """
    sizes = list(sizes)
    if len(sizes) != blocks:
        raise ValueError("need one size per block")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels, edges = _sbm_edges(sizes, p_in, p_out, rng)
    means = rng.normal(size=(blocks, feature_dim)) * feature_signal
    x = means[labels] + feature_noise * rng.normal(size=(labels.size, feature_dim))
    g = Graph.from_edges(labels.size, edges, x, labels)
    return Dataset(NODE_TASK, (g,), blocks)


def synthesize_graph_bag(num_graphs: int, classes: int, nodes: int, feature_dim: int,
                         seed: int, p_base: float = 0.1, p_step: float = 0.15,
                         feature_signal: float = 0.5) -> Dataset:
    """Graph-classification toy set: class c graphs have edge density p_base + c*p_step
    and a class-shifted feature mean."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, feature_dim)) * feature_signal
    graphs = []
    for i in range(num_graphs):
        c = i % classes
        _, edges = _sbm_edges([nodes], min(1.0, p_base + c * p_step), 0.0, rng)
        x = means[c] + rng.normal(size=(nodes, feature_dim))
        graphs.append(Graph.from_edges(nodes, edges, x, graph_label=c))
    return Dataset(GRAPH_TASK, tuple(graphs), classes)


@dataclass(frozen=True)
class Batch:
    """All graphs of a dataset merged block-diagonally."""

    adjacency: SparseMatrix  # normalized
    features: np.ndarray
    segment_ids: np.ndarray | None
    num_segments: int
    edges: np.ndarray = field(repr=False)


def make_batch(ds: Dataset) -> Batch:
    offsets = np.cumsum([0] + [g.num_nodes for g in ds.graphs])
    n = int(offsets[-1])
    edges = []
    for off, g in zip(offsets, ds.graphs):
        e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
        edges.append(e + off)
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    feats = np.concatenate([g.features for g in ds.graphs])
    merged = Graph.from_edges(n, edges, feats)
    seg = None
    if ds.task == GRAPH_TASK:
        seg = np.repeat(np.arange(len(ds.graphs)), [g.num_nodes for g in ds.graphs])
    return Batch(normalize_adjacency(merged.adjacency), feats, seg, len(ds.graphs), edges)

