"""Edge-prediction pre-training of the GCN backbone.

Scores a node pair by sigmoid(h_u . h_v) and minimizes binary cross-entropy
over all edges (positives) and freshly drawn non-edges (negatives) with
full-batch gradient descent on the layer weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .backbone import FrozenBackbone, gcn_forward, init_weights
from .graph import Dataset, make_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    neg_ratio: int = 1
    seed: int = 0
    hidden_dim: int = 64
    layers: int = 3
    input_dim: int | None = None  # None: use the raw feature dim, no adapter
    init: str = "uniform"  # or "zeros"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.neg_ratio < 1:
            raise ValueError("neg_ratio must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")
        if self.init not in ("uniform", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")


def sample_negatives(num_nodes: int, edge_set: set, count: int, rng) -> np.ndarray:
    """Uniform node pairs u != v that are not edges (either orientation)."""
    max_non_edges = num_nodes * (num_nodes - 1) // 2 - len(edge_set)
    if max_non_edges <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    out = []
    while len(out) < count:
        cand = rng.integers(0, num_nodes, size=(2 * (count - len(out)) + 8, 2))
        for u, v in cand:
            if u == v:
                continue
            key = (u, v) if u < v else (v, u)
            if key in edge_set:
                continue
            out.append((u, v))
            if len(out) == count:
                break
    return np.array(out, dtype=np.int64)


def edge_scores(backbone: FrozenBackbone, adj, x, pairs) -> np.ndarray:
    """sigmoid(h_u . h_v) for each pair under a trained backbone."""
    tape = Tape()
    xin = x @ backbone.adapter if backbone.adapter is not None else x
    h = gcn_forward(adj, tape.constant(xin), [tape.constant(w) for w in backbone.weights], tape).value
    logits = (h[pairs[:, 0]] * h[pairs[:, 1]]).sum(axis=1)
    return 1.0 / (1.0 + np.exp(-logits))


def pretrain(data: Dataset, config: PretrainConfig, callback=None) -> FrozenBackbone:
    """Train GCN weights by edge prediction; returns them frozen.

    ``callback(epoch, loss)`` is called once per epoch with the loss at the
    start of that epoch.
    """
    batch = make_batch(data)
    edges = batch.edges
    if edges.shape[0] == 0:
        raise ValueError("edge-prediction pre-training needs at least one edge")
    n, d_raw = batch.features.shape
    rng = np.random.default_rng(config.seed)
    input_dim = d_raw if config.input_dim is None else config.input_dim

    params = []
    use_adapter = input_dim != d_raw
    if config.init == "zeros":
        if use_adapter:
            params.append(np.zeros((d_raw, input_dim)))
        dims = [input_dim] + [config.hidden_dim] * config.layers
        params += [np.zeros((a, b)) for a, b in zip(dims, dims[1:])]
    else:
        if use_adapter:
            params.append(rng.uniform(-1.0, 1.0, size=(d_raw, input_dim)) / np.sqrt(d_raw))
        params += init_weights(input_dim, config.hidden_dim, config.layers, rng)

    edge_set = {(int(min(u, v)), int(max(u, v))) for u, v in edges}
    n_neg = config.neg_ratio * edges.shape[0]

    for epoch in range(config.epochs):
        neg = sample_negatives(n, edge_set, n_neg, rng)
        pairs = np.concatenate([edges, neg])
        targets = np.concatenate([np.ones(edges.shape[0]), np.zeros(neg.shape[0])])

        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        x = tape.constant(batch.features)
        if use_adapter:
            x = ad.matmul(x, leaves[0])
            layer_ws = leaves[1:]
        else:
            layer_ws = leaves
        h = gcn_forward(batch.adjacency, x, layer_ws, tape)
        scores = ad.rowwise_dot(ad.take_rows(h, pairs[:, 0]), ad.take_rows(h, pairs[:, 1]))
        loss = ad.bce_with_logits(scores, targets)
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"pre-training diverged at epoch {epoch}")
        if callback is not None:
            callback(epoch, value)
        if epoch % 50 == 0:
            logger.debug("pretrain epoch %d loss %.6f", epoch, value)
        grads = tape.backward(loss, leaves)
        params = [p - config.lr * (g + config.weight_decay * p) for p, g in zip(params, grads)]

    adapter = params[0] if use_adapter else None
    weights = params[1:] if use_adapter else params
    meta = {"pretrain": "edgepred", "epochs": config.epochs, "seed": config.seed}
    return FrozenBackbone(tuple(weights), adapter, meta)
