"""Frozen multi-layer GCN and its weights file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, Tape, Var

FORMAT_VERSION = 1


class WeightsError(ValueError):
    pass


def _freeze(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FrozenBackbone:
    """GCN layers ``H_l = act(A_hat @ H_{l-1} @ W_l)``; relu on all but the last.

    ``adapter`` optionally maps raw features to ``input_dim``; it is part of
    the pre-trained state, not of the GCN proper.
    """

    weights: tuple
    adapter: np.ndarray | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ws = tuple(_freeze(w) for w in self.weights)
        if not ws:
            raise WeightsError("backbone needs at least one layer")
        for i, (a, b) in enumerate(zip(ws, ws[1:])):
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise WeightsError(f"layer {i} output dim does not chain into layer {i + 1}")
        object.__setattr__(self, "weights", ws)
        if self.adapter is not None:
            ad_ = _freeze(self.adapter)
            if ad_.ndim != 2 or ad_.shape[1] != ws[0].shape[0]:
                raise WeightsError("adapter output dim must equal backbone input dim")
            object.__setattr__(self, "adapter", ad_)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def fingerprint(self) -> bytes:
        """Raw bytes of every frozen array, for before/after comparisons."""
        parts = [w.tobytes() for w in self.weights]
        if self.adapter is not None:
            parts.append(self.adapter.tobytes())
        return b"".join(parts)


def init_weights(input_dim: int, hidden_dim: int, layers: int, rng) -> list[np.ndarray]:
    """Uniform in [-1/sqrt(d_in), 1/sqrt(d_in)] per layer."""
    dims = [input_dim] + [hidden_dim] * layers
    return [rng.uniform(-1.0, 1.0, size=(a, b)) / np.sqrt(a) for a, b in zip(dims, dims[1:])]


def gcn_forward(adj: SparseMatrix, x: Var, weights, tape: Tape) -> Var:
    """Shared propagation; ``weights`` may be leaves (pre-training) or constants."""
    h = x
    for i, w in enumerate(weights):
        h = ad.spmm(adj, ad.matmul(h, w))
        if i < len(weights) - 1:
            h = ad.relu(h)
    return h


def forward(backbone: FrozenBackbone, adj: SparseMatrix, x: Var) -> Var:
    """Node embeddings; gradients reach ``x`` but never the weights."""
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    if xv.ndim != 2 or xv.shape[1] != backbone.input_dim:
        raise ValueError(f"feature dim {xv.shape[-1]} != backbone input dim {backbone.input_dim}")
    if adj.shape != (xv.shape[0], xv.shape[0]):
        raise ValueError("normalized adjacency must be n x n")
    tape = x.tape if isinstance(x, Var) else Tape()
    x = tape.constant(x)
    return gcn_forward(adj, x, [tape.constant(w) for w in backbone.weights], tape)


def readout(h: Var, segment_ids, num_segments: int | None = None) -> Var:
    """Mean pooling per graph."""
    return ad.mean_pool_segments(h, segment_ids, num_segments)


def save_weights(backbone: FrozenBackbone, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "input_dim": backbone.input_dim,
        "hidden_dim": backbone.hidden_dim,
        "layers": backbone.num_layers,
        # repr-based floats round-trip exactly
        "weights": [w.tolist() for w in backbone.weights],
    }
    if backbone.adapter is not None:
        doc["adapter"] = backbone.adapter.tolist()
    Path(path).write_text(json.dumps(doc))


def load_weights(path) -> FrozenBackbone:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise WeightsError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise WeightsError(f"{path}: {exc.strerror}") from None
    if not isinstance(doc, dict):
        raise WeightsError(f"{path}: expected a JSON object")
    for key in ("format_version", "input_dim", "hidden_dim", "layers", "weights"):
        if key not in doc:
            raise WeightsError(f"{path}: missing field '{key}'")
    if doc["format_version"] != FORMAT_VERSION:
        raise WeightsError(f"{path}: format_version {doc['format_version']} unsupported (expected {FORMAT_VERSION})")
    if len(doc["weights"]) != doc["layers"]:
        raise WeightsError(f"{path}: layers={doc['layers']} but {len(doc['weights'])} weight blocks")
    try:
        ws = [np.array(w, dtype=np.float64) for w in doc["weights"]]
    except (TypeError, ValueError) as exc:
        raise WeightsError(f"{path}: bad weight block: {exc}") from None
    if any(w.ndim != 2 for w in ws):
        raise WeightsError(f"{path}: weight blocks must be 2-D row-major arrays")
    if ws[0].shape[0] != doc["input_dim"]:
        raise WeightsError(f"{path}: first block has {ws[0].shape[0]} rows, input_dim is {doc['input_dim']}")
    if any(w.shape[1] != doc["hidden_dim"] for w in ws):
        raise WeightsError(f"{path}: every block must have hidden_dim={doc['hidden_dim']} columns")
    adapter = doc.get("adapter")
    if adapter is not None:
        adapter = np.array(adapter, dtype=np.float64)
    return FrozenBackbone(tuple(ws), adapter)
