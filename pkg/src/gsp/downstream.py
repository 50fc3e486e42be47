"""Task head, prompted forward pass and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .backbone import FrozenBackbone, forward, readout
from .graph import Batch
from .prompt import PromptBasis, PromptVector, gpf_prompt, gpfplus_prompt


@dataclass
class HeadParams:
    """Linear classifier plus an optional feature adapter (raw dim -> backbone input dim)."""

    classifier: np.ndarray
    adapter: np.ndarray | None = None
    adapter_trainable: bool = False

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]


def make_head(backbone: FrozenBackbone, raw_dim: int, num_classes: int, rng,
              adapter_trainable: bool = False) -> HeadParams:
    """Seeded head for a downstream task.

    The adapter comes from pre-training when its input dim matches; with
    equal dims there is none; otherwise a seeded random projection is drawn.
    """
    if backbone.adapter is not None and backbone.adapter.shape[0] == raw_dim:
        adapter = np.array(backbone.adapter)
    elif raw_dim == backbone.input_dim:
        adapter = None
    else:
        adapter = rng.uniform(-1.0, 1.0, size=(raw_dim, backbone.input_dim)) / np.sqrt(raw_dim)
    d = backbone.output_dim
    classifier = rng.uniform(-1.0, 1.0, size=(d, num_classes)) / np.sqrt(d)
    return HeadParams(classifier, adapter, adapter_trainable)


def forward_logits(backbone: FrozenBackbone, batch: Batch, classifier, adapter=None,
                   prompt=None, tape: Tape | None = None) -> Var:
    """Differentiable logits.

    ``prompt`` is None, a length-d vector (shared prompt) or a ``(P, B)``
    pair (basis prompt); any array argument may be a leaf ``Var``. The prompt
    is added after the adapter, so its dim is the backbone input dim.
    """
    if tape is None:
        tape = next((v.tape for v in (classifier, adapter, prompt) if isinstance(v, Var)), None)
        if tape is None and isinstance(prompt, tuple):
            tape = next((v.tape for v in prompt if isinstance(v, Var)), None)
        tape = tape or Tape()
    x = tape.constant(batch.features)
    if adapter is not None:
        x = ad.matmul(x, tape.constant(adapter))
    if prompt is not None:
        if isinstance(prompt, tuple):
            x = gpfplus_prompt(x, *(tape.constant(v) for v in prompt))
        else:
            x = gpf_prompt(x, tape.constant(prompt))
    h = forward(backbone, batch.adjacency, x)
    if batch.segment_ids is not None:
        h = readout(h, batch.segment_ids, batch.num_segments)
    return ad.matmul(h, tape.constant(classifier))


def predict(backbone: FrozenBackbone, head: HeadParams, batch: Batch, prompt=None) -> np.ndarray:
    """Logits per node (node task) or per graph (graph task)."""
    if isinstance(prompt, PromptVector):
        prompt = prompt.p
    elif isinstance(prompt, PromptBasis):
        prompt = (prompt.P, prompt.B)
    return forward_logits(backbone, batch, head.classifier, head.adapter, prompt).value


def evaluate(logits, labels, ids) -> float:
    """Accuracy over ``ids``; argmax ties go to the lowest class index."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot evaluate on an empty id set")
    pred = np.argmax(np.asarray(logits)[ids], axis=1)
    return float(np.mean(pred == np.asarray(labels)[ids]))


def aggregate_runs(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); a single run has std 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no runs to aggregate")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), std


def format_mean_std(values, percent: bool = True) -> str:
    mean, std = aggregate_runs(values)
    f = 100.0 if percent else 1.0
    return f"{mean * f:.2f}±{std * f:.2f}"
