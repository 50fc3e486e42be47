"""Proximal operators and forward-backward prompt tuning.

Each epoch does one full-batch forward pass, takes a gradient step on the
prompt followed by the proximal map of the sparsity penalty, then a plain
gradient step (with weight decay) on the head parameters. Without a
penalty (``gpf``/``gpfplus``) the prox is skipped entirely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .backbone import FrozenBackbone
from .downstream import HeadParams, evaluate, forward_logits, make_head
from .graph import Batch, Dataset, FewShotSplit, make_batch
from .prompt import PromptBasis, PromptVector, sparsity_report

logger = logging.getLogger(__name__)

METHODS = ("gpf", "gpfplus", "gsfp", "gsmfp", "ft-head-only")
PROX_SCALINGS = ("paperLiteral", "stepScaled")


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def prox_l1(y, tau: float) -> np.ndarray:
    """Soft thresholding: sign(y) * max(|y| - tau, 0)."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.maximum(np.abs(y) - tau, 0.0)


def prox_l21(Y, tau: float) -> np.ndarray:
    """Row-wise group shrinkage.

    Rows with norm <= tau become exactly zero; the rest keep their direction
    and lose tau of their norm.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    Y = np.asarray(Y, dtype=np.float64)
    norms = np.sqrt((Y * Y).sum(axis=1))
    out = np.zeros_like(Y)
    keep = norms > tau
    out[keep] = ((norms[keep] - tau) / norms[keep])[:, None] * Y[keep]
    return out


def regularizer(prompt, lam: float) -> float:
    """lam * ||p||_1 for a vector, lam * ||P||_{2,1} for a matrix."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    arr = np.asarray(prompt, dtype=np.float64)
    if arr.ndim == 1:
        return lam * float(np.abs(arr).sum())
    return lam * float(np.sqrt((arr * arr).sum(axis=1)).sum())


@dataclass(frozen=True)
class TuneConfig:
    lam: float = 0.0
    eta: float = 1e-3
    epochs: int = 200
    head_lr: float | None = None  # None: share eta
    weight_decay: float = 5e-4
    seed: int = 0
    prox_scaling: str = "paperLiteral"
    prompt_weight_decay: bool = False
    k: int = 10
    adapter_trainable: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.head_lr is not None and self.head_lr <= 0:
            raise ValueError("head_lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.prox_scaling not in PROX_SCALINGS:
            raise ValueError(f"prox_scaling must be one of {PROX_SCALINGS}")

    @property
    def threshold(self) -> float:
        """Prox parameter actually applied after each gradient step."""
        return self.lam if self.prox_scaling == "paperLiteral" else self.eta * self.lam


@dataclass(frozen=True)
class EpochRecord:
    data_loss: float
    reg: float
    objective: float
    nnz: int | None


@dataclass
class LossTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def objectives(self) -> list[float]:
        return [r.objective for r in self.records]

    def data_losses(self) -> list[float]:
        return [r.data_loss for r in self.records]


@dataclass
class TuneResult:
    method: str
    prompt: PromptVector | PromptBasis | None  # best-validation snapshot
    head: HeadParams
    trace: LossTrace
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    final_prompt: PromptVector | PromptBasis | None = None

    def sparsity(self, x=None, threshold: float = 0.0):
        if self.prompt is None:
            return None
        return sparsity_report(self.prompt, threshold, x)


def _snapshot(prompt):
    if prompt is None:
        return None
    if isinstance(prompt, PromptVector):
        return PromptVector(prompt.p.copy())
    return PromptBasis(prompt.P.copy(), prompt.B.copy())


def tune(method: str, data: Dataset, split: FewShotSplit, backbone: FrozenBackbone,
         config: TuneConfig, batch: Batch | None = None, callback=None) -> TuneResult:
    """Prompt-tune ``backbone`` on ``split.train``; keep the best-validation state.

    ``callback(epoch, prompt, head)`` runs after each epoch's updates; it
    sees live objects and must copy anything it keeps.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    batch = batch or make_batch(data)
    labels = data.labels()
    rng = np.random.default_rng(config.seed)
    head = make_head(backbone, batch.features.shape[1], data.num_classes, rng,
                     config.adapter_trainable)
    d = backbone.input_dim
    if method in ("gpf", "gsfp"):
        prompt = PromptVector.zeros(d)
    elif method in ("gpfplus", "gsmfp"):
        prompt = PromptBasis.init(d, config.k, rng)
    else:
        prompt = None
    sparse = method in ("gsfp", "gsmfp")
    lam = config.lam if sparse else 0.0
    tau = config.threshold
    head_lr = config.head_lr if config.head_lr is not None else config.eta
    train_ids = split.train
    train_labels = labels[train_ids]

    trace = LossTrace()
    best = None  # (val_acc, epoch, test_acc, prompt, head)

    def consider(epoch, logits_value):
        nonlocal best
        val = evaluate(logits_value, labels, split.val) if split.val.size else 0.0
        if best is None or val > best[0]:
            test = evaluate(logits_value, labels, split.test) if split.test.size else 0.0
            best = (val, epoch, test, _snapshot(prompt),
                    HeadParams(head.classifier.copy(),
                               None if head.adapter is None else head.adapter.copy(),
                               head.adapter_trainable))

    for epoch in range(config.epochs):
        tape = Tape()
        classifier = tape.leaf(head.classifier)
        theta = [classifier]
        adapter = head.adapter
        if adapter is not None and head.adapter_trainable:
            adapter = tape.leaf(adapter)
            theta.append(adapter)
        prompt_leaf = None
        if isinstance(prompt, PromptVector):
            prompt_leaf = tape.leaf(prompt.p)
            prompt_arg = prompt_leaf
        elif isinstance(prompt, PromptBasis):
            prompt_leaf = tape.leaf(prompt.P)
            b_leaf = tape.leaf(prompt.B)
            theta.append(b_leaf)
            prompt_arg = (prompt_leaf, b_leaf)
        else:
            prompt_arg = None

        logits = forward_logits(backbone, batch, classifier, adapter, prompt_arg, tape)
        loss = ad.softmax_cross_entropy(ad.take_rows(logits, train_ids), train_labels)
        data_loss = float(loss.value)
        if not math.isfinite(data_loss):
            raise DivergenceError(epoch, data_loss)

        if prompt is None:
            reg, nnz = 0.0, None
        else:
            current = prompt.p if isinstance(prompt, PromptVector) else prompt.P
            reg = regularizer(current, lam)
            nnz = int(np.count_nonzero(current))
        trace.records.append(EpochRecord(data_loss, reg, data_loss + reg, nnz))
        consider(epoch, logits.value)

        leaves = theta if prompt_leaf is None else [prompt_leaf] + theta
        grads = tape.backward(loss, leaves)
        if prompt_leaf is not None:
            g_prompt, grads = grads[0], grads[1:]
            current = prompt_leaf.value
            if config.prompt_weight_decay:
                g_prompt = g_prompt + config.weight_decay * current
            stepped = current - config.eta * g_prompt
            if isinstance(prompt, PromptVector):
                prompt.p = prox_l1(stepped, tau) if sparse else stepped
            else:
                prompt.P = prox_l21(stepped, tau) if sparse else stepped

        new = [leaf.value - head_lr * (g + config.weight_decay * leaf.value)
               for leaf, g in zip(theta, grads)]
        head.classifier = new[0]
        i = 1
        if head.adapter is not None and head.adapter_trainable:
            head.adapter = new[i]
            i += 1
        if isinstance(prompt, PromptBasis):
            prompt.B = new[i]

        if callback is not None:
            callback(epoch, prompt, head)

    final_arg = None
    if isinstance(prompt, PromptVector):
        final_arg = prompt.p
    elif isinstance(prompt, PromptBasis):
        final_arg = (prompt.P, prompt.B)
    final_logits = forward_logits(backbone, batch, head.classifier, head.adapter, final_arg)
    if not np.all(np.isfinite(final_logits.value)):
        raise DivergenceError(config.epochs, float("nan"))
    consider(config.epochs, final_logits.value)

    val, best_epoch, test, best_prompt, best_head = best
    logger.debug("%s lam=%g best epoch %d val %.4f test %.4f", method, lam, best_epoch, val, test)
    return TuneResult(method, best_prompt, best_head, trace, best_epoch, val, test,
                      _snapshot(prompt))


def train_gpf(data, split, backbone, config, **kw) -> TuneResult:
    return tune("gpf", data, split, backbone, config, **kw)


def train_gpfplus(data, split, backbone, config, **kw) -> TuneResult:
    return tune("gpfplus", data, split, backbone, config, **kw)


def train_gsfp(data, split, backbone, config, **kw) -> TuneResult:
    """Shared prompt with an l1 penalty, solved by forward-backward splitting."""
    return tune("gsfp", data, split, backbone, config, **kw)


def train_gsmfp(data, split, backbone, config, **kw) -> TuneResult:
    """Basis prompt with an l2,1 penalty on the rows of P."""
    return tune("gsmfp", data, split, backbone, config, **kw)


def train_head_only(data, split, backbone, config, **kw) -> TuneResult:
    return tune("ft-head-only", data, split, backbone, config, **kw)
