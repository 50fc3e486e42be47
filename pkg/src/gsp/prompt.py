"""Feature prompts: one shared vector, or an attention-weighted basis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var


@dataclass
class PromptVector:
    p: np.ndarray

    @property
    def dim(self) -> int:
        return self.p.shape[0]

    @classmethod
    def zeros(cls, d: int) -> "PromptVector":
        return cls(np.zeros(d))


@dataclass
class PromptBasis:
    """Basis ``P`` (d x k) and attention projections ``B`` (d x k)."""

    P: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.P.ndim != 2 or self.P.shape != self.B.shape:
            raise ValueError(f"P and B must share shape d x k, got {self.P.shape} and {self.B.shape}")
        if self.P.shape[1] < 1:
            raise ValueError("k must be >= 1")

    @property
    def k(self) -> int:
        return self.P.shape[1]

    @classmethod
    def init(cls, d: int, k: int, rng) -> "PromptBasis":
        P = rng.uniform(-1.0, 1.0, size=(d, k)) * 1e-2
        B = rng.uniform(-1.0, 1.0, size=(d, k)) / np.sqrt(d)
        return cls(P, B)


@dataclass(frozen=True)
class SparsityReport:
    size: int
    nnz: int
    zero_dims: int  # vector entries, or rows of P
    zero_rows: int | None = None
    zero_cols: int | None = None  # columns of S P^T
    threshold: float = 0.0

    @property
    def zero_fraction(self) -> float:
        return self.zero_dims / self.size if self.size else 0.0


def gpf_prompt(x, p) -> Var:
    """X + 1 p^T."""
    return ad.add_row_broadcast(x, p)


def attention_scores(x, B) -> Var:
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    bv = B.value if isinstance(B, Var) else np.asarray(B)
    if bv.ndim != 2 or xv.shape[1] != bv.shape[0]:
        raise ValueError(f"B must have {xv.shape[1]} rows, got {bv.shape}")
    return ad.row_softmax(ad.matmul(x, B))


def gpfplus_prompt(x, P, B) -> Var:
    """X + S P^T with S = row_softmax(X B)."""
    s = attention_scores(x, B)
    return ad.add(x, ad.matmul(s, ad.transpose(P)))


def sparsity_report(prompt, threshold: float = 0.0, x=None) -> SparsityReport:
    """Count entries with ``|value| <= threshold`` as zero.

    For a basis, ``x`` (the prompted features' input) is needed to count zero
    columns of S P^T.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if isinstance(prompt, PromptVector):
        nz = np.abs(prompt.p) > threshold
        return SparsityReport(prompt.dim, int(nz.sum()), int((~nz).sum()), threshold=threshold)
    P = prompt.P
    nz = np.abs(P) > threshold
    zero_rows = int((~nz.any(axis=1)).sum())
    zero_cols = None
    if x is not None:
        sp_t = _softmax_rows(np.asarray(x) @ prompt.B) @ P.T
        zero_cols = int((~(np.abs(sp_t) > threshold).any(axis=0)).sum())
    return SparsityReport(P.shape[0], int(nz.sum()), zero_rows, zero_rows, zero_cols, threshold)


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
