"""Dense/sparse matrix numerics with a small reverse-mode tape.

The op set is closed: only what a prompted GCN with a linear head (and the
edge-prediction pre-trainer) needs. Values are float64 numpy arrays; a
``Var`` is a handle to one tape node.

Typical use::

    tape = Tape()
    p = tape.leaf(np.zeros(d))
    x = add_row_broadcast(tape.constant(X), p)
    ...
    (grad_p,) = tape.backward(loss, [p])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseMatrix",
    "Tape",
    "Var",
    "GradientError",
    "matmul",
    "spmm",
    "transpose",
    "add",
    "relu",
    "row_softmax",
    "add_row_broadcast",
    "scale",
    "take_rows",
    "mean_pool_segments",
    "rowwise_dot",
    "softmax_cross_entropy",
    "bce_with_logits",
    "total",
]


class GradientError(ValueError):
    """Raised when a gradient is requested for something that is not a leaf."""


def _as_dense(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite entries in input")
    return arr


@dataclass(frozen=True)
class SparseMatrix:
    """CSR matrix with float64 values.

    Column indices must be strictly increasing within each row. The scipy
    view is built lazily and cached; the instance itself is immutable.
    """

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _csr_t: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        for arr in (indptr, indices, data):
            arr.flags.writeable = False
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        self.validate()

    def validate(self):
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative shape")
        if self.indptr.shape != (self.rows + 1,) or self.indptr[0] != 0:
            raise ValueError("row offsets must have length rows+1 and start at 0")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("row offsets must be nondecreasing")
        nnz = int(self.indptr[-1])
        if self.indices.shape != (nnz,) or self.data.shape != (nnz,):
            raise ValueError("indices/data length must equal the last row offset")
        if nnz and (self.indices.min() < 0 or self.indices.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            cols = self.indices[self.indptr[r]:self.indptr[r + 1]]
            if cols.size > 1 and np.any(np.diff(cols) <= 0):
                raise ValueError(f"column indices not strictly increasing in row {r}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite sparse values")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = _as_dense(dense)
        if dense.ndim != 2:
            raise ValueError("expected a 2-D array")
        csr = sp.csr_matrix(dense)
        csr.sort_indices()
        return cls(dense.shape[0], dense.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_coo(cls, rows, cols, r, c, v) -> "SparseMatrix":
        """Build from triplets; duplicate coordinates are summed."""
        coo = sp.coo_matrix((np.asarray(v, dtype=np.float64), (np.asarray(r), np.asarray(c))),
                            shape=(rows, cols))
        csr = coo.tocsr()
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(rows, cols, csr.indptr, csr.indices, csr.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            csr = sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
            object.__setattr__(self, "_csr", csr)
        return self._csr

    def transpose_scipy(self) -> sp.csr_matrix:
        if self._csr_t is None:
            t = self.to_scipy().T.tocsr()
            t.sort_indices()
            object.__setattr__(self, "_csr_t", t)
        return self._csr_t

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for r in range(self.rows):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            out[r, self.indices[lo:hi]] = self.data[lo:hi]
        return out


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad", "is_leaf")

    def __init__(self, tape, index, value, requires_grad, is_leaf=False):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if self.is_leaf else ("var" if self.requires_grad else "const")
        return f"Var({kind}, shape={self.value.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple
    backward: object  # callable(g) -> tuple of input gradients (None where skipped)


class Tape:
    """Ordered record of ops; inputs always precede their users."""

    def __init__(self):
        self.nodes: list[_Record | None] = []
        self.vars: list[Var] = []

    def _push(self, value, requires_grad, record=None, is_leaf=False) -> Var:
        v = Var(self, len(self.nodes), value, requires_grad, is_leaf)
        self.nodes.append(record)
        self.vars.append(v)
        return v

    def leaf(self, value) -> Var:
        """Register a differentiable parameter (copied)."""
        return self._push(_as_dense(value).copy(), True, is_leaf=True)

    def constant(self, value) -> Var:
        if isinstance(value, Var):
            return value
        arr = _as_dense(value)
        return self._push(arr, False)

    def backward(self, loss: Var, leaves) -> list[np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns one gradient per leaf."""
        if loss.tape is not self:
            raise GradientError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise GradientError("backward needs a scalar loss")
        for leaf in leaves:
            if not isinstance(leaf, Var) or leaf.tape is not self or not leaf.is_leaf:
                raise GradientError("requested gradient for something that is not a leaf on this tape")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            rec = self.nodes[i]
            if g is None or rec is None:
                continue
            input_grads = rec.backward(g)
            for var, ig in zip(rec.inputs, input_grads):
                if ig is None or not var.requires_grad:
                    continue
                if grads[var.index] is None:
                    grads[var.index] = ig
                else:
                    grads[var.index] = grads[var.index] + ig
        out = []
        for leaf in leaves:
            g = grads[leaf.index]
            out.append(np.zeros_like(leaf.value) if g is None else g)
        return out


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    if tape is None:
        raise ValueError("at least one operand must be a Var")
    return tape


def _record(op, inputs, value, backward) -> Var:
    tape = _tape_of(*inputs)
    inputs = tuple(tape.constant(x) for x in inputs)
    needs = any(x.requires_grad for x in inputs)
    rec = _Record(op, inputs, backward) if needs else None
    return tape._push(value, needs, rec)


def _need(x) -> bool:
    return isinstance(x, Var) and x.requires_grad


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")
    na, nb = _need(a), _need(b)

    def backward(g):
        return (g @ bv.T if na else None, av.T @ g if nb else None)

    return _record("matmul", (a, b), av @ bv, backward)


def spmm(s: SparseMatrix, d) -> Var:
    """Sparse-dense product; ``s`` is never differentiated."""
    dv = _val(d)
    if dv.ndim != 2 or s.cols != dv.shape[0]:
        raise ValueError(f"spmm dimension mismatch: {s.shape} @ {dv.shape}")
    out = np.asarray(s.to_scipy() @ dv)

    def backward(g):
        return (np.asarray(s.transpose_scipy() @ g),)

    return _record("spmm", (d,), out, backward)


def transpose(x) -> Var:
    return _record("transpose", (x,), _val(x).T.copy(), lambda g: (g.T.copy(),))


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    return _record("add", (a, b), av + bv, lambda g: (g, g))


def relu(x) -> Var:
    xv = _val(x)
    if not np.all(np.isfinite(xv)):
        raise ValueError("relu: non-finite input")
    mask = xv > 0
    return _record("relu", (x,), np.where(mask, xv, 0.0), lambda g: (g * mask,))


def row_softmax(x) -> Var:
    """Softmax over each row, shifted by the row max."""
    xv = _val(x)
    if xv.ndim != 2:
        raise ValueError("row_softmax expects a matrix")
    if not np.all(np.isfinite(xv)):
        raise ValueError("row_softmax: non-finite input")
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", (x,), s, backward)


def add_row_broadcast(x, v) -> Var:
    """Add vector ``v`` (length cols) to every row of ``x``."""
    xv, vv = _val(x), _val(v)
    if xv.ndim != 2 or vv.shape != (xv.shape[1],):
        raise ValueError(f"broadcast mismatch: {xv.shape} + {vv.shape}")
    return _record("add_row_broadcast", (x, v), xv + vv, lambda g: (g, g.sum(axis=0)))


def scale(x, c: float) -> Var:
    c = float(c)
    return _record("scale", (x,), _val(x) * c, lambda g: (g * c,))


def take_rows(x, ids) -> Var:
    """Gather rows by index; backward scatter-adds."""
    xv = _val(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= xv.shape[0]):
        raise ValueError("row index out of range")

    def backward(g):
        out = np.zeros_like(xv)
        np.add.at(out, ids, g)
        return (out,)

    return _record("take_rows", (x,), xv[ids], backward)


def mean_pool_segments(x, segment_ids, num_segments: int | None = None) -> Var:
    """Row ``g`` of the output is the mean of the rows of ``x`` in segment ``g``."""
    xv = _val(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (xv.shape[0],):
        raise ValueError("one segment id per row required")
    if num_segments is None:
        num_segments = int(seg.max()) + 1 if seg.size else 0
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError("segment id out of range")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError(f"empty segment(s): {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((num_segments, xv.shape[1]))
    np.add.at(sums, seg, xv)
    out = sums / counts[:, None]

    def backward(g):
        return ((g / counts[:, None])[seg],)

    return _record("mean_pool_segments", (x,), out, backward)


def rowwise_dot(a, b) -> Var:
    """Column vector of per-row inner products."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"rowwise_dot shape mismatch: {av.shape} vs {bv.shape}")
    return _record("rowwise_dot", (a, b), (av * bv).sum(axis=1, keepdims=True),
                   lambda g: (g * bv, g * av))


def softmax_cross_entropy(logits, labels) -> Var:
    """Mean over rows of -log softmax(logits)[label]."""
    lv = _val(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ValueError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ValueError("label out of range")
    if lv.shape[0] == 0:
        raise ValueError("empty batch")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(lv.shape[0])
    loss = np.mean(logz - shifted[rows, labels])
    probs = np.exp(shifted - logz[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g.reshape(()) / lv.shape[0]),)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss), backward)


def bce_with_logits(scores, targets) -> Var:
    """Mean binary cross-entropy of sigmoid(scores) against 0/1 targets."""
    sv = _val(scores).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if sv.shape != t.shape:
        raise ValueError("one target per score required")
    # log(1 + exp(-|s|)) form avoids overflow
    loss = np.mean(np.maximum(sv, 0.0) - sv * t + np.log1p(np.exp(-np.abs(sv))))
    sig = 1.0 / (1.0 + np.exp(-sv))
    shape = _val(scores).shape

    def backward(g):
        return (((sig - t) * (g.reshape(()) / sv.size)).reshape(shape),)

    return _record("bce_with_logits", (scores,), np.asarray(loss), backward)


def total(x) -> Var:
    """Sum of all entries."""
    xv = _val(x)
    return _record("total", (x,), np.asarray(xv.sum()), lambda g: (np.full_like(xv, g.reshape(())),))
