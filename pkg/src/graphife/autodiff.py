"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D matrix (scalars are 1x1). Operations executed inside a
``with Tape():`` block are recorded and can be differentiated by a single
reverse sweep; outside a tape, operations on constant tensors are plain
numpy evaluation. Non-finite results are hard errors, never silent.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

WASSERSTEIN_QUANTILES = 64


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(AutodiffError):
    """A primitive produced (or received) a NaN/Inf value."""


def _check_finite(op: str, values: np.ndarray) -> None:
    if not np.isfinite(values).all():
        raise NumericsError(f"{op}: produced a non-finite value")


class Tensor:
    """A 2-D float64 matrix, optionally tracked on the active tape."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor requires a 2-D matrix, got ndim={arr.ndim}")
        _check_finite("Tensor", arr)
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path: takes ownership of a fresh array, no copy.
        out = object.__new__(cls)
        values.flags.writeable = False
        out.values = values
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values, requires_grad=False)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float) -> Tensor:
    """A constant 1x1 tensor."""
    return Tensor(np.array([[float(value)]]))


class SparseMatrix:
    """Immutable CSR matrix with float64 nonzeros.

    Invariants checked on construction: row offsets nondecreasing with
    ``indptr[-1] == nnz``, and column indices strictly increasing within
    each row.
    """

    __slots__ = ("rows", "cols", "indptr", "indices", "data", "_transpose")

    def __init__(self, rows: int, cols: int, indptr, indices, data):
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        data = np.asarray(data, dtype=np.float64)
        if indptr.shape != (rows + 1,):
            raise ShapeError(f"indptr must have length rows+1={rows + 1}, got {indptr.shape}")
        if indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise ShapeError("row offsets must start at 0 and be nondecreasing")
        if indptr[-1] != len(indices) or len(indices) != len(data):
            raise ShapeError("last row offset must equal the nonzero count")
        if len(indices) and (indices.min() < 0 or indices.max() >= cols):
            raise ShapeError("column index out of range")
        for r in range(rows):
            row_cols = indices[indptr[r]:indptr[r + 1]]
            if row_cols.size > 1 and np.any(np.diff(row_cols) <= 0):
                raise ShapeError(f"column indices in row {r} must be strictly increasing")
        _check_finite("SparseMatrix", data)
        for a in (indptr, indices, data):
            a.flags.writeable = False
        self.rows = int(rows)
        self.cols = int(cols)
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self._transpose: Optional["SparseMatrix"] = None

    @property
    def nnz(self) -> int:
        return len(self.data)

    @classmethod
    def from_coo(cls, rows: int, cols: int, row_idx, col_idx, values) -> "SparseMatrix":
        """Build CSR from coordinate triples; duplicate coordinates are an error."""
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (len(row_idx) == len(col_idx) == len(values)):
            raise ShapeError("coo arrays must have equal length")
        order = np.lexsort((col_idx, row_idx))
        row_idx, col_idx, values = row_idx[order], col_idx[order], values[order]
        if len(row_idx) > 1:
            same = (np.diff(row_idx) == 0) & (np.diff(col_idx) == 0)
            if same.any():
                raise ShapeError("duplicate coordinates in coo input")
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, row_idx + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(rows, cols, indptr, col_idx, values)

    @classmethod
    def from_dense(cls, arr) -> "SparseMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("from_dense requires a 2-D array")
        row_idx, col_idx = np.nonzero(arr)
        return cls.from_coo(arr.shape[0], arr.shape[1], row_idx, col_idx, arr[row_idx, col_idx])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        row_ids = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        out[row_ids, self.indices] = self.data
        return out

    def transpose(self) -> "SparseMatrix":
        if self._transpose is None:
            row_ids = np.repeat(np.arange(self.rows), np.diff(self.indptr))
            self._transpose = SparseMatrix.from_coo(
                self.cols, self.rows, self.indices, row_ids, self.data
            )
            self._transpose._transpose = self
        return self._transpose

    def matmat(self, dense: np.ndarray) -> np.ndarray:
        """CSR times dense, deterministic segment-sum reduction."""
        if self.cols != dense.shape[0]:
            raise ShapeError(f"spmm: {self.rows}x{self.cols} times {dense.shape} mismatch")
        out = np.zeros((self.rows, dense.shape[1]))
        if self.nnz == 0:
            return out
        contrib = self.data[:, None] * dense[self.indices]
        nnz_per_row = np.diff(self.indptr)
        mask = nnz_per_row > 0
        # reduceat segment starts are strictly increasing over non-empty rows
        out[mask] = np.add.reduceat(contrib, self.indptr[:-1][mask], axis=0)
        return out


# ---------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitives; construction order is topological."""

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        if popped is not self:
            raise AutodiffError("tape stack corrupted")

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _record(
    op: str,
    inputs: Sequence[Tensor],
    out_values: np.ndarray,
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    _check_finite(op, out_values)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_values, requires_grad=needs_grad)
    if needs_grad:
        tape = _active_tape()
        if tape is None:
            raise AutodiffError(f"{op}: input requires grad but no tape is active")
        out._tape = tape
        tape._records.append(_Record(op, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from loss."""
    if loss.values.shape != (1, 1):
        raise ShapeError(f"backward requires a 1x1 scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise AutodiffError("backward: loss is not attached to a tape")
    if tape._consumed:
        raise AutodiffError("backward: tape already consumed; run a new forward pass")
    loss.grad = np.ones((1, 1))
    for rec in reversed(tape._records):
        g_out = rec.out.grad
        if g_out is None:
            continue
        for t, g in zip(rec.inputs, rec.vjp(g_out)):
            if g is None or not t.requires_grad:
                continue
            _check_finite(f"{rec.op}.vjp", g)
            t.grad = g if t.grad is None else t.grad + g
    tape._consumed = True


# ---------------------------------------------------------------------------
# Broadcasting helpers (2-D only: each axis must match or be 1)


def _broadcast_shapes(op: str, a: tuple, b: tuple) -> tuple:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {a} and {b} not broadcastable")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} mismatch")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", (a, b), av @ bv, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("add", a.shape, b.shape)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record("add", (a, b), a.values + b.values, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_mul(b, -1.0))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("elementwise_mul", a.shape, b.shape)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)

    return _record("elementwise_mul", (a, b), av * bv, vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _record("scalar_mul", (a,), a.values * c, vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def vjp(g):
        return (g * mask,)

    return _record("relu", (a,), np.where(mask, a.values, 0.0), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign for a stable exp
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, vjp)


def clamp_min(a: Tensor, c: float) -> Tensor:
    c = float(c)
    mask = a.values >= c

    def vjp(g):
        return (g * mask,)

    return _record("clamp_min", (a,), np.maximum(a.values, c), vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ ({a.shape} vs {b.shape})")
    na = a.shape[1]

    def vjp(g):
        return g[:, :na], g[:, na:]

    return _record("concat_cols", (a, b), np.hstack([a.values, b.values]), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: column counts differ ({a.shape} vs {b.shape})")
    na = a.shape[0]

    def vjp(g):
        return g[:na], g[na:]

    return _record("concat_rows", (a, b), np.vstack([a.values, b.values]), vjp)


def row_gather(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("row_gather: index must be 1-D")
    if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row_gather: index out of range for {a.shape[0]} rows")
    ash = a.shape

    def vjp(g):
        ga = np.zeros(ash)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("row_gather", (a,), a.values[idx].copy(), vjp)


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows -> 1 x cols."""
    n = a.shape[0]
    if n == 0:
        raise ShapeError("row_mean of an empty tensor")

    def vjp(g):
        return (np.broadcast_to(g / n, (n, g.shape[1])).copy(),)

    return _record("row_mean", (a,), a.values.mean(axis=0, keepdims=True), vjp)


def col_mean(a: Tensor) -> Tensor:
    """Mean over columns -> rows x 1."""
    m = a.shape[1]
    if m == 0:
        raise ShapeError("col_mean of an empty tensor")

    def vjp(g):
        return (np.broadcast_to(g / m, (g.shape[0], m)).copy(),)

    return _record("col_mean", (a,), a.values.mean(axis=1, keepdims=True), vjp)


def mean_all(a: Tensor) -> Tensor:
    size = a.values.size
    if size == 0:
        raise ShapeError("mean_all of an empty tensor")
    ash = a.shape

    def vjp(g):
        return (np.full(ash, g.reshape(())) / size,)

    return _record("mean_all", (a,), np.array([[a.values.mean()]]), vjp)


def abs_mean(a: Tensor) -> Tensor:
    size = a.values.size
    if size == 0:
        raise ShapeError("abs_mean of an empty tensor")
    sign = np.sign(a.values)

    def vjp(g):
        return (sign * (g.reshape(()) / size),)

    return _record("abs_mean", (a,), np.array([[np.abs(a.values).mean()]]), vjp)


def log_softmax(a: Tensor) -> Tensor:
    if a.shape[1] == 0:
        raise ShapeError("log_softmax on a zero-width row")
    v = a.values
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def vjp(g):
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return _record("log_softmax", (a,), out, vjp)


def spmm(a: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse CSR times dense tensor; gradient flows to the dense side only."""
    if a.cols != x.shape[0]:
        raise ShapeError(f"spmm: {a.rows}x{a.cols} times {x.shape} mismatch")

    def vjp(g):
        return (a.transpose().matmat(g),)

    return _record("spmm", (x,), a.matmat(x.values), vjp)


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """(1/n) * sum_i w_i * (-log softmax(logits_i)[label_i]).

    All-ones weights reduce to the plain mean cross-entropy exactly.
    """
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"weighted_cross_entropy: {n} rows but {labels.shape} labels")
    if weights.shape != (n,):
        raise ShapeError(f"weighted_cross_entropy: {n} rows but {weights.shape} weights")
    if n == 0 or c == 0:
        raise ShapeError("weighted_cross_entropy on empty logits")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"weighted_cross_entropy: label out of range [0, {c})")
    if (weights < 0).any():
        raise AutodiffError("weighted_cross_entropy: negative weight")
    v = logits.values
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    nll = -log_probs[np.arange(n), labels]
    out = np.array([[float((weights * nll).mean())]])
    softmax = np.exp(log_probs)

    def vjp(g):
        gl = softmax.copy()
        gl[np.arange(n), labels] -= 1.0
        gl *= (weights / n)[:, None]
        return (gl * g.reshape(()),)

    return _record("weighted_cross_entropy", (logits,), out, vjp)


def _quantile_indices(count: int, q: int) -> np.ndarray:
    # Midpoint quantile levels of the empirical inverse CDF; for count == q
    # this reduces to the identity, matching the sorted-pairs formula.
    levels = (np.arange(q) + 0.5) / q
    return np.minimum((levels * count).astype(np.int64), count - 1)


def sorted_1d_wasserstein(a: Tensor, b: Tensor) -> Tensor:
    """W1 distance between empirical distributions, per column, averaged.

    Equal row counts pair sorted values directly; unequal counts are first
    resampled at WASSERSTEIN_QUANTILES equally spaced quantiles. The gradient
    flows through the sorted values with the forward permutation held fixed.
    """
    m, d = a.shape
    k, db = b.shape
    if m == 0 or k == 0:
        raise ShapeError("sorted_1d_wasserstein: empty input")
    if d != db:
        raise ShapeError(f"sorted_1d_wasserstein: column counts differ ({d} vs {db})")
    perm_a = np.argsort(a.values, axis=0, kind="stable")
    perm_b = np.argsort(b.values, axis=0, kind="stable")
    cols = np.arange(d)
    sa = a.values[perm_a, cols]
    sb = b.values[perm_b, cols]
    if m == k:
        ia = ib = None
        qa, qb = sa, sb
    else:
        q = WASSERSTEIN_QUANTILES
        ia = _quantile_indices(m, q)
        ib = _quantile_indices(k, q)
        qa, qb = sa[ia], sb[ib]
    diff = qa - qb
    out = np.array([[float(np.abs(diff).mean())]])
    sign = np.sign(diff) / diff.size

    def vjp(g):
        s = sign * g.reshape(())
        if ia is None:
            ga_sorted, gb_sorted = s, -s
        else:
            ga_sorted = np.zeros((m, d))
            gb_sorted = np.zeros((k, d))
            np.add.at(ga_sorted, ia, s)
            np.add.at(gb_sorted, ib, -s)
        ga = np.zeros((m, d))
        gb = np.zeros((k, d))
        np.put_along_axis(ga, perm_a, ga_sorted, axis=0)
        np.put_along_axis(gb, perm_b, gb_sorted, axis=0)
        return ga, gb

    return _record("sorted_1d_wasserstein", (a, b), out, vjp)
