"""Dense float32 kernels shared by the centralized oracle and the per-device executor.

Matrix products accumulate in float32 with a fixed k-major loop order. This
costs speed but buys an exactness property BLAS does not give: taking a column
subset of the right operand, or zeroing rows instead of skipping them, yields
bit-identical results. Distributed-vs-central equivalence checks can therefore
assert exact equality instead of a tolerance.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInputError, ShapeError

DTYPE = np.float32
LAYERNORM_EPS = 1e-5

# A Matrix is a 2-D C-contiguous float32 ndarray (rows = tokens, cols = features).
Matrix = np.ndarray
# A ColumnSet is a 1-D int64 ndarray of strictly increasing column indices.
ColumnSet = np.ndarray


def as_matrix(values) -> Matrix:
    """Coerce to a 2-D float32 matrix."""
    a = np.ascontiguousarray(values, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def as_vector(values, length: int, name: str = "vector") -> np.ndarray:
    a = np.ascontiguousarray(values, dtype=DTYPE)
    if a.ndim != 1 or a.shape[0] != length:
        raise ShapeError(f"{name} must be 1-D of length {length}, got shape {a.shape}")
    return a


def column_set(indices, width: int) -> ColumnSet:
    """Normalize indices into a sorted, duplicate-free ColumnSet bounded by width."""
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.ndim != 1:
        raise ShapeError("column indices must be 1-D")
    if idx.size and (idx[0] < 0 or idx[-1] >= width):
        raise ShapeError(f"column index out of range [0, {width})")
    return idx


def full_columns(width: int) -> ColumnSet:
    return np.arange(width, dtype=np.int64)


def _ensure_finite(a: Matrix, op: str) -> Matrix:
    if a.size and not np.isfinite(a).all():
        raise ShapeError(f"{op} produced non-finite values")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with float32 accumulation in fixed k-ascending order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=DTYPE)
    if n == 0 or m == 0:
        return out
    tmp = np.empty((n, m), dtype=DTYPE)
    for kk in range(k):
        np.multiply(a[:, kk, None], b[kk, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return _ensure_finite(out, "matmul")


def masked_matmul(a: Matrix, b: Matrix, held: ColumnSet) -> Matrix:
    """Product restricted to the held columns of a and matching rows of b.

    Columns of a outside `held` contribute nothing, exactly as if the
    corresponding rows of b were zero.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"masked_matmul: inner dimensions differ ({a.shape} x {b.shape})")
    held = column_set(held, a.shape[1])
    if held.size == a.shape[1]:
        return matmul(a, b)
    if held.size == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    return matmul(np.ascontiguousarray(a[:, held]), np.ascontiguousarray(b[held, :]))


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with max-subtraction for overflow safety."""
    a = as_matrix(a)
    if a.shape[1] == 0:
        return a.copy()
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=DTYPE)
    out = e / e.sum(axis=1, keepdims=True, dtype=DTYPE)
    return _ensure_finite(out, "softmax_rows")


def layernorm_rows(
    a: Matrix,
    stat_cols: ColumnSet,
    gamma,
    beta,
    eps: float = LAYERNORM_EPS,
) -> Matrix:
    """Row layernorm whose statistics use only stat_cols.

    Normalization, scale and shift are applied to the stat_cols entries;
    columns outside stat_cols pass through unchanged (a device never touches
    columns it does not hold). Variance is the population variance and eps is
    added inside the square root.
    """
    a = as_matrix(a)
    stat = column_set(stat_cols, a.shape[1])
    if stat.size == 0:
        raise DegenerateInputError("layernorm_rows: stat_cols is empty")
    gamma = as_vector(gamma, a.shape[1], "gamma")
    beta = as_vector(beta, a.shape[1], "beta")
    sub = np.ascontiguousarray(a[:, stat])
    mu = sub.mean(axis=1, keepdims=True, dtype=DTYPE)
    var = np.mean((sub - mu) ** 2, axis=1, keepdims=True, dtype=DTYPE)
    xhat = (sub - mu) / np.sqrt(var + DTYPE(eps))
    out = a.copy()
    out[:, stat] = xhat * gamma[stat] + beta[stat]
    return _ensure_finite(out, "layernorm_rows")


def activation(a: Matrix, kind: str) -> Matrix:
    """Element-wise activation, kind in {relu, gelu} (gelu uses the tanh form)."""
    a = as_matrix(a)
    if kind == "relu":
        out = np.maximum(a, DTYPE(0))
    elif kind == "gelu":
        c0 = DTYPE(0.5)
        c1 = DTYPE(math.sqrt(2.0 / math.pi))
        c2 = DTYPE(0.044715)
        inner = c1 * (a + c2 * a * a * a)
        out = c0 * a * (DTYPE(1) + np.tanh(inner, dtype=DTYPE))
    else:
        raise ShapeError(f"unknown activation kind: {kind!r}")
    return _ensure_finite(out, "activation")


def attention_head(q: Matrix, k: Matrix, v: Matrix) -> Matrix:
    """Scaled dot-product attention for a single head."""
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ShapeError(f"attention_head: inconsistent shapes {q.shape}, {k.shape}, {v.shape}")
    scale = DTYPE(math.sqrt(q.shape[1]))
    scores = matmul(q, np.ascontiguousarray(k.T)) / scale
    return matmul(softmax_rows(scores), v)
