"""Dense/sparse primitives: CSR matrices, Kronecker-structured products,
matrix norms, and the row-wise l1-ball projection.

Conventions used throughout the package:

* dense matrices are float64 ``numpy.ndarray`` in row-major order;
* embeddings ``Z`` are laid out (dim, num_nodes), one column per node;
* ``vec``/``unvec`` stack columns (column-major flattening), so
  ``vec(W @ Z @ A) == kron(A.T, W) @ vec(Z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvergenceError, ShapeError

__all__ = [
    "CsrMatrix",
    "vec",
    "unvec",
    "spmm",
    "spmm_t",
    "kron_apply",
    "infinity_norm",
    "operator_norm",
    "project_linf_ball",
]


def _as_float_matrix(arr, name):
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return out


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix.

    PARAMETERS
        n_rows, n_cols : matrix dimensions
        indptr  : int64 array, length n_rows + 1, monotone nondecreasing
        indices : int64 array of column indices, strictly increasing within
                  each row and in [0, n_cols)
        data    : float64 array of nonzero values, all finite

    Values are immutable by convention once constructed; the transpose is
    built lazily and cached because adjacency matrices are reused across
    many sweeps.
    """

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _transpose: "CsrMatrix | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.n_rows < 0 or self.n_cols < 0:
            raise ShapeError("matrix dimensions must be nonnegative")
        if self.indptr.shape != (self.n_rows + 1,):
            raise ShapeError("indptr must have length n_rows + 1")
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise ShapeError("indptr must start at 0 and end at nnz")
        if np.any(np.diff(self.indptr) < 0):
            raise ShapeError("indptr must be monotone nondecreasing")
        if len(self.indices) != len(self.data):
            raise ShapeError("indices and data length mismatch")
        if len(self.indices) > 0:
            if self.indices.min() < 0 or self.indices.max() >= self.n_cols:
                raise ShapeError("column index out of range")
            for i in range(self.n_rows):
                row = self.indices[self.indptr[i] : self.indptr[i + 1]]
                if len(row) > 1 and np.any(np.diff(row) <= 0):
                    raise ShapeError(f"column indices not strictly increasing in row {i}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("nonzero values must be finite")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.data)

    @classmethod
    def from_dense(cls, arr):
        arr = _as_float_matrix(arr, "dense input")
        n_rows, n_cols = arr.shape
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        indices = []
        data = []
        for i in range(n_rows):
            (cols,) = np.nonzero(arr[i])
            indices.append(cols)
            data.append(arr[i, cols])
            indptr[i + 1] = indptr[i] + len(cols)
        indices = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
        data = np.concatenate(data) if data else np.zeros(0)
        return cls(n_rows, n_cols, indptr, indices, data)

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals):
        """Build from coordinate triplets; duplicate coordinates are rejected."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (len(rows) == len(cols) == len(vals)):
            raise ShapeError("coordinate arrays must have equal length")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1:
            same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if np.any(same):
                raise ShapeError("duplicate coordinates in sparse input")
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        if len(rows) > 0 and (rows.min() < 0 or rows.max() >= n_rows):
            raise ShapeError("row index out of range")
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(n_rows, n_cols, indptr, cols, vals)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    def to_dense(self):
        out = np.zeros((self.n_rows, self.n_cols))
        for i in range(self.n_rows):
            sl = slice(self.indptr[i], self.indptr[i + 1])
            out[i, self.indices[sl]] = self.data[sl]
        return out

    @property
    def T(self):
        if self._transpose is None:
            coo_rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
            t = CsrMatrix.from_coo(self.n_cols, self.n_rows, self.indices, coo_rows, self.data)
            self._transpose = t
            t._transpose = self
        return self._transpose

    def matmat(self, B):
        """self @ B for a dense row-major B of shape (n_cols, k)."""
        B = np.ascontiguousarray(B, dtype=np.float64)
        if B.shape[0] != self.n_cols:
            raise ShapeError(f"inner dimensions disagree: {self.shape} @ {B.shape}")
        out = np.empty((self.n_rows, B.shape[1]))
        kernels.csr_matmat(self.indptr, self.indices, self.data, B, out)
        return out


def vec(Z):
    """Column-major flattening of a matrix into a vector."""
    return np.asarray(Z, dtype=np.float64).reshape(-1, order="F")


def unvec(z, dim, n):
    """Inverse of :func:`vec` for a (dim, n) matrix."""
    z = np.asarray(z, dtype=np.float64)
    if z.size != dim * n:
        raise ShapeError(f"cannot reshape length-{z.size} vector to ({dim}, {n})")
    return z.reshape((dim, n), order="F")


def spmm(Z, A):
    """Z @ A for dense Z (d, n) and sparse A (n, m).

    Computed as (A.T @ Z.T).T so the kernel streams contiguous rows.
    """
    Z = _as_float_matrix(Z, "Z")
    if Z.shape[1] != A.n_rows:
        raise ShapeError(f"inner dimensions disagree: {Z.shape} @ {A.shape}")
    return A.T.matmat(Z.T).T


def spmm_t(Z, A):
    """Z @ A.T for dense Z (d, m) and sparse A (n, m)."""
    Z = _as_float_matrix(Z, "Z")
    if Z.shape[1] != A.n_cols:
        raise ShapeError(f"inner dimensions disagree: {Z.shape} @ {A.shape}^T")
    return A.matmat(Z.T).T


def kron_apply(W, A, Z):
    """Apply the Kronecker-structured operator kron(A.T, W) to vec(Z).

    Returned in matrix form: W @ Z @ A. The (dn x dn) operator is never
    materialized outside test oracles.
    """
    W = _as_float_matrix(W, "W")
    Z = _as_float_matrix(Z, "Z")
    if W.shape[1] != Z.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {W.shape} @ {Z.shape}")
    return spmm(W @ Z, A)


def infinity_norm(W):
    """Max over rows of the sum of absolute entries."""
    W = _as_float_matrix(W, "W")
    if W.size == 0:
        return 0.0
    return float(np.abs(W).sum(axis=1).max())


def _matvec(A, x):
    if isinstance(A, CsrMatrix):
        return A.matmat(x[:, None])[:, 0]
    return A @ x


def _rmatvec(A, x):
    if isinstance(A, CsrMatrix):
        return A.T.matmat(x[:, None])[:, 0]
    return A.T @ x


def operator_norm(A, tol=1e-7, max_iter=1000):
    """Largest singular value of a square matrix via power iteration on A^T A.

    PARAMETERS
        A        : CsrMatrix or dense ndarray, square
        tol      : relative tolerance on successive estimates
        max_iter : iteration budget

    Stops when two successive estimates differ by less than tol (relative).
    Raises ConvergenceError with the last estimate if the budget runs out.
    The defaults are loose on purpose: the value only gates a constraint
    radius, never the loss itself.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    shape = A.shape
    if shape[0] != shape[1]:
        raise ShapeError(f"operator_norm requires a square matrix, got {shape}")
    n = shape[0]
    if n == 0:
        return 0.0
    if isinstance(A, CsrMatrix):
        if A.nnz == 0:
            return 0.0
    elif not np.any(A):
        return 0.0
    rng = np.random.default_rng(0)
    for _ in range(3):  # rare restart if the start vector hits a null space
        x = rng.standard_normal(n)
        x /= np.linalg.norm(x)
        sigma = 0.0
        for _ in range(max_iter):
            y = _rmatvec(A, _matvec(A, x))
            norm_y = np.linalg.norm(y)
            if norm_y == 0.0:
                break
            sigma_new = float(np.sqrt(x @ y if x @ y > 0 else norm_y))
            x = y / norm_y
            if abs(sigma_new - sigma) <= tol * max(sigma_new, 1e-30):
                return sigma_new
            sigma = sigma_new
        else:
            raise ConvergenceError(
                f"power iteration did not converge in {max_iter} iterations",
                last_estimate=sigma,
            )
    return 0.0


def _project_row_l1(v, radius):
    a = np.abs(v)
    total = a.sum()
    if total <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(u) + 1)
    valid = np.nonzero(u * ks > css - radius)[0]
    k = valid[-1]
    theta = (css[k] - radius) / (k + 1.0)
    w = np.sign(v) * np.maximum(a - theta, 0.0)
    s = np.abs(w).sum()
    if s > radius > 0:  # guard against float overshoot at the boundary
        w *= radius / s
    return w


def project_linf_ball(W, radius):
    """Euclidean projection of W onto the set { M : ||M||_inf <= radius }.

    The infinity-induced norm ball factors over rows, so each row is
    independently projected onto the l1 ball of the given radius using the
    sort-and-threshold rule. Idempotent; feasible inputs come back
    value-unchanged.
    """
    if radius <= 0:
        raise ValueError("projection radius must be positive")
    W = _as_float_matrix(W, "W")
    out = np.empty_like(W)
    for i in range(W.shape[0]):
        out[i] = _project_row_l1(W[i], radius)
    return out
