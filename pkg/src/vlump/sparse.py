"""Compressed sparse row storage and the flop-counted kernels built on it.

Flop model: one flop per floating add, subtract, multiply or divide done
inside a kernel. Index arithmetic is free. The totals only need to be
consistent between preconditioners, not comparable to any other library.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.io
import scipy.sparse as sp


class FlopCounter:
    """Monotone count of floating point operations."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    def reset(self) -> None:
        self.total = 0


#: Counter used by every kernel unless another one is passed in.
FLOPS = FlopCounter()


def _counter(flops: FlopCounter | None) -> FlopCounter:
    return FLOPS if flops is None else flops


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Immutable CSR matrix with sorted, duplicate-free column indices."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _diag: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        va = np.ascontiguousarray(self.values, dtype=np.float64)
        if ro.shape != (self.n_rows + 1,) or ro[0] != 0 or ro[-1] != ci.size:
            raise ValueError("row_offsets inconsistent with shape/nnz")
        if ci.size != va.size:
            raise ValueError("col_indices and values differ in length")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        if not _rows_strictly_sorted(ro, ci):
            raise ValueError("column indices must be strictly ascending per row")
        for name, arr in (("row_offsets", ro), ("col_indices", ci), ("values", va)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        """Canonicalise any scipy sparse matrix (duplicates summed, sorted)."""
        m = sp.csr_matrix(m, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a, drop_zeros: bool = True) -> "CsrMatrix":
        a = np.asarray(a, dtype=np.float64)
        m = sp.csr_matrix(a)
        if not drop_zeros:
            rows, cols = np.indices(a.shape)
            m = sp.csr_matrix((a.ravel(), (rows.ravel(), cols.ravel())), shape=a.shape)
        return cls.from_scipy(m)

    @classmethod
    def from_triplets(cls, rows, cols, vals, shape) -> "CsrMatrix":
        """Build from coordinate triplets; repeated (i, j) pairs are summed.

        Duplicates are summed sequentially in input order, so (i, j) and
        (j, i) come out bitwise equal whenever their contributions are.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        n_rows, n_cols = shape
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
            raise IndexError("triplet index out of range")
        order = np.lexsort((cols, rows))  # stable: ties keep input order
        r, c, v = rows[order], cols[order], vals[order]
        new = np.ones(r.size, dtype=bool)
        new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        starts = np.flatnonzero(new)
        summed = _segment_sums(v, starts)
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(offsets, r[starts] + 1, 1)
        return cls(n_rows, n_cols, np.cumsum(offsets), c[starts], summed)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_scipy(self) -> sp.csr_matrix:
        # shares the (read-only) buffers
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape, copy=False
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        if self._diag is None:
            object.__setattr__(self, "_diag", self.to_scipy().diagonal().copy())
        return self._diag

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.to_scipy().T)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))

    def max_asymmetry(self) -> float:
        """max |a_ij - a_ji| over stored pairs, relative to max |a_ij|."""
        if self.n_rows != self.n_cols:
            raise ValueError("asymmetry is only defined for square matrices")
        s = self.to_scipy()
        scale = np.abs(self.values).max() if self.nnz else 0.0
        if scale == 0.0:
            return 0.0
        return float(abs(s - s.T).max()) / scale

    def __matmul__(self, x):
        return spmv(self, x)


@numba.njit(cache=True)
def _segment_sums(v, starts):
    out = np.empty(starts.size)
    for k in range(starts.size):
        end = starts[k + 1] if k + 1 < starts.size else v.size
        acc = 0.0
        for t in range(starts[k], end):
            acc += v[t]
        out[k] = acc
    return out


@numba.njit(cache=True)
def _rows_strictly_sorted(ro, ci):
    for i in range(ro.size - 1):
        for k in range(ro[i] + 1, ro[i + 1]):
            if ci[k] <= ci[k - 1]:
                return False
    return True


def spmv(a: CsrMatrix, x, flops: FlopCounter | None = None) -> np.ndarray:
    """y = A x. Counts 2*nnz flops."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != a.n_cols:
        raise ValueError(f"spmv: vector of length {x.size} for matrix {a.shape}")
    _counter(flops).add(2 * a.nnz)
    return a.to_scipy() @ x


def spmv_transpose(a: CsrMatrix, x, flops: FlopCounter | None = None) -> np.ndarray:
    """y = A^T x without forming the transpose. Counts 2*nnz flops."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != a.n_rows:
        raise ValueError(f"spmv_transpose: vector of length {x.size} for matrix {a.shape}")
    _counter(flops).add(2 * a.nnz)
    return a.to_scipy().T @ x


def residual(a: CsrMatrix, x, b, flops: FlopCounter | None = None) -> np.ndarray:
    """b - A x. Counts 2*nnz + n flops."""
    r = b - spmv(a, x, flops)
    _counter(flops).add(a.n_rows)
    return r


def triple_product(p: CsrMatrix, a: CsrMatrix, flops: FlopCounter | None = None) -> CsrMatrix:
    """Galerkin product P^T A P, formed as P^T (A P).

    Both products run through scipy's two-phase (symbolic then numeric)
    SpGEMM; the result is canonicalised (sorted, duplicates merged).
    """
    if a.n_rows != a.n_cols or p.n_rows != a.n_rows:
        raise ValueError(f"triple_product: P {p.shape} incompatible with A {a.shape}")
    ap = a.to_scipy() @ p.to_scipy()
    c = p.to_scipy().T.tocsr() @ ap
    _counter(flops).add(2 * ap.nnz + 2 * c.nnz)
    return CsrMatrix.from_scipy(c)


def extract_submatrix(a: CsrMatrix, rows, cols) -> CsrMatrix:
    """Block of A on the given row and column index lists, order preserved."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    for name, idx, bound in (("row", rows, a.n_rows), ("column", cols, a.n_cols)):
        if idx.size and (idx.min() < 0 or idx.max() >= bound):
            raise IndexError(f"{name} index out of range for matrix {a.shape}")
        if np.unique(idx).size != idx.size:
            raise ValueError(f"duplicate {name} indices")
    return CsrMatrix.from_scipy(a.to_scipy()[rows][:, cols])


@numba.njit(cache=True)
def _sor_forward(ro, ci, va, diag, x, b, omega):
    n = ro.size - 1
    for i in range(n):
        s = b[i]
        for k in range(ro[i], ro[i + 1]):
            j = ci[k]
            if j != i:
                s -= va[k] * x[j]
        x[i] = (1.0 - omega) * x[i] + omega * (s / diag[i])


@numba.njit(cache=True)
def _sor_backward(ro, ci, va, diag, x, b, omega):
    n = ro.size - 1
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(ro[i], ro[i + 1]):
            j = ci[k]
            if j != i:
                s -= va[k] * x[j]
        x[i] = (1.0 - omega) * x[i] + omega * (s / diag[i])


def sor_flops(a: CsrMatrix) -> int:
    """Flops of one SOR sweep: 2 per off-diagonal entry, 4 per row."""
    return 2 * a.nnz + 2 * a.n_rows


def check_diagonal(a: CsrMatrix) -> np.ndarray:
    d = a.diagonal()
    bad = np.flatnonzero(d == 0.0)
    if bad.size:
        raise ZeroDivisionError(f"zero diagonal entry in row {int(bad[0])}")
    return d


def sor_sweep(
    a: CsrMatrix,
    x: np.ndarray,
    b,
    omega: float = 1.0,
    direction: str = "forward",
    flops: FlopCounter | None = None,
) -> None:
    """One in-place SOR sweep over the rows of ``a`` (Gauss-Seidel for omega=1)."""
    if a.n_rows != a.n_cols:
        raise ValueError("sor_sweep needs a square matrix")
    if not 0.0 < omega < 2.0:
        raise ValueError(f"omega={omega} outside (0, 2)")
    if x.dtype != np.float64 or x.size != a.n_rows or not x.flags.writeable:
        raise ValueError("x must be a writeable float64 vector of matching length")
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.size != a.n_rows:
        raise ValueError("b length does not match matrix")
    diag = check_diagonal(a)
    if direction == "forward":
        _sor_forward(a.row_offsets, a.col_indices, a.values, diag, x, b, omega)
    elif direction == "backward":
        _sor_backward(a.row_offsets, a.col_indices, a.values, diag, x, b, omega)
    else:
        raise ValueError(f"unknown sweep direction {direction!r}")
    _counter(flops).add(sor_flops(a))


def write_matrix_market(path, a: CsrMatrix, symmetric: bool = False) -> None:
    """Write ``a`` in Matrix Market coordinate real format."""
    scipy.io.mmwrite(
        str(path), a.to_scipy().tocoo(), field="real",
        symmetry="symmetric" if symmetric else "general",
    )


def read_matrix_market(path) -> CsrMatrix:
    return CsrMatrix.from_scipy(scipy.io.mmread(str(Path(path))))
