"""Smoothed aggregation algebraic multigrid.

Strength of connection |a_ij| > theta * sqrt(a_ii a_jj), two-pass greedy
aggregation, one damped-Jacobi step to smooth the tentative prolongator,
Galerkin coarse operators and a symmetric V-cycle (forward SOR before
restriction, backward SOR after prolongation).

By default the tentative prolongator is the 0/1 aggregate indicator,
which represents constants exactly. Optional near-null-space candidates
(for instance constants and linear functions) generalise it: each
aggregate's block of candidates is orthonormalised by QR, giving several
coarse unknowns per aggregate. Strength and aggregation then act on the
amalgamated graph of nodes, with Frobenius norms of the node blocks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .sparse import (
    FLOPS,
    CsrMatrix,
    FlopCounter,
    residual,
    sor_sweep,
    spmv,
    spmv_transpose,
    triple_product,
)

DEFAULT_THETA = 0.01
DEFAULT_OMEGA = 2.0 / 3.0
DEFAULT_COARSEST = 64
STAGNATION_RATIO = 0.9


def strength_graph(a: CsrMatrix, theta: float, node_of_dof=None) -> CsrMatrix:
    """Strong couplings of ``a`` as a weighted adjacency matrix (no diagonal).

    Edge (i, j) is kept iff |a_ij| > theta * sqrt(a_ii a_jj); its weight is
    |a_ij|. The graph is symmetrised so that it is undirected even when
    ``a`` is symmetric only up to rounding. With ``node_of_dof`` the test
    is applied to node blocks, |a_ij| being replaced by the Frobenius norm
    of block (I, J).
    """
    if theta < 0:
        raise ValueError("theta must be non-negative")
    d = a.diagonal()
    if np.any(d <= 0):
        raise ValueError(f"non-positive diagonal in row {int(np.flatnonzero(d <= 0)[0])}")
    rows = a.row_ids()
    cols = a.col_indices
    if node_of_dof is None:
        vals = np.abs(a.values)
        n_nodes = a.n_rows
        dn = d
    else:
        node_of_dof = np.asarray(node_of_dof, dtype=np.int64)
        n_nodes = int(node_of_dof.max()) + 1
        rows, cols = node_of_dof[rows], node_of_dof[cols]
        sq = sp.csr_matrix((a.values**2, (rows, cols)), shape=(n_nodes, n_nodes))
        sq.sum_duplicates()
        dn = np.sqrt(sq.diagonal())
        coo = sq.tocoo()
        rows, cols, vals = coo.row, coo.col, np.sqrt(coo.data)
    keep = (rows != cols) & (vals > theta * np.sqrt(dn[rows] * dn[cols]))
    g = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n_nodes, n_nodes))
    g = g.maximum(g.T)
    return CsrMatrix.from_scipy(g)


@numba.njit(cache=True)
def _aggregate(indptr, indices, weights):
    n = indptr.size - 1
    agg = np.full(n, -1, dtype=np.int64)
    count = 0
    # pass 1: roots whose whole strong neighbourhood is still free
    for i in range(n):
        if agg[i] != -1:
            continue
        free = True
        for k in range(indptr[i], indptr[i + 1]):
            if agg[indices[k]] != -1:
                free = False
                break
        if free:
            agg[i] = count
            for k in range(indptr[i], indptr[i + 1]):
                agg[indices[k]] = count
            count += 1
    # pass 2: leftovers join the neighbouring pass-1 aggregate they couple to most strongly
    first = agg.copy()
    for i in range(n):
        if first[i] != -1:
            continue
        best = -1.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if first[j] != -1 and weights[k] > best:
                best = weights[k]
                agg[i] = first[j]
        if agg[i] == -1:
            agg[i] = count
            count += 1
    return agg, count


def aggregate(graph: CsrMatrix) -> np.ndarray:
    """Node -> aggregate id, covering every node exactly once."""
    agg, _ = _aggregate(graph.row_offsets, graph.col_indices, graph.values)
    return agg


def tentative_prolongator(aggregates) -> CsrMatrix:
    aggregates = np.asarray(aggregates, dtype=np.int64)
    n = aggregates.size
    n_agg = int(aggregates.max()) + 1 if n else 0
    if np.unique(aggregates).size != n_agg:
        raise ValueError("aggregate ids must be contiguous with no empty aggregates")
    return CsrMatrix(n, n_agg, np.arange(n + 1), aggregates, np.ones(n))


def fitted_prolongator(aggregates, node_of_dof, candidates, rank_tol: float = 1e-10):
    """Tentative prolongator that reproduces the candidate vectors.

    For each aggregate the candidate rows of its dofs are factored as
    Q R (thin QR); Q fills the aggregate's block of T and R becomes the
    coarse candidates, so that T @ coarse_candidates == candidates.
    Columns with |R_jj| below ``rank_tol`` times the block scale are
    dropped, which handles aggregates smaller than the candidate count.

    Returns ``(T, coarse_candidates, coarse_node_of_dof)``.
    """
    b = np.asarray(candidates, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    agg_of_dof = np.asarray(aggregates, dtype=np.int64)[np.asarray(node_of_dof, dtype=np.int64)]
    n, k = b.shape
    order = np.argsort(agg_of_dof, kind="stable")
    bounds = np.flatnonzero(np.diff(agg_of_dof[order])) + 1
    rows, cols, vals, coarse_rows, coarse_nodes = [], [], [], [], []
    n_coarse = 0
    for a_id, dofs in enumerate(np.split(order, bounds)):
        q, r = np.linalg.qr(b[dofs])
        scale = max(np.abs(r).max(), np.finfo(float).tiny)
        good = np.flatnonzero(np.abs(np.diag(r)) > rank_tol * scale)
        if good.size == 0:
            raise ValueError(f"candidates vanish on aggregate {a_id}")
        q, r = q[:, good], r[good]
        rows.append(np.repeat(dofs, good.size))
        cols.append(np.tile(np.arange(n_coarse, n_coarse + good.size), dofs.size))
        vals.append(q.ravel())
        coarse_rows.append(r)
        coarse_nodes.append(np.full(good.size, a_id))
        n_coarse += good.size
    t = CsrMatrix.from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n, n_coarse)
    )
    return t, np.vstack(coarse_rows), np.concatenate(coarse_nodes)


def filtered_operator(a: CsrMatrix, theta: float) -> CsrMatrix:
    """A with weak off-diagonals dropped and added to the diagonal.

    Row sums are preserved, so the filtered operator still annihilates
    whatever A annihilates row by row (the constant, for Neumann rows).
    """
    d = a.diagonal()
    rows = a.row_ids()
    off = rows != a.col_indices
    weak = off & (np.abs(a.values) <= theta * np.sqrt(np.abs(d[rows] * d[a.col_indices])))
    lumped = np.bincount(rows[weak], weights=a.values[weak], minlength=a.n_rows)
    keep = ~weak
    s = sp.csr_matrix((a.values[keep], (rows[keep], a.col_indices[keep])), shape=a.shape)
    return CsrMatrix.from_scipy(s + sp.diags(lumped))


def smoothed_prolongator(
    a: CsrMatrix,
    aggregates,
    omega: float = DEFAULT_OMEGA,
    tentative: CsrMatrix | None = None,
    filter_theta: float | None = None,
) -> CsrMatrix:
    """P = (I - omega D^-1 A) T.

    T is the aggregate indicator matrix unless a ``tentative`` prolongator
    is passed in. With ``filter_theta`` the smoother uses
    ``filtered_operator(a, filter_theta)`` in place of A (off by default).
    """
    if filter_theta is not None:
        a = filtered_operator(a, filter_theta)
    d = a.diagonal()
    if np.any(d == 0):
        raise ZeroDivisionError(f"zero diagonal in row {int(np.flatnonzero(d == 0)[0])}")
    t = tentative_prolongator(aggregates) if tentative is None else tentative
    if omega == 0:
        return t
    ts = t.to_scipy()
    at = sp.diags(1.0 / d) @ (a.to_scipy() @ ts)
    return CsrMatrix.from_scipy(ts - omega * at)


@dataclass(frozen=True, eq=False)
class SorConfig:
    direction: str = "forward"
    omega: float = 1.0
    sweeps: int = 1


@dataclass(eq=False)
class AmgLevel:
    a: CsrMatrix
    p: CsrMatrix | None = None          # prolongator from this level to the finer one
    aggregates: np.ndarray | None = None  # finer node -> this level's node
    presmoother: SorConfig = field(default_factory=lambda: SorConfig("forward"))
    postsmoother: SorConfig = field(default_factory=lambda: SorConfig("backward"))


@dataclass(eq=False)
class AmgHierarchy:
    levels: list[AmgLevel]
    coarsest_factor: tuple
    strength_threshold: float
    prolongator_omega: float

    @property
    def n(self) -> int:
        return self.levels[0].a.n_rows

    def operator_complexity(self) -> float:
        return sum(lv.a.nnz for lv in self.levels) / self.levels[0].a.nnz

    def summary_rows(self) -> list[tuple[int, int, int]]:
        return [(k, lv.a.n_rows, lv.a.nnz) for k, lv in enumerate(self.levels)]

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "size", "nnz", "operator_complexity"])
            for k, size, nnz in self.summary_rows():
                w.writerow([k, size, nnz, repr(self.operator_complexity())])

    def vcycle(self, b, x0=None, flops: FlopCounter | None = None) -> np.ndarray:
        return vcycle(self, b, x0, flops)

    def as_preconditioner(self, flops: FlopCounter | None = None) -> "AmgPreconditioner":
        return AmgPreconditioner(self, flops)


def build_hierarchy(
    a: CsrMatrix,
    theta: float = DEFAULT_THETA,
    omega: float = DEFAULT_OMEGA,
    coarsest_cap: int = DEFAULT_COARSEST,
    max_levels: int = 25,
    presmoother: SorConfig | None = None,
    postsmoother: SorConfig | None = None,
    candidates=None,
    filtered: bool = False,
) -> AmgHierarchy:
    """Coarsen until the operator has at most ``coarsest_cap`` unknowns.

    ``candidates`` (n x k) are near-null-space vectors to be reproduced by
    every tentative prolongator; None means the constant vector with the
    plain 0/1 indicator prolongator. ``filtered`` smooths the prolongator
    with the strength-filtered operator instead of A.
    """
    pre = presmoother or SorConfig("forward")
    post = postsmoother or SorConfig("backward")
    levels = [AmgLevel(a, presmoother=pre, postsmoother=post)]
    scratch = FlopCounter()  # setup cost is not part of the solve flop count
    node_of_dof = None
    b = None if candidates is None else np.asarray(candidates, dtype=np.float64)
    if b is not None and b.shape[0] != a.n_rows:
        raise ValueError("candidates must have one row per unknown")
    while levels[-1].a.n_rows > coarsest_cap and len(levels) < max_levels:
        fine = levels[-1].a
        agg = aggregate(strength_graph(fine, theta, node_of_dof))
        if b is None:
            t = None
            n_coarse = int(agg.max()) + 1
        else:
            nodes = np.arange(fine.n_rows) if node_of_dof is None else node_of_dof
            t, b_coarse, nodes_coarse = fitted_prolongator(agg, nodes, b)
            n_coarse = t.n_cols
        if n_coarse > STAGNATION_RATIO * fine.n_rows:
            break
        p = smoothed_prolongator(fine, agg, omega, t, theta if filtered else None)
        levels.append(AmgLevel(triple_product(p, fine, scratch), p, agg, pre, post))
        if b is not None:
            b, node_of_dof = b_coarse, nodes_coarse
    coarse = levels[-1].a.to_dense()
    factor = scipy.linalg.cho_factor(coarse, lower=True)
    return AmgHierarchy(levels, factor, theta, omega)


def _smooth(a, x, b, cfg: SorConfig, flops):
    for _ in range(cfg.sweeps):
        sor_sweep(a, x, b, cfg.omega, cfg.direction, flops)


def _cycle(h: AmgHierarchy, k: int, b, x, fc: FlopCounter):
    lv = h.levels[k]
    if k == len(h.levels) - 1:
        r = b if not x.any() else residual(lv.a, x, b, fc)
        x += scipy.linalg.cho_solve(h.coarsest_factor, r)
        fc.add(2 * lv.a.n_rows**2 + lv.a.n_rows)
        return x
    _smooth(lv.a, x, b, lv.presmoother, fc)
    nxt = h.levels[k + 1]
    rc = spmv_transpose(nxt.p, residual(lv.a, x, b, fc), fc)
    xc = _cycle(h, k + 1, rc, np.zeros(nxt.a.n_rows), fc)
    x += spmv(nxt.p, xc, fc)
    fc.add(lv.a.n_rows)
    _smooth(lv.a, x, b, lv.postsmoother, fc)
    return x


def vcycle(h: AmgHierarchy, b, x0=None, flops: FlopCounter | None = None) -> np.ndarray:
    """One V-cycle for A x = b starting from ``x0`` (zero by default)."""
    fc = FLOPS if flops is None else flops
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.shape != (h.n,):
        raise ValueError(f"right-hand side of length {b.size} for a hierarchy of size {h.n}")
    x = np.zeros(h.n) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (h.n,):
        raise ValueError("initial guess has the wrong length")
    return _cycle(h, 0, b, x, fc)


class AmgPreconditioner:
    """A fixed V-cycle from a zero initial guess, usable inside CG."""

    name = "amg"

    def __init__(self, hierarchy: AmgHierarchy, flops: FlopCounter | None = None):
        self.hierarchy = hierarchy
        self.flops = flops

    def __call__(self, r):
        return vcycle(self.hierarchy, r, None, self.flops)
