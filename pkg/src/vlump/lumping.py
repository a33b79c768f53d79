"""Vertically lumped coarse space and the two preconditioners built on it.

Every node is projected straight up onto the top-surface triangulation and
receives the barycentric weights of the triangle it lands in. The
resulting extrapolation matrix E~ (n x surface) lumps the 3D problem onto
the surface; E~^T A E~ is the coarse operator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
import scipy.linalg

from .amg import AmgHierarchy, build_hierarchy, vcycle
from .fem import AssembledSystem, decompose
from .mesh import SurfaceMesh, TetMesh, extract_top_surface
from .sparse import (
    FLOPS,
    CsrMatrix,
    FlopCounter,
    residual,
    sor_sweep,
    spmv,
    spmv_transpose,
    triple_product,
    write_matrix_market,
)

DENSE_LIMIT = 500
SNAP = 1e-9          # relative to the footprint diameter
FALLBACK = 1e-6      # nearest-triangle fallback, same scale
BARY_ZERO = 1e-12    # barycentric weights below this are dropped

VL_SOR = "vl-sor"
VL_ADD = "vl-add"


class ProjectionError(ValueError):
    pass


# ------------------------------------------------------------ point location


@numba.njit(cache=True)
def _cell_range(lo, hi, origin, h, g):
    a = int((lo - origin) / h)
    b = int((hi - origin) / h)
    return max(0, min(a, g - 1)), max(0, min(b, g - 1))


@numba.njit(cache=True)
def _bin_triangles(tri_xy, origin_x, origin_y, h, g):
    t = tri_xy.shape[0]
    counts = np.zeros(g * g + 1, dtype=np.int64)
    for k in range(t):
        x0, x1 = _cell_range(tri_xy[k, :, 0].min(), tri_xy[k, :, 0].max(), origin_x, h, g)
        y0, y1 = _cell_range(tri_xy[k, :, 1].min(), tri_xy[k, :, 1].max(), origin_y, h, g)
        for i in range(x0, x1 + 1):
            for j in range(y0, y1 + 1):
                counts[i * g + j + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for k in range(t):
        x0, x1 = _cell_range(tri_xy[k, :, 0].min(), tri_xy[k, :, 0].max(), origin_x, h, g)
        y0, y1 = _cell_range(tri_xy[k, :, 1].min(), tri_xy[k, :, 1].max(), origin_y, h, g)
        for i in range(x0, x1 + 1):
            for j in range(y0, y1 + 1):
                items[fill[i * g + j]] = k
                fill[i * g + j] += 1
    return offsets, items


@numba.njit(cache=True)
def _barycentric(tri, px, py):
    ax, ay = tri[0, 0], tri[0, 1]
    bx, by = tri[1, 0], tri[1, 1]
    cx, cy = tri[2, 0], tri[2, 1]
    det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
    l1 = ((px - ax) * (cy - ay) - (cx - ax) * (py - ay)) / det
    l2 = ((bx - ax) * (py - ay) - (px - ax) * (by - ay)) / det
    return 1.0 - l1 - l2, l1, l2


@numba.njit(cache=True)
def _outside_distance(tri, px, py):
    # largest signed distance past an edge line; 0 inside, a lower bound outside
    worst = 0.0
    for e in range(3):
        ax, ay = tri[e, 0], tri[e, 1]
        bx, by = tri[(e + 1) % 3, 0], tri[(e + 1) % 3, 1]
        ex, ey = bx - ax, by - ay
        d = ((px - ax) * ey - (py - ay) * ex) / np.sqrt(ex * ex + ey * ey)
        if d > worst:
            worst = d
    return worst


@numba.njit(cache=True)
def _locate(points, tri_xy, offsets, items, origin_x, origin_y, h, g, snap):
    m = points.shape[0]
    found = np.full(m, -1, dtype=np.int64)
    dist = np.full(m, np.inf)
    for p in range(m):
        px, py = points[p, 0], points[p, 1]
        i, _ = _cell_range(px, px, origin_x, h, g)
        j, _ = _cell_range(py, py, origin_y, h, g)
        c = i * g + j
        for q in range(offsets[c], offsets[c + 1]):
            k = items[q]
            d = _outside_distance(tri_xy[k], px, py)
            if d < dist[p]:
                dist[p] = d
                found[p] = k
                if d == 0.0:
                    break
        if dist[p] > snap:
            found[p] = -1
    return found


def _point_triangle_distance(tri_xy, p) -> np.ndarray:
    """Euclidean distance from point p to every triangle (vectorised)."""
    a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    inside = np.ones(len(tri_xy), dtype=bool)
    best = np.full(len(tri_xy), np.inf)
    for u, v in ((a, b), (b, c), (c, a)):
        e = v - u
        w = p - u
        inside &= (e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0]) >= 0
        t = np.clip((w * e).sum(axis=1) / (e * e).sum(axis=1), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(w - t[:, None] * e, axis=1))
    return np.where(inside, 0.0, best)


class SurfaceLocator:
    """Uniform background grid over the surface bounding box."""

    def __init__(self, surface: SurfaceMesh):
        self.tri_xy = np.ascontiguousarray(surface.planar_coords[surface.triangles])
        xy = surface.planar_coords
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        self.diameter = float(np.linalg.norm(hi - lo))
        self.g = max(1, int(np.sqrt(len(surface.triangles))))
        self.h = float(max(hi - lo)) / self.g * (1 + 1e-12) or 1.0
        self.origin = lo
        self.offsets, self.items = _bin_triangles(self.tri_xy, lo[0], lo[1], self.h, self.g)

    def locate(self, points, node_ids=None) -> np.ndarray:
        """Containing triangle per point; raises on points off the footprint."""
        points = np.ascontiguousarray(points, dtype=np.float64)
        tri = _locate(points, self.tri_xy, self.offsets, self.items,
                      self.origin[0], self.origin[1], self.h, self.g, SNAP * self.diameter)
        for p in np.flatnonzero(tri < 0):
            d = _point_triangle_distance(self.tri_xy, points[p])
            k = int(np.argmin(d))
            if d[k] > FALLBACK * self.diameter:
                who = p if node_ids is None else int(node_ids[p])
                raise ProjectionError(
                    f"node {who} at (x, y) = ({points[p, 0]:.6g}, {points[p, 1]:.6g}) projects "
                    f"outside the top surface (distance {d[k]:.3g})"
                )
            tri[p] = k
        return tri

    def weights(self, points, triangles) -> np.ndarray:
        """Clamped, renormalised barycentric weights, shape (m, 3)."""
        lam = np.empty((len(points), 3))
        for p, k in enumerate(triangles):
            lam[p] = _barycentric(self.tri_xy[k], points[p, 0], points[p, 1])
        lam[lam < BARY_ZERO] = 0.0
        return lam / lam.sum(axis=1, keepdims=True)


# ------------------------------------------------------- extrapolation matrix


@dataclass(frozen=True, eq=False)
class ExtrapolationOperator:
    """E~ in two forms.

    ``full`` maps every top-surface node (constrained node included) and
    is a partition of unity. ``matrix`` is what the solver uses: the
    constrained node's column is removed and its row is zero, since that
    unknown is pinned to zero.
    """

    matrix: CsrMatrix        # n x m', columns ordered as surface_dofs
    full: CsrMatrix          # n x (m' + 1), columns ordered as surface_nodes
    surface_nodes: np.ndarray
    surface_dofs: np.ndarray
    interior_dofs: np.ndarray
    constrained_node: int

    def write_matrix_market(self, path) -> None:
        write_matrix_market(path, self.matrix)


def build_extrapolation(
    mesh: TetMesh, surface: SurfaceMesh | None = None, system: AssembledSystem | None = None
) -> ExtrapolationOperator:
    surface = extract_top_surface(mesh) if surface is None else surface
    n = mesh.n_nodes
    s_nodes = surface.surface_nodes
    col_of = np.full(n, -1, dtype=np.int64)
    col_of[s_nodes] = np.arange(s_nodes.size)
    interior = np.flatnonzero(col_of < 0)

    loc = SurfaceLocator(surface)
    xy = mesh.nodes[interior, :2]
    tri = loc.locate(xy, interior)
    w = loc.weights(xy, tri)
    rows = np.concatenate([s_nodes, np.repeat(interior, 3)])
    cols = np.concatenate([np.arange(s_nodes.size), surface.triangles[tri].ravel()])
    vals = np.concatenate([np.ones(s_nodes.size), w.ravel()])
    keep = vals != 0.0
    full = CsrMatrix.from_triplets(rows[keep], cols[keep], vals[keep], (n, s_nodes.size))

    if system is None:
        from .fem import constrained_node_of

        x0 = constrained_node_of(mesh)
    else:
        x0 = system.constrained_node
    x0_col = int(col_of[x0])
    if x0_col < 0:
        raise ValueError("constrained node is not on the top surface")
    # drop the constrained column and row
    f = full.to_scipy().tolil()
    f[x0, :] = 0.0
    f = f.tocsc()
    keep_cols = np.setdiff1d(np.arange(s_nodes.size), [x0_col])
    mat = CsrMatrix.from_scipy(f[:, keep_cols])
    mat = CsrMatrix.from_scipy(mat.to_scipy().multiply(mat.to_scipy() != 0))
    return ExtrapolationOperator(
        matrix=mat,
        full=full,
        surface_nodes=s_nodes,
        surface_dofs=s_nodes[keep_cols],
        interior_dofs=interior,
        constrained_node=int(x0),
    )


# --------------------------------------------------------------- dense oracles


def _check_dense(system: AssembledSystem) -> None:
    if system.n > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to n <= {DENSE_LIMIT}, got {system.n}")


class _DenseAlgebra:
    """Cholesky solves in float64 (LAPACK) or in mpmath at ``digits`` digits.

    The stored float64 matrix entries are taken as exact; only the
    arithmetic changes. At eps = 1e-4 the constrained operator has a
    condition number near 1e10, so float64 (and 80-bit long double)
    solves lose the last 7 (or 1 to 2) of the digits an identity check
    needs.
    """

    def __init__(self, digits: int | None):
        self.digits = digits
        if digits is not None:
            import mpmath

            self.mp = mpmath.mp.clone()
            self.mp.dps = digits
            self._mpf = np.frompyfunc(self.mp.mpf, 1, 1)

    def array(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x if self.digits is None else self._mpf(x)

    def to_float(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def zeros(self, shape) -> np.ndarray:
        return np.zeros(shape) if self.digits is None else self._mpf(np.zeros(shape))

    def cho_factor(self, a):
        if self.digits is None:
            return scipy.linalg.cho_factor(a, lower=True)
        l = a.copy()
        n = len(l)
        for k in range(n):
            l[k, k] = self.mp.sqrt(l[k, k])
            l[k + 1:, k] /= l[k, k]
            l[k + 1:, k + 1:] -= np.outer(l[k + 1:, k], l[k + 1:, k])
        return l

    def cho_solve(self, f, b) -> np.ndarray:
        if self.digits is None:
            return scipy.linalg.cho_solve(f, b)
        x = b.copy()
        n = len(f)
        vec = x.ndim == 1
        for k in range(n):  # L y = b
            x[k] /= f[k, k]
            x[k + 1:] -= f[k + 1:, k] * x[k] if vec else np.outer(f[k + 1:, k], x[k])
        for k in range(n - 1, -1, -1):  # L^T x = y
            x[k] /= f[k, k]
            x[:k] -= f[k, :k] * x[k] if vec else np.outer(f[k, :k], x[k])
        return x

    def solve(self, a, b) -> np.ndarray:
        return self.cho_solve(self.cho_factor(a), b)


def _exact_e(system: AssembledSystem, alg: _DenseAlgebra) -> np.ndarray:
    blocks = decompose(system)
    s, i = system.surface_dofs, system.interior_dofs
    abar = alg.array(blocks.interior.to_dense())
    e = alg.zeros((system.n, s.size))
    e[s, np.arange(s.size)] = 1
    e[i] = -alg.solve(abar, alg.array(blocks.coupling.to_dense().T))
    return e


def exact_extrapolation(system: AssembledSystem, digits: int | None = None) -> np.ndarray:
    """E = [I; -Abar^-1 C^T] scattered to global rows (constrained row zero)."""
    _check_dense(system)
    alg = _DenseAlgebra(digits)
    return alg.to_float(_exact_e(system, alg))


def reference_solve(system: AssembledSystem, b, digits: int | None = None) -> np.ndarray:
    """A^-1 b for the constrained operator by dense Cholesky."""
    _check_dense(system)
    alg = _DenseAlgebra(digits)
    return alg.to_float(alg.solve(alg.array(system.a_constrained.to_dense()), alg.array(b)))


def schur_solve_reference(system: AssembledSystem, b, digits: int | None = None) -> np.ndarray:
    """Surface Schur solve followed by interior reconstruction (dense)."""
    _check_dense(system)
    alg = _DenseAlgebra(digits)
    b = alg.array(b)
    blocks = decompose(system)
    s, i = system.surface_dofs, system.interior_dofs
    bmat, c = alg.array(blocks.surface_block.to_dense()), alg.array(blocks.coupling.to_dense())
    abar = alg.cho_factor(alg.array(blocks.interior.to_dense()))
    schur = bmat - c @ alg.cho_solve(abar, c.T)
    phi_s = alg.solve(schur, b[s] - c @ alg.cho_solve(abar, b[i]))
    phi_i = alg.cho_solve(abar, b[i] - c.T @ phi_s)
    x = alg.zeros(system.n)
    x[s], x[i] = phi_s, phi_i
    x[system.constrained_node] = b[system.constrained_node]
    return alg.to_float(x)


def two_term_solve(system: AssembledSystem, b, e=None, digits: int | None = None) -> np.ndarray:
    """E (E^T A E)^-1 E^T b + [0; Abar^-1] b, with the constrained row passed through.

    With the exact E (the default) this is A^-1 b. ``digits`` switches the
    dense arithmetic to mpmath at that many decimal digits.
    """
    _check_dense(system)
    alg = _DenseAlgebra(digits)
    b = alg.array(b)
    e = _exact_e(system, alg) if e is None else alg.array(e)
    a = alg.array(system.a_constrained.to_dense())
    i = system.interior_dofs
    abar = alg.array(decompose(system).interior.to_dense())
    x = e @ alg.solve(e.T @ a @ e, e.T @ b)
    x[i] += alg.solve(abar, b[i])
    x[system.constrained_node] += b[system.constrained_node]
    return alg.to_float(x)


# -------------------------------------------------------------- preconditioner

Solve = Callable[[np.ndarray], np.ndarray]


class VlumpPreconditioner:
    """Vertically lumped two-level preconditioner.

    ``vl-sor``: forward SOR on A, coarse correction E~ M_c E~^T on the
    residual, backward SOR. ``vl-add`` adds the interior smoother to the
    correction step: the residual after the forward sweep is corrected by
    E~ M_c E~^T r + [0; M_i r_interior], then the backward sweep follows.
    With ``sor_wrap=False`` vl-add is the bare two-term sum with no SOR.
    M_c and M_i are fixed linear operators (one AMG V-cycle each by
    default), so every variant is a fixed symmetric operator.
    """

    def __init__(
        self,
        system: AssembledSystem,
        e_tilde: CsrMatrix,
        coarse_solve: Solve,
        variant: str = VL_SOR,
        interior_solve: Solve | None = None,
        omega: float = 1.0,
        flops: FlopCounter | None = None,
        sor_wrap: bool = True,
    ):
        if variant not in (VL_SOR, VL_ADD):
            raise ValueError(f"unknown variant {variant!r}")
        if variant == VL_ADD and interior_solve is None:
            raise ValueError("vl-add needs an interior solver")
        if e_tilde.n_rows != system.n:
            raise ValueError("extrapolation rows do not match the system size")
        self.system = system
        self.a = system.a_constrained
        self.e = e_tilde
        self.coarse_solve = coarse_solve
        self.interior_solve = interior_solve
        self.variant = variant
        self.name = variant
        self.omega = omega
        self.flops = flops
        self.sor_wrap = sor_wrap or variant == VL_SOR
        self.coarse_hierarchy: AmgHierarchy | None = None
        self.interior_hierarchy: AmgHierarchy | None = None

    @property
    def n(self) -> int:
        return self.system.n

    def _coarse_correction(self, r, fc) -> np.ndarray:
        return spmv(self.e, self.coarse_solve(spmv_transpose(self.e, r, fc)), fc)

    def _correction(self, r, fc) -> np.ndarray:
        z = self._coarse_correction(r, fc)
        if self.variant == VL_ADD:
            i = self.system.interior_dofs
            z[i] += self.interior_solve(r[i])
            fc.add(i.size)
            if not self.sor_wrap:
                x0 = self.system.constrained_node
                z[x0] += r[x0]  # identity row of the constrained node
        return z

    def __call__(self, r) -> np.ndarray:
        return apply_preconditioner(self, r)

    def build_report_rows(self) -> list[tuple[str, object]]:
        rows = [("variant", self.variant), ("n", self.n), ("coarse_size", self.e.n_cols),
                ("e_tilde_nnz", self.e.nnz)]
        if self.coarse_hierarchy is not None:
            h = self.coarse_hierarchy
            rows += [("coarse_nnz", h.levels[0].a.nnz), ("coarse_levels", len(h.levels))]
        if self.interior_hierarchy is not None:
            h = self.interior_hierarchy
            rows += [("interior_size", h.n), ("interior_levels", len(h.levels)),
                     ("interior_operator_complexity", repr(h.operator_complexity()))]
        return rows

    def write_build_report(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            w.writerows(self.build_report_rows())


def apply_preconditioner(p: VlumpPreconditioner, r) -> np.ndarray:
    fc = FLOPS if p.flops is None else p.flops
    r = np.ascontiguousarray(r, dtype=np.float64)
    if r.shape != (p.n,):
        raise ValueError(f"residual of length {r.size} for a system of size {p.n}")
    if not p.sor_wrap:
        return p._correction(r, fc)
    z = np.zeros(p.n)
    sor_sweep(p.a, z, r, p.omega, "forward", fc)
    z += p._correction(residual(p.a, z, r, fc), fc)
    fc.add(p.n)
    sor_sweep(p.a, z, r, p.omega, "backward", fc)
    return z


def surface_candidates(mesh: TetMesh, surface_dofs, kind: str = "linear"):
    """Near-null-space vectors of the lumped operator, one row per surface dof.

    As eps -> 0 the lumped operator loses its horizontal stiffness and
    E~^T A_0 E~ annihilates every horizontally linear field, so 1, x and y
    all become near-null. None (plain aggregation) for "constant".
    """
    if kind == "constant":
        return None
    if kind != "linear":
        raise ValueError(f"unknown candidate set {kind!r}")
    xy = mesh.nodes[surface_dofs, :2]
    xy = xy - xy.mean(axis=0)
    return np.column_stack([np.ones(len(xy)), xy])


def build_preconditioner(
    system: AssembledSystem,
    variant: str = VL_SOR,
    extrapolation: ExtrapolationOperator | None = None,
    theta: float = 0.01,
    omega_prolongator: float = 2.0 / 3.0,
    coarsest_cap: int = 64,
    sor_omega: float = 1.0,
    coarse_candidates: str = "linear",
    sor_wrap: bool = True,
    flops: FlopCounter | None = None,
) -> VlumpPreconditioner:
    """E~, an AMG hierarchy on E~^T A E~ and (for vl-add) one on Abar.

    ``coarse_candidates`` selects the near-null space of the coarse
    hierarchy: "linear" (1, x, y on the surface) or "constant".
    """
    ext = extrapolation or build_extrapolation(system.mesh, None, system)
    e = ext.matrix
    coarse_a = triple_product(e, system.a_constrained, FlopCounter())
    ch = build_hierarchy(
        coarse_a, theta, omega_prolongator, coarsest_cap,
        candidates=surface_candidates(system.mesh, ext.surface_dofs, coarse_candidates),
    )
    interior_solve, ih = None, None
    if variant == VL_ADD:
        ih = build_hierarchy(decompose(system).interior, theta, omega_prolongator, coarsest_cap)
        interior_solve = lambda r: vcycle(ih, r, None, flops)  # noqa: E731
    p = VlumpPreconditioner(
        system, e, lambda r: vcycle(ch, r, None, flops), variant, interior_solve, sor_omega, flops,
        sor_wrap,
    )
    p.coarse_hierarchy, p.interior_hierarchy = ch, ih
    return p
