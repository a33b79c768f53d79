"""P1 Galerkin assembly of the aspect-ratio-scaled Poisson operator.

The mesh stays in unit-box coordinates; the aspect ratio enters through
the operator, A_eps = A_vertical + eps**2 * A_horizontal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TetMesh, extract_top_surface
from .sparse import CsrMatrix, extract_submatrix, spmv


class DegenerateElementError(ValueError):
    pass


def p1_gradients(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Basis gradients and volumes for a batch of tets.

    ``coords`` has shape (m, 4, 3); returns gradients (m, 4, 3) and the
    unsigned volumes (m,).
    """
    d = coords[:, 1:] - coords[:, :1]             # edge vectors as rows
    det = np.linalg.det(d)
    vol = np.abs(det) / 6.0
    scale = np.max(np.linalg.norm(d, axis=2), axis=1) ** 3
    bad = vol <= 1e-14 * scale
    if bad.any():
        raise DegenerateElementError(f"degenerate tetrahedron, element {int(np.flatnonzero(bad)[0])}")
    # barycentric coordinates l = D^{-T}(x - p0), so grad l_i is column i of D^{-1}
    g = np.linalg.inv(d).transpose(0, 2, 1)
    grads = np.concatenate([-g.sum(axis=1, keepdims=True), g], axis=1)
    return grads, vol


_MASS_PATTERN = (np.ones((4, 4)) + np.eye(4)) / 20.0


def element_matrices(coords) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertical stiffness, horizontal stiffness and mass for one tet."""
    coords = np.asarray(coords, dtype=np.float64).reshape(1, 4, 3)
    grads, vol = p1_gradients(coords)
    g, v = grads[0], vol[0]
    vertical = v * np.outer(g[:, 2], g[:, 2])
    horizontal = v * (np.outer(g[:, 0], g[:, 0]) + np.outer(g[:, 1], g[:, 1]))
    return vertical, horizontal, v * _MASS_PATTERN


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    mesh: TetMesh
    epsilon: float
    a_eps: CsrMatrix          # Neumann operator, singular (constants in kernel)
    a_vertical: CsrMatrix
    a_horizontal: CsrMatrix
    mass: CsrMatrix
    a_constrained: CsrMatrix  # a_eps with the constrained node eliminated
    constrained_node: int
    surface_dofs: np.ndarray
    interior_dofs: np.ndarray

    @property
    def n(self) -> int:
        return self.a_eps.n_rows

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), [self.constrained_node])


@dataclass(frozen=True, eq=False)
class BlockDecomposition:
    surface_block: CsrMatrix  # B_eps
    coupling: CsrMatrix       # C_eps, surface rows x interior columns
    interior: CsrMatrix       # Dirichlet-top operator


def _scatter(tets, local, n) -> CsrMatrix:
    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    return CsrMatrix.from_triplets(rows, cols, local.ravel(), (n, n))


def constrained_node_of(mesh: TetMesh) -> int:
    """Top-surface node with the lexicographically smallest (x, y)."""
    top = np.unique(mesh.top_faces())
    xy = mesh.nodes[top, :2]
    return int(top[np.lexsort((xy[:, 1], xy[:, 0]))[0]])


def eliminate_node(a: CsrMatrix, node: int) -> CsrMatrix:
    """Zero row and column ``node`` and put 1 on its diagonal."""
    rows = a.row_ids()
    cols = a.col_indices
    vals = a.values.copy()
    hit = (rows == node) | (cols == node)
    vals[hit] = 0.0
    vals[hit & (rows == cols)] = 1.0
    return CsrMatrix(a.n_rows, a.n_cols, a.row_offsets, cols, vals)


def assemble(mesh: TetMesh, epsilon: float) -> AssembledSystem:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    n = mesh.n_nodes
    grads, vol = p1_gradients(mesh.nodes[mesh.tets])
    # elementwise products keep every element matrix bitwise symmetric
    gx, gy, gz = grads[:, :, 0], grads[:, :, 1], grads[:, :, 2]
    vert = vol[:, None, None] * (gz[:, :, None] * gz[:, None, :])
    horiz = vol[:, None, None] * (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :])
    mass = vol[:, None, None] * _MASS_PATTERN

    a_vertical = _scatter(mesh.tets, vert, n)
    a_horizontal = _scatter(mesh.tets, horiz, n)
    # same scatter so that a_eps shares the structure of both parts
    a_eps = _scatter(mesh.tets, vert + epsilon**2 * horiz, n) if epsilon else a_vertical
    m = _scatter(mesh.tets, mass, n)

    x0 = constrained_node_of(mesh)
    surface = extract_top_surface(mesh).surface_nodes
    top_mask = np.zeros(n, dtype=bool)
    top_mask[surface] = True
    return AssembledSystem(
        mesh=mesh,
        epsilon=float(epsilon),
        a_eps=a_eps,
        a_vertical=a_vertical,
        a_horizontal=a_horizontal,
        mass=m,
        a_constrained=eliminate_node(a_eps, x0),
        constrained_node=x0,
        surface_dofs=surface[surface != x0],
        interior_dofs=np.flatnonzero(~top_mask),
    )


def decompose(system: AssembledSystem) -> BlockDecomposition:
    s, i = system.surface_dofs, system.interior_dofs
    if s.size == 0 or i.size == 0:
        raise ValueError("block decomposition needs nonempty surface and interior sets")
    a = system.a_constrained
    return BlockDecomposition(
        surface_block=extract_submatrix(a, s, s),
        coupling=extract_submatrix(a, s, i),
        interior=extract_submatrix(a, i, i),
    )


def free_operator(system: AssembledSystem) -> CsrMatrix:
    """The constrained operator restricted to the unconstrained nodes."""
    f = system.free_dofs
    return extract_submatrix(system.a_constrained, f, f)


def smooth_field(nodes: np.ndarray) -> np.ndarray:
    x, y, z = nodes.T
    return np.cos(np.pi * x) * np.cos(np.pi * y) * np.cos(np.pi * z)


def manufactured_rhs(system: AssembledSystem, field="smooth", seed: int | None = None):
    """Right-hand side for a chosen exact solution.

    ``field`` is "smooth" (cos(pi x)cos(pi y)cos(pi z)), "random" (normal
    entries from ``seed``), a callable on the (n, 3) node array, or an
    explicit vector. The exact solution is shifted so it vanishes at the
    constrained node; returns ``(b, x_exact)`` with b = A x_exact.
    """
    nodes = system.mesh.nodes
    if isinstance(field, str):
        if field == "smooth":
            x = smooth_field(nodes)
        elif field == "random":
            x = np.random.default_rng(seed).standard_normal(system.n)
        else:
            raise ValueError(f"unknown field {field!r}")
    elif callable(field):
        x = np.asarray(field(nodes), dtype=np.float64)
    else:
        x = np.array(field, dtype=np.float64)
    if x.shape != (system.n,):
        raise ValueError("field does not match the number of nodes")
    x = x - x[system.constrained_node]
    return spmv(system.a_constrained, x), x


def subtract_mean(system: AssembledSystem, x) -> np.ndarray:
    """Shift ``x`` by a constant so that its integral over the domain is zero."""
    x = np.asarray(x, dtype=np.float64)
    m = system.mass.to_scipy()
    ones = np.ones(system.n)
    return x - (ones @ (m @ x)) / (ones @ (m @ ones))
