"""Tetrahedral meshes of the unit box: generators, import/export, top surface."""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

log = logging.getLogger(__name__)

TOP_TOL = 1e-12
DEFAULT_JITTER = 0.3


class BoundaryTag(enum.IntEnum):
    TOP = 1
    FLOOR = 2
    COAST = 3


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TetMesh:
    nodes: np.ndarray          # (n, 3) float64
    tets: np.ndarray           # (m, 4) int64, positively oriented
    boundary_faces: np.ndarray  # (k, 3) int64
    face_tags: np.ndarray      # (k,) int64 BoundaryTag values

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def volumes(self) -> np.ndarray:
        return signed_volumes(self.nodes, self.tets)

    def top_faces(self) -> np.ndarray:
        return self.boundary_faces[self.face_tags == BoundaryTag.TOP]

    def edge_lengths(self) -> np.ndarray:
        pairs = np.concatenate([self.tets[:, [i, j]] for i, j in itertools.combinations(range(4), 2)])
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        return np.linalg.norm(self.nodes[pairs[:, 0]] - self.nodes[pairs[:, 1]], axis=1)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    surface_nodes: np.ndarray  # surface-local index -> mesh node index
    triangles: np.ndarray      # (t, 3) surface-local indices, counter-clockwise in (x, y)
    planar_coords: np.ndarray  # (s, 2)

    def areas(self) -> np.ndarray:
        p = self.planar_coords[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def signed_volumes(nodes, tets) -> np.ndarray:
    p = nodes[tets]
    d1, d2, d3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", np.cross(d1, d2), d3) / 6.0


def tet_faces(tets) -> np.ndarray:
    """All four faces of every tet, as sorted node triples, shape (4m, 3)."""
    f = np.concatenate([tets[:, [1, 2, 3]], tets[:, [0, 2, 3]], tets[:, [0, 1, 3]], tets[:, [0, 1, 2]]])
    return np.sort(f, axis=1)


def face_multiplicity(tets) -> tuple[np.ndarray, np.ndarray]:
    faces, counts = np.unique(tet_faces(tets), axis=0, return_counts=True)
    return faces, counts


def _orient(nodes, tets) -> np.ndarray:
    tets = np.array(tets, dtype=np.int64)
    neg = signed_volumes(nodes, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


def _tag_faces(nodes, faces) -> np.ndarray:
    z = nodes[:, 2]
    zmax, zmin = z.max(), z.min()
    fz = z[faces]
    tags = np.full(len(faces), BoundaryTag.COAST, dtype=np.int64)
    tags[np.all(np.abs(fz - zmin) <= TOP_TOL, axis=1)] = BoundaryTag.FLOOR
    tags[np.all(np.abs(fz - zmax) <= TOP_TOL, axis=1)] = BoundaryTag.TOP
    return tags


def from_tets(nodes, tets) -> TetMesh:
    """Orient ``tets`` and derive tagged boundary faces from the box geometry."""
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    tets = _orient(nodes, tets)
    faces, counts = face_multiplicity(tets)
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: a face is shared by more than two tets")
    boundary = faces[counts == 1]
    return TetMesh(nodes, tets, boundary, _tag_faces(nodes, boundary))


def generate_layered_box(nx: int, ny: int, nz: int) -> TetMesh:
    """Structured unit-cube mesh, every hexahedron split into 6 tets.

    Uses the Kuhn split (all cells cut along their main diagonal) so the
    face diagonals agree between neighbouring cells. Nodes are ordered
    x fastest, then y, then z.
    """
    if min(nx, ny, nz) < 1:
        raise ValueError("nx, ny, nz must be >= 1")
    xs, ys, zs = (np.linspace(0.0, 1.0, k + 1) for k in (nx, ny, nz))
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    i, j, k = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"))
    unit = np.eye(3, dtype=np.int64)
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        verts = [nid(i, j, k)]
        for axis in perm:
            corner = corner + unit[axis]
            verts.append(nid(i + corner[0], j + corner[1], k + corner[2]))
        tets.append(np.column_stack(verts))
    tets = np.concatenate(tets)
    order = np.lexsort(tets.T[::-1])  # deterministic, independent of permutation order
    return from_tets(nodes, tets[order])


def _lattice(n_side: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n_side)
    zz, yy, xx = np.meshgrid(s, s, s, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


def _on_boundary(points, tol=1e-14) -> np.ndarray:
    return np.any((points <= tol) | (points >= 1.0 - tol), axis=1)


def _delaunay_box(points: np.ndarray) -> TetMesh:
    """Delaunay tetrahedralisation of points filling the unit cube.

    Flat tets whose four nodes lie on one face of the cube are discarded;
    they appear where lattice points on a face are cospherical, and
    removing them leaves the face tiled by the neighbouring tets.
    """
    if np.linalg.matrix_rank(points[1:] - points[0]) < 3:
        raise MeshError("degenerate point set: all points coplanar")
    tri = Delaunay(points)
    tets = tri.simplices.astype(np.int64)
    vol = signed_volumes(points, tets)
    scale = np.median(np.abs(vol))
    flat = np.abs(vol) <= 1e-10 * scale
    if flat.any():
        p = points[tets[flat]]
        on_face = np.zeros(flat.sum(), dtype=bool)
        for axis in range(3):
            for side in (0.0, 1.0):
                on_face |= np.all(np.abs(p[:, :, axis] - side) <= 1e-14, axis=1)
        if not on_face.all():
            raise MeshError(f"{int((~on_face).sum())} degenerate interior tets; increase jitter")
        tets = tets[~flat]
    used = np.unique(tets)
    if used.size != len(points):
        raise MeshError("Delaunay dropped input points (duplicates?)")
    mesh = from_tets(points, tets)
    total = mesh.volumes().sum()
    if abs(total - 1.0) > 1e-8:
        raise MeshError(f"tetrahedralisation volume {total} != 1")
    return mesh


def _jittered_lattice(n_side: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    # Coordinates pinned to a cube face stay pinned, so boundary points
    # only slide within their face or edge and corners never move.
    pts = _lattice(n_side)
    h = 1.0 / (n_side - 1)
    free = (pts > 0.0) & (pts < 1.0)
    pts += np.where(free, rng.uniform(-jitter * h, jitter * h, size=pts.shape), 0.0)
    return pts


def lattice_side(n_points: int) -> int:
    return max(2, int(round(n_points ** (1.0 / 3.0))))


def generate_unstructured_box(n_points: int, seed: int = 0, jitter: float = DEFAULT_JITTER) -> TetMesh:
    """Delaunay mesh of a jittered lattice with about ``n_points`` points.

    Boundary lattice points stay put (flat top, vertical coasts); interior
    points move by up to ``jitter`` lattice spacings in each direction,
    which breaks the horizontal layering.
    """
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    if not 0.0 <= jitter < 0.5:
        raise ValueError("jitter must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    return _delaunay_box(_jittered_lattice(lattice_side(n_points), rng, jitter))


def generate_multiscale_box(
    n_points: int,
    cluster_fraction: float = 0.8,
    cluster_radius: float = 0.1,
    seed: int = 0,
    jitter: float = DEFAULT_JITTER,
) -> TetMesh:
    """Delaunay mesh with most points packed in a ball at the cube centre.

    ``cluster_fraction`` of the points form a fine jittered lattice clipped
    to the ball; the rest form a coarse jittered lattice over the cube with
    its points near the ball removed.
    """
    if not 0.0 < cluster_fraction < 1.0:
        raise ValueError("cluster_fraction must lie in (0, 1)")
    if not 0.0 < cluster_radius < 0.5:
        raise ValueError("cluster_radius must lie in (0, 0.5)")
    n_cluster = int(round(cluster_fraction * n_points))
    if n_cluster == 0:
        return generate_unstructured_box(n_points, seed, jitter)
    rng = np.random.default_rng(seed)
    coarse = _jittered_lattice(lattice_side(n_points - n_cluster), rng, jitter)
    h_coarse = 1.0 / (lattice_side(n_points - n_cluster) - 1)

    centre = np.full(3, 0.5)
    h_fine = (4.0 / 3.0 * np.pi * cluster_radius**3 / n_cluster) ** (1.0 / 3.0)
    k = int(np.ceil(cluster_radius / h_fine))
    offs = np.arange(-k, k + 1) * h_fine
    gz, gy, gx = np.meshgrid(offs, offs, offs, indexing="ij")
    fine = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    fine = fine[np.linalg.norm(fine, axis=1) <= cluster_radius]
    fine += rng.uniform(-jitter * h_fine, jitter * h_fine, size=fine.shape) + centre

    keep = _on_boundary(coarse) | (
        np.linalg.norm(coarse - centre, axis=1) > cluster_radius + 0.5 * h_coarse
    )
    return _delaunay_box(np.concatenate([coarse[keep], fine]))


def rescale(mesh: TetMesh, epsilon: float) -> TetMesh:
    """Stretch horizontal coordinates by 1/epsilon; connectivity and tags kept."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    nodes = mesh.nodes.copy()
    nodes[:, :2] /= epsilon
    return TetMesh(nodes, mesh.tets, mesh.boundary_faces, mesh.face_tags)


def extract_top_surface(mesh: TetMesh) -> SurfaceMesh:
    top = mesh.top_faces()
    if len(top) == 0:
        raise MeshError("mesh has no Top boundary faces")
    surface_nodes = np.unique(top)
    local = np.searchsorted(surface_nodes, top)
    xy = mesh.nodes[surface_nodes, :2].copy()
    surf = SurfaceMesh(surface_nodes, local, xy)
    cw = surf.areas() < 0
    local[cw, 1], local[cw, 2] = local[cw, 2].copy(), local[cw, 1].copy()
    return SurfaceMesh(surface_nodes, local, xy)


# ---------------------------------------------------------------- file formats

GMSH_TRIANGLE, GMSH_TET = 2, 4
_GMSH_NODES_PER_TYPE = {1: 2, 2: 3, 3: 4, 4: 4, 5: 8, 6: 6, 7: 5, 15: 1}


def write_gmsh(mesh: TetMesh, path) -> None:
    """Write Gmsh MSH 2.2 ASCII with physical tags 1/2/3 = Top/Floor/Coast."""
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", "4"]
    lines += [f'2 {t.value} "{t.name.title()}"' for t in BoundaryTag]
    lines += ['3 10 "Domain"', "$EndPhysicalNames", "$Nodes", str(mesh.n_nodes)]
    lines += [f"{i + 1} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(mesh.nodes.tolist())]
    lines += ["$EndNodes", "$Elements", str(len(mesh.boundary_faces) + mesh.n_tets)]
    eid = 0
    for face, tag in zip(mesh.boundary_faces.tolist(), mesh.face_tags.tolist()):
        eid += 1
        lines.append(f"{eid} {GMSH_TRIANGLE} 2 {tag} {tag} " + " ".join(str(v + 1) for v in face))
    for tet in mesh.tets.tolist():
        eid += 1
        lines.append(f"{eid} {GMSH_TET} 2 10 10 " + " ".join(str(v + 1) for v in tet))
    lines.append("$EndElements")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class GmshImport:
    mesh: TetMesh
    skipped_elements: int


def import_gmsh(path, tag_map: dict[int, str] | None = None) -> GmshImport:
    """Read a Gmsh MSH 2.2 ASCII file.

    ``tag_map`` maps physical tags of boundary triangles to "top", "floor"
    or "coast". Without it, ``$PhysicalNames`` entries with those names are
    used. Elements other than 4-node tets and 3-node triangles are skipped
    and counted.
    """
    lines = Path(path).read_text().splitlines()
    sections: dict[str, list[str]] = {}
    i = 0
    while i < len(lines):
        head = lines[i].strip()
        if not head:
            i += 1
            continue
        if not head.startswith("$"):
            raise MeshError(f"{path}:{i + 1}: expected a section header, got {head!r}")
        name = head[1:]
        end = f"$End{name}"
        try:
            j = next(k for k in range(i + 1, len(lines)) if lines[k].strip() == end)
        except StopIteration:
            raise MeshError(f"{path}: section ${name} is not terminated") from None
        sections[name] = lines[i + 1:j]
        i = j + 1

    if "MeshFormat" not in sections or not sections["MeshFormat"]:
        raise MeshError(f"{path}: missing $MeshFormat header")
    fmt = sections["MeshFormat"][0].split()
    if fmt[0] != "2.2":
        raise MeshError(f"{path}: unsupported MSH version {fmt[0]} (need 2.2)")
    if len(fmt) > 1 and fmt[1] != "0":
        raise MeshError(f"{path}: binary MSH files are not supported")

    if tag_map is None:
        tag_map = {}
        for row in sections.get("PhysicalNames", [])[1:]:
            dim, tag, label = row.split(maxsplit=2)
            label = label.strip('"').lower()
            if dim == "2" and label in ("top", "floor", "coast"):
                tag_map[int(tag)] = label
    tag_lookup = {}
    for tag, label in tag_map.items():
        try:
            tag_lookup[int(tag)] = BoundaryTag[label.upper()]
        except KeyError:
            raise MeshError(f"unknown boundary label {label!r} for tag {tag}") from None

    node_rows = sections.get("Nodes")
    if not node_rows:
        raise MeshError(f"{path}: missing $Nodes")
    n = int(node_rows[0])
    ids = np.empty(n, dtype=np.int64)
    nodes = np.empty((n, 3))
    for k, row in enumerate(node_rows[1:n + 1]):
        parts = row.split()
        ids[k] = int(parts[0])
        nodes[k] = [float(v) for v in parts[1:4]]
    index_of = {int(v): k for k, v in enumerate(ids)}

    elem_rows = sections.get("Elements")
    if not elem_rows:
        raise MeshError(f"{path}: missing $Elements")
    tets, faces, tags = [], [], []
    skipped = 0
    for row in elem_rows[1:int(elem_rows[0]) + 1]:
        parts = [int(v) for v in row.split()]
        etype, ntags = parts[1], parts[2]
        conn = parts[3 + ntags:]
        if etype == GMSH_TET:
            tets.append([index_of[v] for v in conn])
        elif etype == GMSH_TRIANGLE:
            phys = parts[3] if ntags else 0
            if phys not in tag_lookup:
                raise MeshError(f"{path}: no boundary label for physical tag {phys}")
            faces.append([index_of[v] for v in conn])
            tags.append(tag_lookup[phys].value)
        else:
            if etype not in _GMSH_NODES_PER_TYPE:
                raise MeshError(f"{path}: unknown element type {etype}")
            skipped += 1
    if skipped:
        log.warning("%s: skipped %d unsupported elements", path, skipped)
    if not tets:
        raise MeshError(f"{path}: no tetrahedra")
    tets = _orient(nodes, np.array(tets, dtype=np.int64))
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    mesh = TetMesh(nodes, tets, faces, np.array(tags, dtype=np.int64))
    return GmshImport(mesh, skipped)


DUMP_MAGIC = "vlump-mesh 1"


def dump_mesh(mesh: TetMesh, path) -> None:
    """Line-oriented text dump.

    Layout: magic line; ``nodes N`` then N lines ``x y z``; ``tets M`` then
    M lines of four 0-based node indices; ``faces K`` then K lines of three
    node indices and a tag (1 top, 2 floor, 3 coast). Floats use repr, so
    the dump round-trips exactly.
    """
    out = [DUMP_MAGIC, f"nodes {mesh.n_nodes}"]
    out += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.nodes.tolist()]
    out.append(f"tets {mesh.n_tets}")
    out += [" ".join(map(str, t)) for t in mesh.tets.tolist()]
    out.append(f"faces {len(mesh.boundary_faces)}")
    out += [f"{a} {b} {c} {t}" for (a, b, c), t in zip(mesh.boundary_faces.tolist(), mesh.face_tags.tolist())]
    Path(path).write_text("\n".join(out) + "\n")


def load_mesh(path) -> TetMesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != DUMP_MAGIC:
        raise MeshError(f"{path}: not a mesh dump")

    def block(pos, key, width, dtype):
        label, count = lines[pos].split()
        if label != key:
            raise MeshError(f"{path}:{pos + 1}: expected {key!r}")
        count = int(count)
        rows = lines[pos + 1:pos + 1 + count]
        arr = np.array([r.split() for r in rows], dtype=dtype).reshape(count, width)
        return arr, pos + 1 + count

    nodes, pos = block(1, "nodes", 3, np.float64)
    tets, pos = block(pos, "tets", 4, np.int64)
    faces, pos = block(pos, "faces", 4, np.int64)
    return TetMesh(nodes, tets, faces[:, :3].copy(), faces[:, 3].copy())
