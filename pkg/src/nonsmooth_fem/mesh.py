"""Conforming triangulations of polygonal domains.

The built-in family triangulates the unit square with a fixed diagonal
convention (lower-left to upper-right) so runs are bit-reproducible.
Uniform midpoint refinement splits every triangle into four congruent
children, which keeps the shape-regularity ratio of the initial mesh and
halves the mesh size exactly on dyadic grids.

Meshes are immutable value objects: the coordinate and index arrays are
frozen after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data (orientation, conformity, file format)."""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TriMesh:
    """Triangulation: vertex coordinates, vertex-index triples, boundary flags.

    mesh_size_h is the maximum element diameter (longest edge).
    """

    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_vertex: np.ndarray = field(repr=False)
    mesh_size_h: float

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(
            self, "boundary_vertex", _frozen(self.boundary_vertex, bool)
        )
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (m, 3) array")
        if self.boundary_vertex.shape != (self.vertices.shape[0],):
            raise MeshError("boundary_vertex must have one flag per vertex")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def signed_areas(mesh: TriMesh) -> np.ndarray:
    """Signed area of every triangle (positive for counterclockwise)."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _max_edge_length(vertices: np.ndarray, triangles: np.ndarray) -> float:
    p = vertices[triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
    return float(np.sqrt((e * e).sum(axis=-1)).max())


def edge_counts(mesh: TriMesh) -> dict:
    """Multiset of edges as {sorted (i, j): number of incident triangles}."""
    counts: dict = {}
    for i, j, k in np.asarray(mesh.triangles):
        for a, b in ((i, j), (j, k), (k, i)):
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            counts[key] = counts.get(key, 0) + 1
    return counts


def min_angle_deg(mesh: TriMesh) -> float:
    """Smallest interior angle over all triangles, in degrees."""
    p = mesh.vertices[mesh.triangles]
    worst = np.inf
    for local in range(3):
        a = p[:, local]
        b = p[:, (local + 1) % 3]
        c = p[:, (local + 2) % 3]
        u = b - a
        v = c - a
        cosang = (u * v).sum(axis=1) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        worst = min(worst, float(np.degrees(np.arccos(np.clip(cosang, -1, 1))).min()))
    return worst


def shape_regularity(mesh: TriMesh) -> float:
    """Max over elements of diameter / inradius (inradius = 2*area/perimeter)."""
    p = mesh.vertices[mesh.triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
    lengths = np.sqrt((e * e).sum(axis=-1))
    diam = lengths.max(axis=0)
    perimeter = lengths.sum(axis=0)
    areas = np.abs(signed_areas(mesh))
    inradius = 2.0 * areas / perimeter
    return float((diam / inradius).max())


def validate_mesh(mesh: TriMesh) -> None:
    """Raise MeshError on inverted/degenerate elements, bad indices, hanging nodes."""
    tris = np.asarray(mesh.triangles)
    if tris.size and (tris.min() < 0 or tris.max() >= mesh.n_vertices):
        raise MeshError("triangle vertex index out of range")
    areas = signed_areas(mesh)
    bad = np.where(areas <= 0.0)[0]
    if bad.size:
        raise MeshError(
            f"triangle {int(bad[0])} has nonpositive signed area {areas[bad[0]]:g}"
        )
    for (i, j), count in edge_counts(mesh).items():
        if count > 2:
            raise MeshError(f"edge ({i},{j}) shared by {count} > 2 triangles")
    # hanging node: a vertex lying strictly inside another triangle's edge
    verts = np.asarray(mesh.vertices)
    edge_set = set(edge_counts(mesh).keys())
    for i, j in edge_set:
        a, b = verts[i], verts[j]
        ab = b - a
        len2 = float(ab @ ab)
        for k in range(mesh.n_vertices):
            if k in (i, j):
                continue
            t = float((verts[k] - a) @ ab) / len2
            if 1e-12 < t < 1 - 1e-12:
                close = verts[k] - (a + t * ab)
                if float(close @ close) <= 1e-24 * len2:
                    raise MeshError(
                        f"vertex {k} hangs on edge ({i},{j}): mesh not conforming"
                    )


def unit_square_mesh(n: int) -> TriMesh:
    """Structured triangulation of (0,1)^2 with n subdivisions per side.

    (n+1)^2 vertices and 2*n^2 triangles; each grid cell is split along the
    diagonal from its lower-left to its upper-right corner.
    """
    if int(n) != n or n < 1:
        raise MeshError(f"subdivision count must be a positive integer, got {n!r}")
    n = int(n)
    side = np.arange(n + 1) / n
    xx, yy = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):  # column i, row j
        return j * (n + 1) + i

    triangles = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            triangles.append((v00, v10, v11))
            triangles.append((v00, v11, v01))
    triangles = np.asarray(triangles, dtype=np.int64)
    boundary = (
        (vertices[:, 0] == 0.0)
        | (vertices[:, 0] == 1.0)
        | (vertices[:, 1] == 0.0)
        | (vertices[:, 1] == 1.0)
    )
    h = _max_edge_length(vertices, triangles)
    return TriMesh(vertices, triangles, boundary, h)


def refine_uniform(mesh: TriMesh) -> TriMesh:
    """Split each triangle into 4 congruent children via edge midpoints.

    New midpoint vertices are flagged as boundary exactly when their parent
    edge lies on the boundary (is incident to a single triangle).
    """
    verts = np.asarray(mesh.vertices)
    tris = np.asarray(mesh.triangles)
    counts = edge_counts(mesh)
    midpoint_id: dict = {}
    new_vertices = [verts]
    new_flags = [np.asarray(mesh.boundary_vertex)]
    next_id = mesh.n_vertices
    mid_coords = []
    mid_flags = []
    for (i, j), count in sorted(counts.items()):
        midpoint_id[(i, j)] = next_id
        mid_coords.append(0.5 * (verts[i] + verts[j]))
        mid_flags.append(count == 1)
        next_id += 1
    new_vertices.append(np.asarray(mid_coords).reshape(-1, 2))
    new_flags.append(np.asarray(mid_flags, dtype=bool))

    def mid(a, b):
        return midpoint_id[(a, b) if a < b else (b, a)]

    children = []
    for i, j, k in tris:
        i, j, k = int(i), int(j), int(k)
        mij, mjk, mki = mid(i, j), mid(j, k), mid(k, i)
        children.extend(
            [(i, mij, mki), (j, mjk, mij), (k, mki, mjk), (mij, mjk, mki)]
        )
    vertices = np.vstack(new_vertices)
    flags = np.concatenate(new_flags)
    triangles = np.asarray(children, dtype=np.int64)
    h = _max_edge_length(vertices, triangles)
    return TriMesh(vertices, triangles, flags, h)


def write_mesh(mesh: TriMesh, path) -> None:
    """Plain-text format: header 'vertices N triangles M', N lines 'x y b',
    M lines 'i j k' (0-based)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles}\n")
        for (x, y), b in zip(np.asarray(mesh.vertices), mesh.boundary_vertex):
            fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        for i, j, k in np.asarray(mesh.triangles):
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path) -> TriMesh:
    """Parse the plain-text format of write_mesh and validate the mesh."""
    with open(path, encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MeshError(f"{path}: empty mesh file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "vertices" or header[2] != "triangles":
        raise MeshError(f"{path}: bad header {lines[0]!r}")
    try:
        n_v, n_t = int(header[1]), int(header[3])
    except ValueError as exc:
        raise MeshError(f"{path}: bad header counts {lines[0]!r}") from exc
    if len(lines) != 1 + n_v + n_t:
        raise MeshError(
            f"{path}: expected {1 + n_v + n_t} lines, found {len(lines)}"
        )
    vertices = np.empty((n_v, 2))
    flags = np.empty(n_v, dtype=bool)
    for row, ln in enumerate(lines[1 : 1 + n_v]):
        parts = ln.split()
        if len(parts) != 3:
            raise MeshError(f"{path}: vertex line {row} must be 'x y b'")
        vertices[row] = float(parts[0]), float(parts[1])
        if parts[2] not in ("0", "1"):
            raise MeshError(f"{path}: boundary flag must be 0 or 1, got {parts[2]!r}")
        flags[row] = parts[2] == "1"
    triangles = np.empty((n_t, 3), dtype=np.int64)
    for row, ln in enumerate(lines[1 + n_v :]):
        parts = ln.split()
        if len(parts) != 3:
            raise MeshError(f"{path}: triangle line {row} must be 'i j k'")
        triangles[row] = [int(p) for p in parts]
    if np.isfinite(vertices).sum() != vertices.size:
        raise MeshError(f"{path}: non-finite vertex coordinate")
    if n_t and (triangles.min() < 0 or triangles.max() >= n_v):
        raise MeshError(f"{path}: triangle vertex index out of range")
    h = _max_edge_length(vertices, triangles) if n_t else 0.0
    mesh = TriMesh(vertices, triangles, flags, h)
    validate_mesh(mesh)
    return mesh
