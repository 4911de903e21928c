"""Triangle-mesh cloth state: construction, barycentric geometry and face frames.

A cloth state is an :class:`AugmentedMesh` holding vertex positions,
vertex velocities and a fixed triangle connectivity.  Edges and rest edge
lengths are derived once from the faces and never change afterwards;
deforming a mesh means building a new one with :meth:`AugmentedMesh.with_state`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

MIN_FACE_AREA = 1e-12


class MeshError(ValueError):
    """Invalid mesh input (bad indices, degenerate geometry)."""


class DegenerateFaceError(MeshError):
    def __init__(self, face: int, area: float):
        super().__init__(f"face {face} is degenerate (area {area:.3e} m^2)")
        self.face = face


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    """Undirected unique edges (sorted pairs, lexicographic order) of a face list."""
    sides = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    sides = np.sort(sides, axis=1)
    return np.unique(sides, axis=0)


@dataclass(frozen=True, eq=False)
class AugmentedMesh:
    vertices: np.ndarray
    velocities: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(default=None)
    rest_edge_lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        vel = np.zeros_like(v) if self.velocities is None else np.asarray(self.velocities, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be N x 3, got {v.shape}")
        if vel.shape != v.shape:
            raise MeshError(f"velocities shape {vel.shape} != vertices shape {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = np.nonzero((f < 0).any(1) | (f >= len(v)).any(1))[0]
            raise MeshError(f"faces {bad.tolist()} index vertices outside [0, {len(v)})")
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise MeshError(f"faces {np.nonzero(repeated)[0].tolist()} repeat a vertex index")
        edges = edges_from_faces(f) if self.edges is None else np.asarray(self.edges, dtype=np.int64)
        if self.rest_edge_lengths is None:
            rest = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
        else:
            rest = np.asarray(self.rest_edge_lengths, dtype=np.float64)
        if len(rest) and rest.min() <= 0:
            raise MeshError("rest edge lengths must be strictly positive (duplicate vertices?)")
        for name, arr in (("vertices", v), ("velocities", vel), ("faces", f), ("edges", edges),
                          ("rest_edge_lengths", rest)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_state(self, vertices, velocities=None) -> "AugmentedMesh":
        """Same topology and rest lengths, new positions/velocities."""
        vertices = np.array(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"vertex array shape {vertices.shape} != {self.vertices.shape}")
        if velocities is None:
            velocities = np.zeros_like(vertices)
        return AugmentedMesh(vertices, np.array(velocities, dtype=np.float64), self.faces,
                             self.edges, self.rest_edge_lengths)

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]], axis=1)

    def face_vertices(self) -> np.ndarray:
        """F x 3 x 3 array of face corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.face_vertices()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @cached_property
    def edge_faces(self) -> dict:
        """Map sorted vertex pair -> list of faces containing that side."""
        table: dict = {}
        for fi, face in enumerate(self.faces.tolist()):
            for k in range(3):
                key = tuple(sorted((face[(k + 1) % 3], face[(k + 2) % 3])))
                table.setdefault(key, []).append(fi)
        return table

    @cached_property
    def bending_pairs(self) -> np.ndarray:
        """Opposite-vertex pairs across each interior edge (K x 2)."""
        pairs = []
        for (a, b), fs in sorted(self.edge_faces.items()):
            if len(fs) != 2:
                continue
            opp = [int(next(v for v in self.faces[f] if v != a and v != b)) for f in fs]
            pairs.append(sorted(opp))
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def neighbor_across(self, face_id: int, local_vertex: int) -> int | None:
        """Face sharing the side opposite ``local_vertex`` of ``face_id``, if any."""
        face = self.faces[face_id]
        key = tuple(sorted((int(face[(local_vertex + 1) % 3]), int(face[(local_vertex + 2) % 3]))))
        others = [f for f in self.edge_faces[key] if f != face_id]
        return others[0] if others else None


def grid_mesh(width: float, height: float, nx: int, ny: int) -> AugmentedMesh:
    """Flat rectangular grid in the z = 0 plane, corner at the origin.

    Vertex ``j * nx + i`` sits at ``(i * width/(nx-1), j * height/(ny-1), 0)``.
    Faces are counter-clockwise seen from +z.
    """
    if nx < 2 or ny < 2:
        raise MeshError("grid needs at least 2 x 2 vertices")
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    xx, yy = np.meshgrid(xs, ys)
    verts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(nx * ny)])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return AugmentedMesh(verts, None, np.array(faces))


def best_fit_plane(points: np.ndarray):
    """Centroid and orthonormal basis (u, v, normal) of the least-squares plane."""
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid)
    basis = vt.copy()
    # prefer +z normals so flat cloths keep counter-clockwise faces seen from above
    if basis[2, 2] < 0:
        basis[2] *= -1
        basis[1] *= -1
    return centroid, basis, s


def delaunay_mesh_from_points(points) -> AugmentedMesh:
    """Triangulate a point cloud on its best-fit plane and lift the result back."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise MeshError(f"need at least 3 points of shape (M, 3), got {pts.shape}")
    diff = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    i, j = np.nonzero(np.triu(diff < 1e-9, k=1))
    if len(i):
        raise MeshError(f"duplicate points: {list(zip(i.tolist(), j.tolist()))}")
    centroid, basis, s = best_fit_plane(pts)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise MeshError(f"points {list(range(len(pts)))} are collinear")
    uv = (pts - centroid) @ basis[:2].T
    tri = Delaunay(uv)
    faces = tri.simplices.astype(np.int64)
    # enforce counter-clockwise orientation in the plane basis
    a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = cross < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    keep = np.abs(cross) > 1e-14
    return AugmentedMesh(pts, None, faces[keep])


def face_rotations(rest_tris: np.ndarray, deformed_tris: np.ndarray, face_ids=None) -> np.ndarray:
    """Batched rotation registration of rest triangles onto deformed triangles.

    Both inputs are F x 3 x 3 (face, corner, xyz).  Returns F x 3 x 3 rotations
    ``R`` minimising ``sum_i |R a_i - b_i|^2`` over centred corners, with
    ``det(R) = +1``.
    """
    rest_tris = np.asarray(rest_tris, dtype=np.float64)
    deformed_tris = np.asarray(deformed_tris, dtype=np.float64)
    ids = np.arange(len(rest_tris)) if face_ids is None else np.asarray(face_ids)
    for tris in (rest_tris, deformed_tris):
        area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
        bad = np.nonzero(area <= MIN_FACE_AREA)[0]
        if len(bad):
            raise DegenerateFaceError(int(ids[bad[0]]), float(area[bad[0]]))
    a = rest_tris - rest_tris.mean(axis=1, keepdims=True)
    b = deformed_tris - deformed_tris.mean(axis=1, keepdims=True)
    cov = np.einsum("fki,fkj->fij", b, a)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    u[:, :, 2] *= d[:, None]
    return u @ vt


def face_rotation(rest_vertices, deformed_vertices, face_id: int = 0) -> np.ndarray:
    """Rotation taking a rest triangle (3 x 3, rows = corners) onto its deformed pose."""
    return face_rotations(np.asarray(rest_vertices)[None], np.asarray(deformed_vertices)[None],
                          [face_id])[0]


def barycentric_to_world(mesh: AugmentedMesh, face_id: int, bc) -> np.ndarray:
    if not 0 <= face_id < mesh.n_faces:
        raise IndexError(f"face {face_id} out of range [0, {mesh.n_faces})")
    return np.asarray(bc, dtype=np.float64) @ mesh.vertices[mesh.faces[face_id]]


def world_to_barycentric(mesh: AugmentedMesh, face_id: int, point) -> np.ndarray:
    """Affine coordinates of the projection of ``point`` onto the face plane."""
    tri = mesh.vertices[mesh.faces[face_id]]
    e = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=1)
    rhs = np.asarray(point, dtype=np.float64) - tri[0]
    (l1, l2), *_ = np.linalg.lstsq(e, rhs, rcond=None)
    return np.array([1.0 - l1 - l2, l1, l2])


def reassign_face(mesh: AugmentedMesh, face_id: int, bc):
    """Move a point with a negative barycentric weight to the adjacent face.

    The neighbour is the face across the side opposite the most negative
    weight (ties go to the lowest local index).  On a boundary side the
    negative weights are clamped to zero and the rest renormalised.
    """
    bc = np.asarray(bc, dtype=np.float64)
    if bc.min() >= 0:
        return face_id, bc
    k = int(np.argmin(bc))
    nbr = mesh.neighbor_across(face_id, k)
    if nbr is None:
        clamped = np.clip(bc, 0.0, None)
        return face_id, clamped / clamped.sum()
    point = barycentric_to_world(mesh, face_id, bc)
    return nbr, world_to_barycentric(mesh, nbr, point)


def mesh_to_dict(mesh: AugmentedMesh) -> dict:
    return {
        "vertices": mesh.vertices.tolist(),
        "velocities": mesh.velocities.tolist(),
        "faces": mesh.faces.tolist(),
    }


def mesh_from_dict(data: dict, rest: AugmentedMesh | None = None) -> AugmentedMesh:
    verts = np.asarray(data["vertices"], dtype=np.float64)
    vel = np.asarray(data.get("velocities") or np.zeros_like(verts), dtype=np.float64)
    faces = np.asarray(data["faces"], dtype=np.int64)
    mesh = AugmentedMesh(verts, vel, faces)
    if rest is not None:
        if not np.array_equal(rest.faces, mesh.faces):
            raise MeshError("mesh faces differ from the reference topology")
        mesh = rest.with_state(verts, vel)
    return mesh


def save_mesh(mesh: AugmentedMesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


def load_mesh(path, rest: AugmentedMesh | None = None) -> AugmentedMesh:
    return mesh_from_dict(json.loads(Path(path).read_text()), rest)
