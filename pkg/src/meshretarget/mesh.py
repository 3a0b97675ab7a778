"""Triangle-mesh container, OBJ I/O, adjacency and point-triangle geometry."""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid mesh data or unsupported geometry."""


class ObjParseError(MeshError):
    """Malformed OBJ content. Carries the offending 1-based line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TriMesh:
    """Immutable triangle mesh: (V, 3) float64 positions, (F, 3) int64 faces.

    Faces index into ``vertices``; every face must have three pairwise
    distinct, in-range indices. Vertices that appear in no face are allowed.
    """

    __slots__ = ("vertices", "faces")

    def __init__(self, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {vertices.shape}")
        if vertices.shape[0] < 3:
            raise MeshError(f"a mesh needs at least 3 vertices, got {vertices.shape[0]}")
        if not np.isfinite(vertices).all():
            raise MeshError("vertices contain non-finite values")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise MeshError("face index out of range")
            repeated = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if repeated.any():
                raise MeshError(f"face {int(np.flatnonzero(repeated)[0])} repeats a vertex index")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        self.vertices = vertices
        self.faces = faces

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def __repr__(self):
        return f"TriMesh({self.n_vertices} vertices, {self.n_faces} faces)"


class MotionSequence:
    """Ordered pose frames sharing one face list.

    A single frame is a plain pose (pose retargeting is the one-frame case).
    """

    def __init__(self, frames, faces):
        frames = [np.ascontiguousarray(f, dtype=np.float64) for f in frames]
        if not frames:
            raise MeshError("a motion needs at least one frame")
        n = frames[0].shape[0]
        for t, f in enumerate(frames):
            if f.ndim != 2 or f.shape != (n, 3):
                raise MeshError(f"frame {t} has shape {f.shape}, expected ({n}, 3)")
        self.frames = frames
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def mesh(self, t: int) -> TriMesh:
        return TriMesh(self.frames[t], self.faces)


@dataclasses.dataclass(frozen=True)
class BaryHit:
    """Closest point on a mesh face, with its barycentric coordinates."""

    face_index: int
    point: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.shape != (3,):
            raise MeshError("barycentric coords must be 3 scalars")
        if coords.min() < -1e-9 or coords.max() > 1.0 + 1e-9:
            raise MeshError("barycentric coords outside [0, 1]")
        if abs(coords.sum() - 1.0) > 1e-9:
            raise MeshError("barycentric coords must sum to 1")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))


def load_obj(path) -> TriMesh:
    """Read a Wavefront OBJ file.

    Only ``v`` and ``f`` records are interpreted; comments and any other
    records (normals, texture coordinates, groups, materials) are skipped.
    Polygon faces are fan-triangulated from their first listed vertex.

    Raises:
        ObjParseError: malformed record or out-of-range face index,
            reporting the line number.
        MeshError: file contains no usable mesh.
    """
    vertices: list[list[float]] = []
    polys: list[tuple[list[int], int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex record needs 3 coordinates", line_no)
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError(f"bad vertex coordinate in {parts[1:4]}", line_no) from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError("face record needs at least 3 indices", line_no)
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise ObjParseError("bad face index", line_no) from None
                if any(i <= 0 for i in idx):
                    raise ObjParseError("face indices must be positive (1-based)", line_no)
                polys.append((idx, line_no))
            # vn / vt / g / o / s / usemtl / mtllib: ignored
    if not vertices:
        raise MeshError(f"empty mesh: no vertices in {path}")

    n_verts = len(vertices)
    triangles: list[tuple[int, int, int]] = []
    for idx, line_no in polys:
        for i in idx:
            if i > n_verts:
                raise ObjParseError(
                    f"face index {i} out of range (mesh has {n_verts} vertices)", line_no
                )
        base = idx[0] - 1
        for k in range(1, len(idx) - 1):
            tri = (base, idx[k] - 1, idx[k + 1] - 1)
            if len(set(tri)) != 3:
                raise ObjParseError("face repeats a vertex index", line_no)
            triangles.append(tri)
    try:
        return TriMesh(np.array(vertices, dtype=np.float64), np.array(triangles, dtype=np.int64))
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_obj(mesh: TriMesh, path) -> None:
    """Write ``v``/``f`` records only, coordinates at 9 significant digits.

    Reloading reproduces faces exactly and coordinates within 1e-6 for
    scene-scale meshes.
    """
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def bbox_diagonal(mesh) -> float:
    """Diagonal length of the axis-aligned bounding box.

    Accepts a TriMesh or a raw (N, 3) position array.
    """
    verts = mesh.vertices if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=np.float64)
    verts = np.atleast_2d(verts)
    if verts.shape[0] < 1:
        raise MeshError("bbox_diagonal needs at least one vertex")
    return float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))


def triangle_degenerate(tri) -> bool:
    """Area below 1e-12 of the squared triangle-bbox diagonal."""
    tri = np.asarray(tri, dtype=np.float64)
    diag2 = ((tri.max(axis=0) - tri.min(axis=0)) ** 2).sum()
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    return bool(area <= 1e-12 * diag2)


def closest_point_on_triangle(p, tri):
    """Closest point of the closed triangle to ``p``.

    Returns ``(point, coords)`` where ``coords`` are barycentric weights of
    ``point`` with respect to the triangle's vertices (entries in [0, 1],
    summing to 1).

    Raises:
        MeshError: the triangle is degenerate.
    """
    tri = np.asarray(tri, dtype=np.float64)
    if triangle_degenerate(tri):
        raise MeshError("degenerate triangle")
    p = np.asarray(p, dtype=np.float64)
    a, b, c = tri
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy(), np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b.copy(), np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return a + t * ab, np.array([1.0 - t, t, 0.0])
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c.copy(), np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return a + t * ac, np.array([1.0 - t, 0.0, t])
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), np.array([0.0, 1.0 - t, t])
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return a + v * ab + w * ac, np.array([1.0 - v - w, v, w])


def _closest_on_triangles(points, tri):
    """Vectorized closest-point query: ``points`` (n, 3) against ``tri`` (m, 3, 3).

    Returns (dist2 (n, m), coords (n, m, 3), closest (n, m, 3)). Region tests
    mirror closest_point_on_triangle exactly, in the same priority order.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    p = points[:, None, :]
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den != 0.0, den, 1.0)

    t_ab = safe_div(d1, d1 - d3)
    t_ac = safe_div(d2, d2 - d6)
    t_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    denom = va + vb + vc
    v_in = safe_div(vb, denom)
    w_in = safe_div(vc, denom)

    conds = [
        (d1 <= 0.0) & (d2 <= 0.0),
        (d3 >= 0.0) & (d4 <= d3),
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),
        (d6 >= 0.0) & (d5 <= d6),
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),
        (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0),
    ]
    zeros = np.zeros_like(d1)
    ones = np.ones_like(d1)
    u = np.select(conds, [ones, zeros, 1.0 - t_ab, zeros, 1.0 - t_ac, zeros], 1.0 - v_in - w_in)
    v = np.select(conds, [zeros, ones, t_ab, zeros, zeros, 1.0 - t_bc], v_in)
    w = np.select(conds, [zeros, zeros, zeros, ones, t_ac, t_bc], w_in)
    closest = u[..., None] * a + v[..., None] * b + w[..., None] * c
    dist2 = ((closest - p) ** 2).sum(-1)
    return dist2, np.stack([u, v, w], axis=-1), closest


def nearest_faces(points, mesh: TriMesh, chunk: int = 128):
    """Exhaustive nearest-face search for every query point.

    Returns (face_indices (n,), coords (n, 3), closest (n, 3), dist (n,)).
    Ties between faces resolve to the lowest face index.
    """
    if mesh.n_faces == 0:
        raise MeshError("mesh has no faces")
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    n = points.shape[0]
    face_idx = np.empty(n, dtype=np.int64)
    coords = np.empty((n, 3))
    closest = np.empty((n, 3))
    dist = np.empty(n)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        d2, bary, pts = _closest_on_triangles(points[sl], tri)
        best = d2.argmin(axis=1)
        rows = np.arange(d2.shape[0])
        face_idx[sl] = best
        coords[sl] = bary[rows, best]
        closest[sl] = pts[rows, best]
        dist[sl] = np.sqrt(d2[rows, best])
    return face_idx, coords, closest, dist


def nearest_face_point(mesh: TriMesh, p) -> BaryHit:
    """BaryHit for a single query point against a whole mesh."""
    face_idx, coords, closest, _ = nearest_faces(np.asarray(p, dtype=np.float64)[None], mesh)
    return BaryHit(int(face_idx[0]), closest[0], coords[0])


@dataclasses.dataclass(frozen=True)
class MeshAdjacency:
    """Vertex neighborhoods plus the degree-normalized aggregation operator.

    ``weights[v]`` is 1 / (1 + degree(v)); the aggregation matrix averages a
    vertex with its neighbors (self-loop included), so isolated vertices
    keep their own features. Rows of ``matrix`` sum to 1. ``faces`` and the
    vertex-face ``incidence`` matrix ride along for normal computation.
    """

    neighbors: tuple
    weights: np.ndarray
    matrix: sp.csr_matrix
    faces: np.ndarray
    incidence: sp.csr_matrix

    @property
    def n_vertices(self) -> int:
        return len(self.neighbors)


def face_incidence(faces, n_vertices: int) -> sp.csr_matrix:
    """(V, F) matrix with a 1 wherever a vertex belongs to a face."""
    faces = np.asarray(faces, dtype=np.int64)
    n_faces = faces.shape[0]
    cols = np.repeat(np.arange(n_faces, dtype=np.int64), 3)
    rows = faces.reshape(-1)
    data = np.ones(rows.size)
    return sp.csr_matrix((data, (rows, cols)), shape=(n_vertices, n_faces))


def vertex_normals(vertices, faces) -> np.ndarray:
    """Area-weighted vertex normals, unit length (zero for isolated vertices)."""
    verts = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    normals = np.zeros_like(verts)
    if faces.size:
        face_n = np.cross(
            verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]]
        )
        for corner in range(3):
            np.add.at(normals, faces[:, corner], face_n)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lengths, 1e-12)


def adjacency(mesh: TriMesh) -> MeshAdjacency:
    """Symmetric vertex adjacency from face edges."""
    n = mesh.n_vertices
    if mesh.n_faces:
        f = mesh.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]])
        edges = np.unique(np.sort(edges, axis=1), axis=0)
    else:
        edges = np.empty((0, 2), dtype=np.int64)
    neighbor_sets = [[] for _ in range(n)]
    for i, j in edges:
        neighbor_sets[i].append(j)
        neighbor_sets[j].append(i)
    neighbors = tuple(np.array(sorted(s), dtype=np.int64) for s in neighbor_sets)
    degrees = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    weights = 1.0 / (1.0 + degrees)

    rows = [np.full(len(nb) + 1, v, dtype=np.int64) for v, nb in enumerate(neighbors)]
    cols = [np.concatenate([[v], nb]) for v, nb in enumerate(neighbors)]
    data = [np.full(len(nb) + 1, weights[v]) for v, nb in enumerate(neighbors)]
    matrix = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return MeshAdjacency(neighbors, weights, matrix, mesh.faces, face_incidence(mesh.faces, n))
