"""Quadric-error mesh coarsening and barycentric assignment maps between resolutions."""

from __future__ import annotations

import dataclasses
import heapq

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, TriMesh, bbox_diagonal, nearest_faces

# Candidate-pair radius as a fraction of the bbox diagonal, when not given.
DEFAULT_EPS_FACTOR = 0.01
# Above this condition number the 3x3 optimum solve falls back to candidates.
CONDITION_LIMIT = 1e8


class InfeasibleTargetError(MeshError):
    """The requested vertex count cannot be reached."""


def vertex_quadrics(mesh: TriMesh) -> np.ndarray:
    """Per-vertex 4x4 quadrics: sum of outer products of incident face planes.

    The error of homogeneous point v = (x, y, z, 1) under quadric Q is
    v Q v^T, the sum of squared distances to the incident planes.

    Raises:
        MeshError: a face has (near-)zero area, so its plane is undefined.
    """
    verts = mesh.vertices
    faces = mesh.faces
    quadrics = np.zeros((mesh.n_vertices, 4, 4))
    if mesh.n_faces == 0:
        return quadrics
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    diag2 = bbox_diagonal(mesh) ** 2
    bad = norms <= 2e-12 * diag2
    if bad.any():
        raise MeshError(f"face {int(np.flatnonzero(bad)[0])} is degenerate (zero area)")
    normals = normals / norms[:, None]
    offsets = -(normals * a).sum(axis=1)
    planes = np.concatenate([normals, offsets[:, None]], axis=1)
    face_q = planes[:, :, None] * planes[:, None, :]
    for corner in range(3):
        np.add.at(quadrics, faces[:, corner], face_q)
    return quadrics


def quadric_error(quadric: np.ndarray, position) -> float:
    h = np.append(np.asarray(position, dtype=np.float64), 1.0)
    return float(h @ quadric @ h)


def candidate_pairs(mesh: TriMesh, eps: float) -> np.ndarray:
    """Contraction candidates: all face edges plus non-edge pairs closer than eps.

    Returns an (#pairs, 2) int array with i < j, sorted lexicographically.
    """
    if eps < 0:
        raise MeshError("eps must be non-negative")
    if mesh.n_faces:
        f = mesh.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]])
        edges = np.unique(np.sort(edges, axis=1), axis=0)
    else:
        edges = np.empty((0, 2), dtype=np.int64)
    if eps == 0.0:
        return edges
    verts = mesh.vertices
    n = mesh.n_vertices
    close = []
    chunk = 256
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = np.linalg.norm(verts[start:stop, None, :] - verts[None, :, :], axis=2)
        ii, jj = np.nonzero(d < eps)
        ii = ii + start
        keep = ii < jj  # strict upper triangle, excludes self-pairs
        if keep.any():
            close.append(np.stack([ii[keep], jj[keep]], axis=1))
    if close:
        pairs = np.concatenate([edges] + close)
        pairs = np.unique(pairs, axis=0)
    else:
        pairs = edges
    return pairs


def optimal_contraction(qi, qj, vi, vj):
    """Best merged position and its cost for a vertex pair.

    Solves the 3x3 stationarity system of the combined quadric when it is
    well conditioned; otherwise evaluates the midpoint and both endpoints,
    preferring the midpoint and then the lower-index endpoint on cost ties.
    The cost is clamped at zero from below.
    """
    q = qi + qj
    a = q[:3, :3]
    b = q[:3, 3]
    cond = np.linalg.cond(a)
    if np.isfinite(cond) and cond < CONDITION_LIMIT:
        vstar = np.linalg.solve(a, -b)
        return vstar, max(quadric_error(q, vstar), 0.0)
    vi = np.asarray(vi, dtype=np.float64)
    vj = np.asarray(vj, dtype=np.float64)
    candidates = (0.5 * (vi + vj), vi, vj)
    costs = [quadric_error(q, c) for c in candidates]
    k = int(np.argmin(costs))
    return candidates[k].copy(), max(costs[k], 0.0)


@dataclasses.dataclass(frozen=True)
class Contraction:
    """One pair merge, in the index space of the input mesh."""

    kept: int
    removed: int
    position: np.ndarray
    cost: float


def coarsen_to(mesh: TriMesh, n_target: int, eps: float | None = None):
    """Greedy minimum-cost pair contraction down to ``n_target`` vertices.

    The candidate-pair set is fixed up front (edges plus eps-close pairs)
    and evolves only by inheriting the removed vertex's pairs at each merge.
    Costs live in a heap with version-stamped lazy invalidation: a merge
    bumps the surviving vertex's version and pushes fresh entries for all
    its pairs, so every live entry reflects current quadrics. Ties resolve
    by (cost, i, j). Faces that collapse onto fewer than three distinct
    vertices are dropped.

    Returns (coarse_mesh, contraction_log).

    Raises:
        InfeasibleTargetError: n_target is out of range, or no contractible
            pairs remain (isolated components) before reaching it.
    """
    n = mesh.n_vertices
    if n_target < 4 or n_target > n:
        raise InfeasibleTargetError(f"target {n_target} outside [4, {n}]")
    if n_target == n:
        return mesh, []
    if eps is None:
        eps = DEFAULT_EPS_FACTOR * bbox_diagonal(mesh)

    positions = mesh.vertices.copy()
    quadrics = vertex_quadrics(mesh)
    pairs = candidate_pairs(mesh, eps)
    neighbor: list[set] = [set() for _ in range(n)]
    for i, j in pairs:
        neighbor[i].add(int(j))
        neighbor[j].add(int(i))

    versions = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    heap: list = []

    def push(i: int, j: int):
        a, b = (i, j) if i < j else (j, i)
        vstar, cost = optimal_contraction(quadrics[a], quadrics[b], positions[a], positions[b])
        heapq.heappush(
            heap, (cost, a, b, int(versions[a]), int(versions[b]), vstar[0], vstar[1], vstar[2])
        )

    for i, j in pairs:
        push(int(i), int(j))

    remaining = n
    log: list[Contraction] = []
    while remaining > n_target:
        if not heap:
            raise InfeasibleTargetError(
                f"no contractible pairs left at {remaining} vertices "
                f"(target {n_target}); mesh has isolated components"
            )
        cost, a, b, ver_a, ver_b, x, y, z = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or versions[a] != ver_a or versions[b] != ver_b:
            continue
        vstar = np.array([x, y, z])
        positions[a] = vstar
        quadrics[a] = quadrics[a] + quadrics[b]
        alive[b] = False
        versions[a] += 1
        log.append(Contraction(a, b, vstar, cost))
        merged = (neighbor[a] | neighbor[b]) - {a, b}
        for u in neighbor[b]:
            neighbor[u].discard(b)
            if u != a:
                neighbor[u].add(a)
        neighbor[a] = merged
        neighbor[b] = set()
        remaining -= 1
        if remaining == n_target:
            break
        for u in sorted(merged):
            if alive[u]:
                push(a, u)

    # Resolve merge chains, then compact indices in original order.
    parent = np.arange(n)
    for entry in log:
        parent[entry.removed] = entry.kept
    root = parent.copy()
    changed = True
    while changed:
        nxt = parent[root]
        changed = bool((nxt != root).any())
        root = nxt
    new_index = np.cumsum(alive) - 1
    mapped = new_index[root[mesh.faces]] if mesh.n_faces else mesh.faces
    if mapped.size:
        distinct = (
            (mapped[:, 0] != mapped[:, 1])
            & (mapped[:, 1] != mapped[:, 2])
            & (mapped[:, 0] != mapped[:, 2])
        )
        mapped = mapped[distinct]
    coarse = TriMesh(positions[alive], mapped)
    return coarse, log


@dataclasses.dataclass
class AssignmentMap:
    """Sparse row-stochastic map expressing each destination vertex as a
    barycentric combination of at most three source vertices (one source
    face per row). Not a matrix inverse of its opposite-direction map.
    """

    matrix: sp.csr_matrix
    face_indices: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    def apply(self, values) -> np.ndarray:
        """Map per-source-vertex values (rows) to destination vertices."""
        return self.matrix @ np.asarray(values, dtype=np.float64)

    def save(self, path) -> None:
        """Text format: header ``rows cols nnz`` then ``row col value`` lines
        sorted by (row, col). Face provenance is not persisted."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.matrix.shape[0]} {self.matrix.shape[1]} {coo.nnz}\n")
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r} {c} {v:.17g}\n")

    @staticmethod
    def load(path) -> "AssignmentMap":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            rows, cols, nnz = int(header[0]), int(header[1]), int(header[2])
            r = np.empty(nnz, dtype=np.int64)
            c = np.empty(nnz, dtype=np.int64)
            d = np.empty(nnz)
            for k in range(nnz):
                parts = fh.readline().split()
                r[k], c[k], d[k] = int(parts[0]), int(parts[1]), float(parts[2])
        return AssignmentMap(sp.csr_matrix((d, (r, c)), shape=(rows, cols)))


def assignment_map(src: TriMesh, dst_vertices) -> AssignmentMap:
    """Barycentric assignment of each destination vertex to its nearest
    source face, rows normalized to sum exactly 1.

    Raises:
        MeshError: the source mesh has no faces.
    """
    if src.n_faces == 0:
        raise MeshError("assignment source mesh has no faces")
    dst_vertices = np.asarray(dst_vertices, dtype=np.float64)
    face_idx, coords, _, _ = nearest_faces(dst_vertices, src)
    n = dst_vertices.shape[0]
    rows = np.repeat(np.arange(n, dtype=np.int64), 3)
    cols = src.faces[face_idx].reshape(-1)
    data = coords.reshape(-1)
    keep = data > 0.0
    matrix = sp.csr_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, src.n_vertices))
    sums = np.asarray(matrix.sum(axis=1)).reshape(-1)
    matrix = sp.diags(1.0 / sums) @ matrix
    return AssignmentMap(matrix.tocsr(), face_idx)


@dataclasses.dataclass
class MeshPyramid:
    """Progressively coarsened meshes with inter-level assignment maps.

    ``down_maps[k]`` sends level-k vertex values to level k+1;
    ``up_maps[k]`` sends level-(k+1) values back to level k.
    """

    levels: list
    down_maps: list
    up_maps: list
    ratio: float

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def depth(self) -> int:
        """Number of coarsening steps (levels minus one)."""
        return len(self.levels) - 1

    def map_down(self, level0_positions) -> list[np.ndarray]:
        """Carry level-0 per-vertex positions through every level."""
        out = [np.asarray(level0_positions, dtype=np.float64)]
        for amap in self.down_maps:
            out.append(amap.apply(out[-1]))
        return out

    def lift_to_top(self, coarsest_positions) -> np.ndarray:
        """Chain up-maps from the coarsest level back to level 0."""
        values = np.asarray(coarsest_positions, dtype=np.float64)
        for amap in reversed(self.up_maps):
            values = amap.apply(values)
        return values

    def reposed(self, level0_positions) -> "MeshPyramid":
        """Same topology and maps, with vertex positions replaced by mapping
        new level-0 positions down the pyramid (used to coarsen pose frames
        consistently with their rest mesh)."""
        carried = self.map_down(level0_positions)
        levels = [TriMesh(v, lvl.faces) for v, lvl in zip(carried, self.levels)]
        return MeshPyramid(levels, self.down_maps, self.up_maps, self.ratio)


def build_pyramid(mesh: TriMesh, ratio: float, levels: int, eps: float | None = None) -> MeshPyramid:
    """Recursively coarsen ``levels`` times at the given ratio, computing both
    assignment maps at every step.

    Level k+1 targets max(4, round(ratio * |V_k|)) vertices (round half to
    even).
    """
    if not 0.0 < ratio < 1.0:
        raise MeshError(f"ratio must be in (0, 1), got {ratio}")
    if levels < 0:
        raise MeshError("level count must be non-negative")
    if int(np.rint(ratio**levels * mesh.n_vertices)) < 4:
        raise InfeasibleTargetError(
            f"{levels} levels at ratio {ratio} would shrink {mesh.n_vertices} vertices below 4"
        )
    meshes = [mesh]
    down_maps = []
    up_maps = []
    for _ in range(levels):
        current = meshes[-1]
        n_next = max(4, int(np.rint(ratio * current.n_vertices)))
        coarse, _ = coarsen_to(current, n_next, eps=eps)
        down_maps.append(assignment_map(current, coarse.vertices))
        up_maps.append(assignment_map(coarse, current.vertices))
        meshes.append(coarse)
    return MeshPyramid(meshes, down_maps, up_maps, ratio)
