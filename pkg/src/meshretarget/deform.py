"""Part-wise rigid transforms, linear blend skinning, and stacked multi-level
deformation representations."""

from __future__ import annotations

import dataclasses

import numpy as np

# Below this squared angle the Rodrigues coefficients use their power series.
_SERIES_THRESHOLD = 1e-6


def rotation_coeffs(theta_sq):
    """Rodrigues coefficients a = sin(t)/t and b = (1 - cos(t))/t^2 as smooth
    functions of the squared angle, with a series branch near zero."""
    t = np.asarray(theta_sq, dtype=np.float64)
    small = t < _SERIES_THRESHOLD
    ts = np.where(small, t, 0.0)
    a_series = 1.0 - ts / 6.0 + ts * ts / 120.0
    b_series = 0.5 - ts / 24.0 + ts * ts / 720.0
    t_guard = np.where(small, 1.0, t)
    theta = np.sqrt(t_guard)
    a_closed = np.sin(theta) / theta
    b_closed = (1.0 - np.cos(theta)) / t_guard
    return np.where(small, a_series, a_closed), np.where(small, b_series, b_closed)


def rotation_coeff_derivs(theta_sq):
    """Derivatives of the Rodrigues coefficients with respect to the squared angle."""
    t = np.asarray(theta_sq, dtype=np.float64)
    small = t < _SERIES_THRESHOLD
    ts = np.where(small, t, 0.0)
    da_series = -1.0 / 6.0 + ts / 60.0 - ts * ts / 1680.0
    db_series = -1.0 / 24.0 + ts / 360.0 - ts * ts / 13440.0
    t_guard = np.where(small, 1.0, t)
    theta = np.sqrt(t_guard)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / t_guard
    da_closed = (np.cos(theta) - a) / (2.0 * t_guard)
    db_closed = (0.5 * a - b) / t_guard
    return np.where(small, da_series, da_closed), np.where(small, db_series, db_closed)


def skew(vectors) -> np.ndarray:
    """Cross-product matrices: skew(r) @ v == cross(r, v). Batched over
    leading axes."""
    r = np.asarray(vectors, dtype=np.float64)
    out = np.zeros(r.shape[:-1] + (3, 3))
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def rotation_matrices(axis_angles) -> np.ndarray:
    """Rodrigues rotations for a batch of axis-angle vectors (J, 3) -> (J, 3, 3)."""
    r = np.atleast_2d(np.asarray(axis_angles, dtype=np.float64))
    t = (r * r).sum(axis=-1)
    a, b = rotation_coeffs(t)
    k = skew(r)
    kk = k @ k
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * kk


def rotation_matrix(axis_angle) -> np.ndarray:
    """Single axis-angle vector to an orthonormal 3x3 rotation; zero maps to identity."""
    axis_angle = np.asarray(axis_angle, dtype=np.float64)
    if axis_angle.shape != (3,):
        raise ValueError(f"axis-angle must be 3 scalars, got shape {axis_angle.shape}")
    if not np.isfinite(axis_angle).all():
        raise ValueError("axis-angle contains non-finite values")
    return rotation_matrices(axis_angle[None])[0]


def axis_angle_from_matrix(rotation) -> np.ndarray:
    """Inverse of rotation_matrix; the returned angle lies in [0, pi]."""
    m = np.asarray(rotation, dtype=np.float64)
    sin_axis = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    s = np.linalg.norm(sin_axis)
    c = 0.5 * (np.trace(m) - 1.0)
    theta = np.arctan2(s, np.clip(c, -1.0, 1.0))
    if theta < 1e-10:
        return np.zeros(3)
    if theta < np.pi - 1e-6:
        return sin_axis * (theta / s)
    # Near pi the sine part vanishes; recover the axis from the symmetric part.
    axis = np.sqrt(np.maximum(np.diag(m) - c, 0.0) / (1.0 - c))
    # Fix relative signs using the largest component.
    k = int(np.argmax(axis))
    signs = np.sign(np.array([m[k, 0] + m[0, k], m[k, 1] + m[1, k], m[k, 2] + m[2, k]]))
    signs[k] = 1.0
    axis = axis * np.where(signs == 0.0, 1.0, signs)
    axis = axis / np.linalg.norm(axis)
    return axis * theta


def canonical_axis_angle(axis_angles) -> np.ndarray:
    """Wrap axis-angle rotations so the encoded angle lies in [0, pi]."""
    r = np.asarray(axis_angles, dtype=np.float64).copy()
    flat = r.reshape(-1, 3)
    angles = np.linalg.norm(flat, axis=1)
    for i, theta in enumerate(angles):
        if theta <= np.pi or theta == 0.0:
            continue
        axis = flat[i] / theta
        wrapped = np.fmod(theta, 2.0 * np.pi)
        if wrapped > np.pi:
            wrapped = 2.0 * np.pi - wrapped
            axis = -axis
        flat[i] = axis * wrapped
    return flat.reshape(r.shape)


@dataclasses.dataclass(frozen=True)
class PartTransforms:
    """Per-part 6D rigid motion: target pivot position plus axis-angle rotation."""

    positions: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        if positions.shape != rotations.shape or positions.shape[1] != 3:
            raise ValueError(
                f"positions {positions.shape} and rotations {rotations.shape} must both be (J, 3)"
            )
        if not (np.isfinite(positions).all() and np.isfinite(rotations).all()):
            raise ValueError("part transforms contain non-finite values")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "rotations", canonical_axis_angle(rotations))

    @property
    def n_parts(self) -> int:
        return self.positions.shape[0]

    def as_array(self) -> np.ndarray:
        """(J, 6) rows of position followed by rotation."""
        return np.concatenate([self.positions, self.rotations], axis=1)


@dataclasses.dataclass(frozen=True)
class SkinningWeights:
    """Parts-by-vertices blend matrix; every vertex's column is a distribution."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"skinning weights must be 2D, got shape {matrix.shape}")
        if matrix.min() < -1e-9:
            raise ValueError("skinning weights must be non-negative")
        col_sums = matrix.sum(axis=0)
        if np.abs(col_sums - 1.0).max() > 1e-6:
            raise ValueError("skinning weight columns must each sum to 1")
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_parts(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[1]

    def save(self, path) -> None:
        """Text format: ``parts vertices`` header and row-major values at 9
        significant digits."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.n_parts} {self.n_vertices}\n")
            for row in self.matrix:
                fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")

    @staticmethod
    def load(path) -> "SkinningWeights":
        with open(path, "r", encoding="utf-8") as fh:
            parts, verts = (int(x) for x in fh.readline().split())
            rows = [np.array([float(v) for v in fh.readline().split()]) for _ in range(parts)]
        matrix = np.vstack(rows)
        if matrix.shape != (parts, verts):
            raise ValueError(f"skinning file body {matrix.shape} does not match header")
        return SkinningWeights(matrix)


def _weight_matrix(weights) -> np.ndarray:
    if isinstance(weights, SkinningWeights):
        return weights.matrix
    return np.asarray(weights, dtype=np.float64)


def joint_positions(weights, rest_vertices) -> np.ndarray:
    """Per-part pivot: the skinning-weighted centroid of the rest vertices.

    Raises:
        ValueError: some part has (near-)zero total weight.
    """
    w = _weight_matrix(weights)
    rest = np.asarray(rest_vertices, dtype=np.float64)
    mass = w.sum(axis=1)
    empty = mass <= 1e-9
    if empty.any():
        raise ValueError(f"part {int(np.flatnonzero(empty)[0])} has no skinning mass")
    return (w @ rest) / mass[:, None]


def lbs_apply(rest_vertices, weights, rest_pivots, parts: PartTransforms) -> np.ndarray:
    """Blend per-part rigid motions: each part rotates the rest vertex about
    its rest pivot and carries it to the part's target position; per-vertex
    results mix with the skinning weights.

    With identity rotations and target positions equal to the rest pivots,
    the output reproduces the rest vertices.
    """
    rest = np.asarray(rest_vertices, dtype=np.float64)
    w = _weight_matrix(weights)
    pivots = np.asarray(rest_pivots, dtype=np.float64)
    if w.shape[0] != parts.n_parts or pivots.shape != (parts.n_parts, 3):
        raise ValueError("part counts of weights, pivots and transforms disagree")
    if w.shape[1] != rest.shape[0]:
        raise ValueError("weight columns must match the vertex count")
    rot = rotation_matrices(parts.rotations)
    blended = np.einsum("jv,jab->vab", w, rot)
    offsets = parts.positions - np.einsum("jab,jb->ja", rot, pivots)
    return np.einsum("vab,vb->va", blended, rest) + w.T @ offsets


@dataclasses.dataclass(frozen=True)
class HierarchicalRep:
    """Transforms and weights stacked across pyramid levels (finest first),
    with the rest pivot every part was decoded against.

    ``weights`` columns are renormalized distributions over all stacked
    parts; ``level_parts`` records how many parts each level contributed.
    """

    transforms: PartTransforms
    weights: np.ndarray
    rest_pivots: np.ndarray
    level_parts: tuple

    @property
    def n_parts(self) -> int:
        return self.transforms.n_parts


def concat_representation(
    level_transforms: PartTransforms,
    level_weights,
    level_pivots,
    up_map=None,
    coarser: HierarchicalRep | None = None,
) -> HierarchicalRep:
    """Stack one level's parts on top of a coarser-level representation.

    The coarser weights are carried to this level's vertices through the
    up map, then all columns are renormalized to stay distributions. With
    no coarser representation this is the recursion base.
    """
    w = _weight_matrix(level_weights)
    pivots = np.asarray(level_pivots, dtype=np.float64)
    if coarser is None:
        return HierarchicalRep(level_transforms, w, pivots, (level_transforms.n_parts,))
    if up_map is None:
        raise ValueError("an up map is required to lift the coarser representation")
    if up_map.n_cols != coarser.weights.shape[1] or up_map.n_rows != w.shape[1]:
        raise ValueError("up map shape does not bridge the two levels")
    lifted = (up_map.matrix @ coarser.weights.T).T
    stacked = np.concatenate([w, lifted], axis=0)
    stacked = stacked / stacked.sum(axis=0, keepdims=True)
    transforms = PartTransforms(
        np.concatenate([level_transforms.positions, coarser.transforms.positions]),
        np.concatenate([level_transforms.rotations, coarser.transforms.rotations]),
    )
    all_pivots = np.concatenate([pivots, coarser.rest_pivots])
    return HierarchicalRep(
        transforms, stacked, all_pivots, (level_transforms.n_parts,) + coarser.level_parts
    )


def hierarchical_pose(rest_vertices, rep: HierarchicalRep) -> np.ndarray:
    """Pose a mesh with a stacked representation: one flat blend over all
    concatenated parts, each about its own recorded rest pivot."""
    return lbs_apply(rest_vertices, rep.weights, rep.rest_pivots, rep.transforms)
