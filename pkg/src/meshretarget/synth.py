"""Procedural tube-limb characters with exact skinning and forward-kinematics
ground truth, plus the paired dataset they form."""

from __future__ import annotations

import dataclasses
import hashlib
import os

import numpy as np

from .deform import (
    PartTransforms,
    SkinningWeights,
    axis_angle_from_matrix,
    lbs_apply,
    rotation_matrix,
)
from .mesh import MeshError, TriMesh, load_obj, save_obj

RING_SEGMENTS = 6


# ---------------------------------------------------------------------------
# Primitive meshes (also used by tests and the round-trip harness)


def tube(p0, p1, radius: float, rings: int):
    """Closed tube of triangle strips around the segment p0 -> p1, with flat
    end caps. Returns (vertices, faces)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    if length <= 0:
        raise ValueError("tube endpoints coincide")
    axis = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    angles = np.linspace(0.0, 2.0 * np.pi, RING_SEGMENTS, endpoint=False)
    circle = np.cos(angles)[:, None] * e1 + np.sin(angles)[:, None] * e2
    verts = []
    for k in range(rings):
        center = p0 + (k / (rings - 1)) * (p1 - p0)
        verts.append(center + radius * circle)
    verts = np.concatenate(verts)
    verts = np.concatenate([verts, p0[None], p1[None]])
    faces = []
    m = RING_SEGMENTS
    for k in range(rings - 1):
        for s in range(m):
            a = k * m + s
            b = k * m + (s + 1) % m
            c = (k + 1) * m + s
            d = (k + 1) * m + (s + 1) % m
            faces.append((a, b, d))
            faces.append((a, d, c))
    bottom = rings * m
    top = rings * m + 1
    last = (rings - 1) * m
    for s in range(m):
        faces.append((bottom, (s + 1) % m, s))
        faces.append((top, last + s, last + (s + 1) % m))
    return verts, np.array(faces, dtype=np.int64)


def icosphere(subdivisions: int, radius: float = 1.0) -> TriMesh:
    """Icosahedron subdivided ``subdivisions`` times, projected to a sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint_of: dict = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_of:
                midpoint_of[key] = len(verts_list)
                verts_list.append(0.5 * (verts_list[i] + verts_list[j]))
            return midpoint_of[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True) * radius
    return TriMesh(verts, faces)


def plane_grid(n: int, size: float = 1.0) -> TriMesh:
    """Flat (n+1) x (n+1) vertex grid in the z = 0 plane."""
    coords = np.linspace(-size / 2, size / 2, n + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + 1
            c = a + (n + 1)
            d = c + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(verts, np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# Characters


@dataclasses.dataclass(frozen=True)
class CharacterStyle:
    """Knobs for the procedural body plan."""

    vertex_budget: int = 500
    n_arms: int = 2
    n_legs: int = 2
    scale_spread: float = 0.2  # relative jitter on limb lengths and radii


@dataclasses.dataclass
class Skeleton:
    """Joint tree: ``parents[j] < j`` with a single root at index 0. Bone b
    spans the segment from ``parents[b + 1]`` to ``b + 1``."""

    parents: np.ndarray
    rest_positions: np.ndarray

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_bones(self) -> int:
        return self.n_joints - 1

    def bone_endpoints(self):
        child = np.arange(1, self.n_joints)
        parent = self.parents[child]
        return self.rest_positions[parent], self.rest_positions[child]


@dataclasses.dataclass
class CharacterSample:
    rest: TriMesh
    gt_skinning: SkinningWeights
    skeleton: Skeleton
    bone_radii: np.ndarray
    style: CharacterStyle
    seed: int


@dataclasses.dataclass(frozen=True)
class PoseSpec:
    """Axis-angle rotation per joint (row 0 drives the root) plus a global
    root translation; angle magnitudes stay within pi."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.joint_rotations, dtype=np.float64)
        trans = np.asarray(self.root_translation, dtype=np.float64)
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("pose contains non-finite values")
        if np.linalg.norm(rot, axis=1).max(initial=0.0) > np.pi + 1e-9:
            raise ValueError("joint angles must not exceed pi")
        object.__setattr__(self, "joint_rotations", rot)
        object.__setattr__(self, "root_translation", trans)


def _build_skeleton(rng: np.random.Generator, style: CharacterStyle):
    """Joint layout: pelvis root, spine, head, and symmetric arm/leg chains.
    Returns (parents, rest joint positions, per-bone radii)."""
    jitter = lambda: 1.0 + style.scale_spread * (rng.uniform() - 0.5) * 2.0
    positions = [np.array([0.0, 0.9, 0.0])]
    parents = [-1]
    radii = []

    def add_joint(parent: int, offset, bone_radius: float) -> int:
        positions.append(positions[parent] + np.asarray(offset, dtype=np.float64))
        parents.append(parent)
        radii.append(bone_radius)
        return len(positions) - 1

    torso_r = 0.15 * jitter()
    spine = add_joint(0, (0.0, 0.35 * jitter(), 0.0), torso_r)
    add_joint(spine, (0.0, 0.45 * jitter(), 0.0), 0.09 * jitter())  # head
    for arm in range(style.n_arms):
        side = -1.0 if arm % 2 == 0 else 1.0
        z_off = 0.12 * (arm // 2)
        upper_len = 0.30 * jitter()
        fore_len = 0.28 * jitter()
        arm_r = 0.05 * jitter()
        shoulder = add_joint(spine, (side * 0.22, 0.05, z_off), 0.06 * jitter())
        elbow = add_joint(shoulder, (side * upper_len, -0.05, 0.0), arm_r)
        add_joint(elbow, (side * fore_len, -0.03, 0.0), 0.045 * jitter())
    for leg in range(style.n_legs):
        side = -1.0 if leg % 2 == 0 else 1.0
        z_off = 0.12 * (leg // 2)
        thigh_len = 0.40 * jitter()
        shin_len = 0.38 * jitter()
        leg_r = 0.07 * jitter()
        hip = add_joint(0, (side * 0.12, -0.06, z_off), 0.08 * jitter())
        knee = add_joint(hip, (0.0, -thigh_len, 0.0), leg_r)
        add_joint(knee, (0.0, -shin_len, 0.0), 0.055 * jitter())
    return (
        np.array(parents, dtype=np.int64),
        np.vstack(positions),
        np.array(radii),
    )


def _segment_distances(points, seg_starts, seg_ends) -> np.ndarray:
    """Distance from each point to each segment, (V, B)."""
    d = seg_ends - seg_starts
    len2 = (d * d).sum(axis=1)
    rel = points[:, None, :] - seg_starts[None, :, :]
    t = np.clip((rel * d[None]).sum(-1) / np.where(len2 > 0, len2, 1.0), 0.0, 1.0)
    closest = seg_starts[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def make_character(style: CharacterStyle, seed: int) -> CharacterSample:
    """Deterministic tube-limb character with smooth reference skinning.

    Ring counts are scaled so the vertex total lands within 10% of the
    style's budget.

    Raises:
        MeshError: the budget is too small for the body plan.
    """
    if not 100 <= style.vertex_budget <= 2000:
        raise MeshError(f"vertex budget {style.vertex_budget} outside [100, 2000]")
    rng = np.random.default_rng(seed)
    parents, joints, radii = _build_skeleton(rng, style)
    skeleton = Skeleton(parents, joints)
    starts, ends = skeleton.bone_endpoints()
    lengths = np.linalg.norm(ends - starts, axis=1)

    # Budget: rings_b = max(2, round(q * length_b)); solve q by bisection.
    def total_vertices(q: float) -> int:
        rings = np.maximum(2, np.rint(q * lengths).astype(int))
        return int((rings * RING_SEGMENTS + 2).sum())

    lo, hi = 0.1, 200.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if total_vertices(mid) < style.vertex_budget:
            lo = mid
        else:
            hi = mid
    q = 0.5 * (lo + hi)
    rings = np.maximum(2, np.rint(q * lengths).astype(int))
    if abs(total_vertices(q) - style.vertex_budget) > 0.1 * style.vertex_budget:
        raise MeshError(f"cannot hit vertex budget {style.vertex_budget} with this body plan")

    all_verts, all_faces = [], []
    offset = 0
    for b in range(skeleton.n_bones):
        verts, faces = tube(starts[b], ends[b], radii[b], int(rings[b]))
        all_verts.append(verts)
        all_faces.append(faces + offset)
        offset += len(verts)
    rest = TriMesh(np.concatenate(all_verts), np.concatenate(all_faces))

    distances = _segment_distances(rest.vertices, starts, ends)
    tau = 0.1 * float(radii.mean())
    logits = -distances / tau
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return CharacterSample(rest, SkinningWeights(weights.T), skeleton, radii, style, seed)


def fk_transforms(skeleton: Skeleton, pose: PoseSpec) -> PartTransforms:
    """Forward kinematics: world transform of every bone as (posed parent
    joint, composed rotation). The zero pose yields the identity motion."""
    if pose.joint_rotations.shape[0] != skeleton.n_joints:
        raise ValueError(
            f"pose has {pose.joint_rotations.shape[0]} joints, skeleton has {skeleton.n_joints}"
        )
    n = skeleton.n_joints
    rest = skeleton.rest_positions
    rot_world = [None] * n
    pos_world = np.empty((n, 3))
    rot_world[0] = rotation_matrix(pose.joint_rotations[0])
    pos_world[0] = rest[0] + pose.root_translation
    for j in range(1, n):
        p = skeleton.parents[j]
        rot_world[j] = rot_world[p] @ rotation_matrix(pose.joint_rotations[j])
        pos_world[j] = pos_world[p] + rot_world[p] @ (rest[j] - rest[p])
    bone_parent = skeleton.parents[np.arange(1, n)]
    positions = pos_world[bone_parent]
    rotations = np.vstack([axis_angle_from_matrix(rot_world[p]) for p in bone_parent])
    return PartTransforms(positions, rotations)


def bone_rest_pivots(skeleton: Skeleton) -> np.ndarray:
    return skeleton.rest_positions[skeleton.parents[np.arange(1, skeleton.n_joints)]]


def pose_character(character: CharacterSample, pose: PoseSpec) -> TriMesh:
    """Apply forward kinematics and blend with the reference skinning."""
    parts = fk_transforms(character.skeleton, pose)
    posed = lbs_apply(
        character.rest.vertices,
        character.gt_skinning,
        bone_rest_pivots(character.skeleton),
        parts,
    )
    return TriMesh(posed, character.rest.faces)


# ---------------------------------------------------------------------------
# Dataset


@dataclasses.dataclass
class Dataset:
    """Characters sharing one pose bank, with a deterministic pose split.

    ``posed[(c, p)]`` holds character c's vertices under pose p. Unpaired
    character pairs (if any) opt in to cycle-consistency training.
    """

    characters: list
    poses: list
    posed: dict
    train_pose_ids: list
    test_pose_ids: list
    seed: int
    n_poses: int
    unpaired_pairs: list = dataclasses.field(default_factory=list)

    @property
    def n_characters(self) -> int:
        return len(self.characters)

    def split_hash(self) -> str:
        payload = ",".join(map(str, self.train_pose_ids)) + "|" + ",".join(map(str, self.test_pose_ids))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _sample_pose(rng: np.random.Generator, skeleton: Skeleton) -> PoseSpec:
    n = skeleton.n_joints
    rotations = np.zeros((n, 3))
    rotations[0] = rng.uniform(-0.25, 0.25, 3)
    for j in range(1, n):
        # Larger articulation on limb joints, gentler on the spine chain.
        amplitude = 0.25 if skeleton.parents[j] == 0 else 0.55
        rotations[j] = rng.uniform(-amplitude, amplitude, 3)
    translation = rng.uniform(-0.05, 0.05, 3)
    return PoseSpec(rotations, translation)


def make_dataset(
    n_characters: int,
    n_poses: int,
    seed: int,
    vertex_budget: int = 500,
    style: CharacterStyle | None = None,
) -> Dataset:
    """Characters with a shared skeleton topology, posed by one pose bank so
    cross-character supervision is exact. Pose indices split 75/25 into
    train/test, deterministically in the seed."""
    if n_characters < 1 or n_poses < 1:
        raise ValueError("need at least one character and one pose")
    base = style or CharacterStyle(vertex_budget=vertex_budget)
    rng = np.random.default_rng(seed)
    char_seeds = rng.integers(0, 2**31 - 1, size=n_characters)
    budgets = np.linspace(0.9, 1.1, n_characters) * base.vertex_budget
    characters = []
    for i in range(n_characters):
        char_style = dataclasses.replace(base, vertex_budget=int(round(budgets[i])))
        characters.append(make_character(char_style, int(char_seeds[i])))

    pose_rng = np.random.default_rng(seed + 1)
    poses = [_sample_pose(pose_rng, characters[0].skeleton) for _ in range(n_poses)]
    posed = {
        (c, p): pose_character(characters[c], poses[p]).vertices
        for c in range(n_characters)
        for p in range(n_poses)
    }
    split_rng = np.random.default_rng(seed + 2)
    order = split_rng.permutation(n_poses)
    n_train = max(1, int(round(0.75 * n_poses))) if n_poses > 1 else 1
    train_ids = sorted(int(i) for i in order[:n_train])
    test_ids = sorted(int(i) for i in order[n_train:])
    if not test_ids:
        test_ids = list(train_ids)
    return Dataset(characters, poses, posed, train_ids, test_ids, seed, n_poses)


MANIFEST_NAME = "manifest.txt"


def save_dataset(dataset: Dataset, directory) -> None:
    """Persist rest/pose OBJs, skinning matrices, and a key=value manifest."""
    os.makedirs(directory, exist_ok=True)
    for c, character in enumerate(dataset.characters):
        save_obj(character.rest, os.path.join(directory, f"char{c}_rest.obj"))
        character.gt_skinning.save(os.path.join(directory, f"char{c}_skinning.txt"))
        for p in range(dataset.n_poses):
            mesh = TriMesh(dataset.posed[(c, p)], character.rest.faces)
            save_obj(mesh, os.path.join(directory, f"char{c}_pose{p:03d}.obj"))
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write(f"seed={dataset.seed}\n")
        fh.write(f"n_characters={dataset.n_characters}\n")
        fh.write(f"n_poses={dataset.n_poses}\n")
        style = dataset.characters[0].style
        fh.write(f"vertex_budget={style.vertex_budget}\n")
        fh.write(f"n_arms={style.n_arms}\n")
        fh.write(f"n_legs={style.n_legs}\n")
        fh.write(f"train_poses={','.join(map(str, dataset.train_pose_ids))}\n")
        fh.write(f"test_poses={','.join(map(str, dataset.test_pose_ids))}\n")
        fh.write(f"split_hash={dataset.split_hash()}\n")


def load_dataset(directory) -> Dataset:
    """Regenerate the dataset from the manifest (generation is deterministic)
    and verify it against the persisted rest meshes."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    entries = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = line.strip().split("=", 1)
                entries[key] = value
    style = CharacterStyle(
        vertex_budget=int(entries["vertex_budget"]),
        n_arms=int(entries["n_arms"]),
        n_legs=int(entries["n_legs"]),
    )
    dataset = make_dataset(
        int(entries["n_characters"]),
        int(entries["n_poses"]),
        int(entries["seed"]),
        style=style,
    )
    if dataset.split_hash() != entries.get("split_hash"):
        raise MeshError(f"{manifest_path}: split hash mismatch; manifest edited?")
    for c, character in enumerate(dataset.characters):
        on_disk = load_obj(os.path.join(directory, f"char{c}_rest.obj"))
        if on_disk.n_vertices != character.rest.n_vertices or not np.allclose(
            on_disk.vertices, character.rest.vertices, atol=1e-5
        ):
            raise MeshError(f"char{c}_rest.obj does not match the manifest's generation")
    return dataset
