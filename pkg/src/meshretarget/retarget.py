"""Per-level retargeting layers (pose encoder, skinning predictor, part
decoder) and the coarse-to-fine pipeline that stacks them across pyramid
levels."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import nn
from .coarsen import MeshPyramid
from .deform import PartTransforms, SkinningWeights
from .mesh import TriMesh, adjacency
from .mesh import vertex_normals as mesh_normals

EMBED_DIM = 128
PARTS_PER_LEVEL = 40


@dataclasses.dataclass
class LevelParams:
    encoder: nn.GraphConvParams
    skinner: nn.GraphConvParams
    decoder: nn.GraphConvParams


@dataclasses.dataclass
class RetargetModel:
    """Parameter bundles for every pyramid level.

    All levels share the part count and embedding width; the decoder's last
    layer starts at zero so an untrained model maps any input to the
    identity deformation.
    """

    levels: list
    parts: int = PARTS_PER_LEVEL
    embed_dim: int = EMBED_DIM

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def named_parameters(self) -> dict:
        params: dict[str, nn.Tensor] = {}
        for k, level in enumerate(self.levels):
            for net_name in ("encoder", "skinner", "decoder"):
                net = getattr(level, net_name)
                for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                    params[f"level{k}.{net_name}.w{i}"] = w
                    params[f"level{k}.{net_name}.b{i}"] = b
        return params

    def config_meta(self) -> dict:
        return {"levels": str(self.n_levels - 1), "parts": str(self.parts), "embed_dim": str(self.embed_dim)}


FEATURE_DIM = 9


def init_model(n_levels: int, parts: int = PARTS_PER_LEVEL, embed_dim: int = EMBED_DIM, seed: int = 0) -> RetargetModel:
    """Fresh model for a pyramid with ``n_levels`` coarsening steps (so
    n_levels + 1 retargeting layers), deterministic in the seed."""
    rng = np.random.default_rng(seed)
    levels = []
    for _ in range(n_levels + 1):
        encoder = nn.init_graph_conv((FEATURE_DIM, 64, 128, embed_dim), rng)
        skinner = nn.init_graph_conv((FEATURE_DIM, 64, 64, parts), rng)
        decoder = nn.init_graph_conv((embed_dim, 64, 6), rng, zero_last=True)
        levels.append(LevelParams(encoder, skinner, decoder))
    return RetargetModel(levels, parts, embed_dim)


def vertex_features(vertices, adj):
    """Per-vertex input features: position, mean-centered position, and the
    area-weighted unit vertex normal. Orientation needs the normals: part
    rotations are underdetermined by aggregated positions alone.

    Tensor inputs stay differentiable (needed when a retargeted pose feeds a
    second pass, as in cycle training).
    """
    if isinstance(vertices, nn.Tensor):
        centered = nn.sub(
            vertices, nn.mul(nn.sum_(vertices, axis=0, keepdims=True), 1.0 / vertices.shape[0])
        )
        faces = adj.faces
        if faces.size:
            face_n = nn.cross(
                nn.sub(vertices[faces[:, 1]], vertices[faces[:, 0]]),
                nn.sub(vertices[faces[:, 2]], vertices[faces[:, 0]]),
            )
            summed = nn.spmm(adj.incidence, face_n)
            norm = nn.sqrt(nn.add(nn.sum_(nn.mul(summed, summed), axis=1, keepdims=True), 1e-24))
            normals = nn.div(summed, norm)
        else:
            normals = nn.Tensor(np.zeros(vertices.shape))
        return nn.concat([vertices, centered, normals], axis=1)
    v = np.asarray(vertices, dtype=np.float64)
    normals = mesh_normals(v, adj.faces)
    return np.concatenate([v, v - v.mean(axis=0), normals], axis=1)


def _agg(adj):
    return adj.matrix


def encode_pose(vertices, adj, model: RetargetModel, level: int) -> nn.Tensor:
    """Vertex-wise pose embedding, (V, embed_dim)."""
    return nn.graph_conv_forward(vertex_features(vertices, adj), _agg(adj), model.levels[level].encoder)


def predict_skinning(rest_vertices, adj, model: RetargetModel, level: int) -> nn.Tensor:
    """Column-stochastic (parts, V) skinning weights for a rest mesh."""
    logits = nn.graph_conv_forward(
        vertex_features(rest_vertices, adj), _agg(adj), model.levels[level].skinner
    )
    return nn.softmax_columns(nn.transpose(logits))


def part_deformation_code(w_source, e_pose, e_rest_source, w_target, e_rest_target) -> nn.Tensor:
    """Part-level deformation code: the source's part-aggregated pose change
    minus the target's part-aggregated rest state."""
    return nn.sub(
        nn.matmul(w_source, nn.sub(e_pose, e_rest_source)),
        nn.matmul(w_target, e_rest_target),
    )


def decode_parts(code, rest_pivots, model: RetargetModel, level: int):
    """Map part codes to 6D motions. Returns (positions, rotations) tensors;
    positions are the rest pivots plus a decoded offset."""
    out = nn.dense_forward(code, model.levels[level].decoder)
    offsets = out[:, :3]
    rotations = out[:, 3:]
    positions = nn.add(nn.as_tensor(rest_pivots), offsets)
    return positions, rotations


def joint_positions_t(weights: nn.Tensor, rest_vertices) -> nn.Tensor:
    """Tensor version of the weighted-centroid pivots."""
    mass = nn.sum_(weights, axis=1, keepdims=True)
    return nn.div(nn.matmul(weights, nn.as_tensor(rest_vertices)), mass)


def rotation_matrices_t(rotations: nn.Tensor) -> nn.Tensor:
    """Differentiable Rodrigues rotations, (J, 3) -> (J, 3, 3)."""
    t = nn.sum_(nn.mul(rotations, rotations), axis=1)
    a = nn.reshape(nn.rot_coef_a(t), (-1, 1, 1))
    b = nn.reshape(nn.rot_coef_b(t), (-1, 1, 1))
    k = nn.skew3(rotations)
    kk = nn.einsum2("jab,jbc->jac", k, k)
    eye = nn.Tensor(np.broadcast_to(np.eye(3), k.shape).copy())
    return nn.add(eye, nn.add(nn.mul(a, k), nn.mul(b, kk)))


def lbs_pose(rest_vertices, weights: nn.Tensor, pivots: nn.Tensor, positions: nn.Tensor, rotations: nn.Tensor) -> nn.Tensor:
    """Differentiable blend of per-part rigid motions (same semantics as
    deform.lbs_apply)."""
    rot = rotation_matrices_t(rotations)
    blended = nn.einsum2("jv,jab->vab", weights, rot)
    moved = nn.einsum2("vab,vb->va", blended, nn.as_tensor(rest_vertices))
    offsets = nn.sub(positions, nn.einsum2("jab,jb->ja", rot, pivots))
    return nn.add(moved, nn.matmul(nn.transpose(weights), offsets))


@dataclasses.dataclass
class CharacterInputs:
    """Per-character forward inputs at every pyramid level (one character's
    rest geometry, aggregation operators, and target-side lifting maps)."""

    rest_levels: list
    aggs: list
    up_maps: list
    key: object = None

    @classmethod
    def from_pyramid(cls, pyramid: MeshPyramid, key=None) -> "CharacterInputs":
        return cls(
            [lvl.vertices for lvl in pyramid.levels],
            [adjacency(lvl) for lvl in pyramid.levels],
            pyramid.up_maps,
            key,
        )

    @property
    def n_levels(self) -> int:
        return len(self.rest_levels)


@dataclasses.dataclass
class LevelOutput:
    """Tensors produced by one retargeting layer."""

    weights_source: nn.Tensor
    weights_target: nn.Tensor
    pivots: nn.Tensor
    positions: nn.Tensor
    rotations: nn.Tensor

    def transforms6(self) -> nn.Tensor:
        return nn.concat([self.positions, self.rotations], axis=1)


@dataclasses.dataclass
class _StackedRep:
    positions: nn.Tensor
    rotations: nn.Tensor
    pivots: nn.Tensor
    weights: nn.Tensor


def _cached(cache, key, build):
    if cache is None or key is None:
        return build()
    if key not in cache:
        cache[key] = build()
    return cache[key]


def level_forward(
    model: RetargetModel,
    level: int,
    pose_vertices,
    source: CharacterInputs,
    target: CharacterInputs,
    cache: dict | None = None,
) -> LevelOutput:
    """One retargeting layer: encode source pose/rest and target rest,
    predict both skinnings, form the part code and decode part motions."""
    e_pose = encode_pose(pose_vertices, source.aggs[level], model, level)
    e_rest_s = _cached(
        cache,
        None if source.key is None else (source.key, "enc", level),
        lambda: encode_pose(source.rest_levels[level], source.aggs[level], model, level),
    )
    e_rest_t = _cached(
        cache,
        None if target.key is None else (target.key, "enc", level),
        lambda: encode_pose(target.rest_levels[level], target.aggs[level], model, level),
    )
    w_s = _cached(
        cache,
        None if source.key is None else (source.key, "skin", level),
        lambda: predict_skinning(source.rest_levels[level], source.aggs[level], model, level),
    )
    w_t = _cached(
        cache,
        None if target.key is None else (target.key, "skin", level),
        lambda: predict_skinning(target.rest_levels[level], target.aggs[level], model, level),
    )
    code = part_deformation_code(w_s, e_pose, e_rest_s, w_t, e_rest_t)
    pivots = joint_positions_t(w_t, target.rest_levels[level])
    positions, rotations = decode_parts(code, pivots, model, level)
    return LevelOutput(w_s, w_t, pivots, positions, rotations)


def _stack_level(level_out: LevelOutput, up_map, coarser: _StackedRep | None) -> _StackedRep:
    if coarser is None:
        return _StackedRep(
            level_out.positions, level_out.rotations, level_out.pivots, level_out.weights_target
        )
    lifted = nn.transpose(nn.spmm(up_map.matrix, nn.transpose(coarser.weights)))
    stacked = nn.concat([level_out.weights_target, lifted], axis=0)
    stacked = nn.div(stacked, nn.sum_(stacked, axis=0, keepdims=True))
    return _StackedRep(
        nn.concat([level_out.positions, coarser.positions], axis=0),
        nn.concat([level_out.rotations, coarser.rotations], axis=0),
        nn.concat([level_out.pivots, coarser.pivots], axis=0),
        stacked,
    )


@dataclasses.dataclass
class FullForwardResult:
    outputs: list
    level_outputs: list


def full_forward(
    model: RetargetModel,
    pose_levels,
    source: CharacterInputs,
    target: CharacterInputs,
    cache: dict | None = None,
    lowest_only: bool = False,
    no_refine: bool = False,
) -> FullForwardResult:
    """Run every retargeting layer coarsest-first and produce the predicted
    target pose at each level.

    The coarsest level poses the target directly; finer levels pose their
    rest mesh with the stacked multi-level representation. ``lowest_only``
    runs just the coarsest layer; ``no_refine`` replaces the stacking with a
    plain average of each layer's direct output and the lifted coarser
    output.
    """
    top = source.n_levels - 1
    if target.n_levels != source.n_levels:
        raise ValueError("source and target pyramids must have the same depth")
    outputs: list = [None] * (top + 1)
    level_outputs: list = [None] * (top + 1)
    rep: _StackedRep | None = None
    for level in range(top, -1, -1):
        out = level_forward(model, level, pose_levels[level], source, target, cache)
        level_outputs[level] = out
        rest_t = target.rest_levels[level]
        if no_refine:
            direct = lbs_pose(rest_t, out.weights_target, out.pivots, out.positions, out.rotations)
            if level == top:
                outputs[level] = direct
            else:
                lifted = nn.spmm(target.up_maps[level].matrix, outputs[level + 1])
                outputs[level] = nn.mul(nn.add(direct, lifted), 0.5)
        else:
            rep = _stack_level(out, None if level == top else target.up_maps[level], rep)
            outputs[level] = lbs_pose(rest_t, rep.weights, rep.pivots, rep.positions, rep.rotations)
        if lowest_only:
            break
    return FullForwardResult(outputs, level_outputs)


def _to_part_transforms(out: LevelOutput) -> PartTransforms:
    return PartTransforms(out.positions.data.copy(), out.rotations.data.copy())


def retarget_level(
    level: int,
    source_pose_mesh: TriMesh,
    source_rest_mesh: TriMesh,
    target_rest_mesh: TriMesh,
    model: RetargetModel,
):
    """Single-layer retargeting on meshes already at pyramid level ``level``.

    Returns (PartTransforms, SkinningWeights) for the target.
    """
    # Pad the per-level lists so index ``level`` selects these meshes.
    adj_s = adjacency(source_rest_mesh)
    adj_t = adjacency(target_rest_mesh)
    source = CharacterInputs(
        [source_rest_mesh.vertices] * (level + 1), [adj_s] * (level + 1), []
    )
    target = CharacterInputs(
        [target_rest_mesh.vertices] * (level + 1), [adj_t] * (level + 1), []
    )
    out = level_forward(model, level, source_pose_mesh.vertices, source, target)
    return _to_part_transforms(out), SkinningWeights(out.weights_target.data.copy())


@dataclasses.dataclass
class RetargetResult:
    """Predicted target pose at every level, finest first."""

    level_positions: list

    @property
    def final_positions(self) -> np.ndarray:
        return self.level_positions[0]


def retarget_full(
    source_pose_pyramid: MeshPyramid,
    source_rest_pyramid: MeshPyramid,
    target_rest_pyramid: MeshPyramid,
    model: RetargetModel,
) -> RetargetResult:
    """Full coarse-to-fine retargeting over prebuilt pyramids.

    The pose pyramid must share the rest pyramid's topology (build it with
    ``rest_pyramid.reposed(pose_vertices)``).
    """
    if not (
        source_pose_pyramid.n_levels
        == source_rest_pyramid.n_levels
        == target_rest_pyramid.n_levels
        == model.n_levels
    ):
        raise ValueError("pyramids and model must have the same level count")
    for pose_lvl, rest_lvl in zip(source_pose_pyramid.levels, source_rest_pyramid.levels):
        if pose_lvl.n_vertices != rest_lvl.n_vertices:
            raise ValueError("pose pyramid does not match the source rest pyramid")
    source = CharacterInputs.from_pyramid(source_rest_pyramid)
    target = CharacterInputs.from_pyramid(target_rest_pyramid)
    pose_levels = [lvl.vertices for lvl in source_pose_pyramid.levels]
    result = full_forward(model, pose_levels, source, target)
    return RetargetResult([out.data.copy() for out in result.outputs])
