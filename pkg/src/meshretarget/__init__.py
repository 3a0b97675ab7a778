"""Skeleton-free pose and motion retargeting through hierarchical mesh
coarsening: pyramid construction with continuous inter-level maps, part-wise
skinning and rigid transforms learned on the coarse level, and coarse-to-fine
refinement."""

from .coarsen import AssignmentMap, MeshPyramid, assignment_map, build_pyramid, coarsen_to
from .deform import (
    HierarchicalRep,
    PartTransforms,
    SkinningWeights,
    concat_representation,
    hierarchical_pose,
    joint_positions,
    lbs_apply,
    rotation_matrix,
)
from .mesh import MotionSequence, TriMesh, adjacency, bbox_diagonal, load_obj, save_obj
from .retarget import RetargetModel, init_model, retarget_full, retarget_level
from .runtime import EvalReport, TrainConfig, evaluate, pmd, run_ablation, train
from .synth import CharacterStyle, make_character, make_dataset, pose_character

__version__ = "0.1.0"

__all__ = [
    "AssignmentMap",
    "CharacterStyle",
    "EvalReport",
    "HierarchicalRep",
    "MeshPyramid",
    "MotionSequence",
    "PartTransforms",
    "RetargetModel",
    "SkinningWeights",
    "TrainConfig",
    "TriMesh",
    "adjacency",
    "assignment_map",
    "bbox_diagonal",
    "build_pyramid",
    "coarsen_to",
    "concat_representation",
    "evaluate",
    "hierarchical_pose",
    "init_model",
    "joint_positions",
    "lbs_apply",
    "load_obj",
    "make_character",
    "make_dataset",
    "pmd",
    "pose_character",
    "retarget_full",
    "retarget_level",
    "rotation_matrix",
    "run_ablation",
    "save_obj",
    "train",
]
