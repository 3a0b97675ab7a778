"""Command-line entry point: coarsening, round-trip checks, synthetic data,
training, retargeting, and evaluation.

Exit codes: 0 success, 2 argument/config/parse error, 3 infeasible
coarsening target, 4 checkpoint mismatch, 5 training aborted on a
non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import nn, retarget, runtime, synth
from .coarsen import InfeasibleTargetError, build_pyramid
from .mesh import MeshError, TriMesh, bbox_diagonal, load_obj, save_obj

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_CHECKPOINT = 4
EXIT_NAN = 5


def _ratio(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"ratio must be in (0, 1), got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshretarget",
        description="Skeleton-free pose and motion retargeting through hierarchical mesh coarsening.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coarsen", help="build a mesh pyramid and write per-level OBJs and maps")
    p.add_argument("--in", dest="input", required=True, help="input OBJ mesh")
    p.add_argument("--ratio", type=_ratio, default=0.6, help="per-level vertex ratio (default 0.6)")
    p.add_argument("--levels", type=_positive_int, default=1, help="coarsening steps (default 1)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("roundtrip", help="coarsen then up-sample, reporting the reconstruction error")
    p.add_argument("--in", dest="input", required=True, help="input OBJ mesh")
    p.add_argument("--ratio", type=_ratio, default=0.6, help="per-level vertex ratio (default 0.6)")
    p.add_argument("--levels", type=_positive_int, default=1, help="coarsening steps (default 1)")

    p = sub.add_parser("synth", help="generate a paired synthetic character dataset")
    p.add_argument("--characters", type=int, default=4, help="number of characters (default 4)")
    p.add_argument("--poses", type=int, default=20, help="number of poses (default 20)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--budget", type=int, default=500, help="per-character vertex budget (default 500)")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a retargeting model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory written by `synth`")
    p.add_argument("--out", required=True, help="run directory for ckpt.txt and loss.csv")
    p.add_argument("--config", default=None, help="optional key=value config file")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 400)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3)")
    p.add_argument("--ratio", type=_ratio, default=None, help="coarsening ratio (default 0.6)")
    p.add_argument("--levels", type=_positive_int, default=None, help="pyramid depth (default 1)")
    p.add_argument(
        "--variant",
        choices=runtime.ABLATION_VARIANTS,
        default="full",
        help="ablation variant to train (default full)",
    )

    p = sub.add_parser("retarget", help="retarget pose OBJs onto a target character")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
    p.add_argument("--source-rest", required=True, help="source character rest OBJ")
    p.add_argument("--source-pose", required=True, nargs="+", help="one or more source pose OBJs")
    p.add_argument("--target-rest", required=True, help="target character rest OBJ")
    p.add_argument("--ratio", type=_ratio, default=None, help="coarsening ratio (default: checkpoint)")
    p.add_argument("--out", required=True, help="output directory for target pose OBJs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory written by `synth`")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
    p.add_argument("--protocol", choices=("rec", "ret", "cyc"), required=True)
    p.add_argument("--ratio", type=_ratio, default=None, help="coarsening ratio (default: checkpoint)")
    p.add_argument("--out", default=None, help="optional CSV report path")
    return parser


def _read_config_file(path) -> dict:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MeshError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


_CONFIG_FIELD_TYPES = {
    "levels": int,
    "ratio": float,
    "parts": int,
    "embed_dim": int,
    "epochs": int,
    "learning_rate": float,
    "seed": int,
    "skin_coef": float,
    "rigid_coef": float,
    "cycle_coef": float,
}


def _train_config(args) -> runtime.TrainConfig:
    """Precedence: explicit flags > config file > defaults."""
    settings: dict = {}
    if args.config:
        for key, raw in _read_config_file(args.config).items():
            if key not in _CONFIG_FIELD_TYPES:
                raise MeshError(f"unknown config key {key!r}")
            settings[key] = _CONFIG_FIELD_TYPES[key](raw)
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("lr", "learning_rate"),
                      ("ratio", "ratio"), ("levels", "levels")):
        value = getattr(args, flag)
        if value is not None:
            settings[key] = value
    if "levels" in settings:
        k = settings["levels"]
        settings.setdefault("alpha", tuple([0.6 / max(1, k)] * k))
        settings.setdefault("beta", tuple([0.4 / max(1, k)] * k))
    return runtime.TrainConfig(**settings)


def cmd_coarsen(args) -> int:
    mesh = load_obj(args.input)
    pyramid = build_pyramid(mesh, args.ratio, args.levels)
    os.makedirs(args.out, exist_ok=True)
    for k, level in enumerate(pyramid.levels):
        save_obj(level, os.path.join(args.out, f"level_{k}.obj"))
        print(f"level {k}: {level.n_vertices} vertices, {level.n_faces} faces")
    for k, (down, up) in enumerate(zip(pyramid.down_maps, pyramid.up_maps)):
        down.save(os.path.join(args.out, f"assign_down_{k}.txt"))
        up.save(os.path.join(args.out, f"assign_up_{k}.txt"))
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    mesh = load_obj(args.input)
    pyramid = build_pyramid(mesh, args.ratio, args.levels)
    recovered = pyramid.lift_to_top(pyramid.levels[-1].vertices)
    errors = np.linalg.norm(recovered - mesh.vertices, axis=1)
    diag = bbox_diagonal(mesh)
    print(f"levels: {args.levels}  coarsest: {pyramid.levels[-1].n_vertices} vertices")
    print(f"mean error: {errors.mean() / diag:.6f} of bbox diagonal")
    print(f"max error:  {errors.max() / diag:.6f} of bbox diagonal")
    return EXIT_OK


def cmd_synth(args) -> int:
    dataset = synth.make_dataset(args.characters, args.poses, args.seed, vertex_budget=args.budget)
    synth.save_dataset(dataset, args.out)
    print(
        f"wrote {dataset.n_characters} characters x {dataset.n_poses} poses to {args.out} "
        f"(train poses {len(dataset.train_pose_ids)}, test poses {len(dataset.test_pose_ids)})"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = synth.load_dataset(args.data)
    config = _train_config(args)
    if args.variant != "full":
        config = dataclasses.replace(config, **{args.variant: True})
    result = runtime.train(config, dataset)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "ckpt.txt")
    runtime.save_model(ckpt_path, result.model, config)
    runtime.save_history_csv(result.history, os.path.join(args.out, "loss.csv"))
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        for key, caster in _CONFIG_FIELD_TYPES.items():
            fh.write(f"{key}={getattr(config, key)}\n")
    final = result.history[-1]["total"] if result.history else float("nan")
    print(f"trained {result.stopped_epoch} epochs; final total loss {final:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _pyramids_for(mesh: TriMesh, ratio: float, levels: int):
    low, high = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = 0.5 * (low + high)
    scale = 1.0 / bbox_diagonal(mesh)
    normalized = TriMesh((mesh.vertices - center) * scale, mesh.faces)
    return build_pyramid(normalized, ratio, levels), center, scale


def cmd_retarget(args) -> int:
    model, meta = runtime.load_model(args.checkpoint)
    levels = int(meta["levels"])
    ratio = args.ratio if args.ratio is not None else float(meta.get("ratio", 0.6))
    source_rest = load_obj(args.source_rest)
    target_rest = load_obj(args.target_rest)
    src_pyr, src_center, src_scale = _pyramids_for(source_rest, ratio, levels)
    dst_pyr, dst_center, dst_scale = _pyramids_for(target_rest, ratio, levels)
    os.makedirs(args.out, exist_ok=True)
    with nn.no_grad():
        for pose_path in args.source_pose:
            pose = load_obj(pose_path)
            if pose.n_vertices != source_rest.n_vertices:
                raise MeshError(
                    f"{pose_path}: pose has {pose.n_vertices} vertices, rest has {source_rest.n_vertices}"
                )
            pose_pyr = src_pyr.reposed((pose.vertices - src_center) * src_scale)
            result = retarget.retarget_full(pose_pyr, src_pyr, dst_pyr, model)
            out_positions = result.final_positions / dst_scale + dst_center
            name = os.path.splitext(os.path.basename(pose_path))[0]
            out_path = os.path.join(args.out, f"{name}_retargeted.obj")
            save_obj(TriMesh(out_positions, target_rest.faces), out_path)
            print(f"wrote {out_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = synth.load_dataset(args.data)
    model, meta = runtime.load_model(args.checkpoint)
    levels = int(meta["levels"])
    ratio = args.ratio if args.ratio is not None else float(meta.get("ratio", 0.6))
    k = levels
    config = runtime.TrainConfig(
        levels=levels,
        ratio=ratio,
        parts=int(meta["parts"]),
        embed_dim=int(meta["embed_dim"]),
        alpha=tuple([0.6 / max(1, k)] * k),
        beta=tuple([0.4 / max(1, k)] * k),
    )
    report = runtime.evaluate(model, dataset, args.protocol, config)
    print(report.render())
    if args.out:
        report.to_csv(args.out)
        print(f"report: {args.out}")
    return EXIT_OK


_HANDLERS = {
    "coarsen": cmd_coarsen,
    "roundtrip": cmd_roundtrip,
    "synth": cmd_synth,
    "train": cmd_train,
    "retarget": cmd_retarget,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except InfeasibleTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except nn.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except runtime.TrainingAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (MeshError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
