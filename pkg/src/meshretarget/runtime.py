"""Training loop, evaluation protocols (rec/ret/cyc with PMD), ablation
variants, and run persistence."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import losses, nn, retarget
from .coarsen import build_pyramid, candidate_pairs
from .mesh import TriMesh, bbox_diagonal
from .synth import Dataset, fk_transforms


class TrainingAbort(RuntimeError):
    """Raised when a loss term goes non-finite."""

    def __init__(self, epoch: int, term: str):
        super().__init__(f"non-finite {term} loss at epoch {epoch}")
        self.epoch = epoch
        self.term = term


@dataclasses.dataclass
class TrainConfig:
    """Training/evaluation settings. Defaults: two resolution layers at
    coarsening ratio 0.6, 40 parts per layer, 128-wide embeddings, and a
    coarse-level loss weight sliding 0.6 -> 0.4 over the run."""

    levels: int = 1
    ratio: float = 0.6
    parts: int = 40
    embed_dim: int = 128
    alpha: tuple = (0.6,)
    beta: tuple = (0.4,)
    epochs: int = 400
    learning_rate: float = 1e-3
    seed: int = 0
    skin_coef: float = 0.1
    rigid_coef: float = 0.01
    cycle_coef: float = 1.0
    no_hr: bool = False
    no_ref: bool = False
    no_var: bool = False
    stop_rec: float | None = None
    stop_ret: float | None = None
    check_every: int = 25

    def __post_init__(self):
        self.alpha = tuple(self.alpha)
        self.beta = tuple(self.beta)
        if len(self.alpha) != self.levels or len(self.beta) != self.levels:
            raise ValueError("alpha/beta need one entry per coarse level")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must be in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def loss_weights(self) -> losses.LossWeights:
        alpha, beta = self.alpha, self.beta
        if self.no_var:
            # Fixed coarse weight: both endpoints pinned to the end value.
            alpha = self.beta
        return losses.LossWeights(
            alpha,
            beta,
            max(1, self.epochs),
            skin_coef=self.skin_coef,
            rigid_coef=self.rigid_coef,
            cycle_coef=self.cycle_coef,
        )

    def meta(self) -> dict:
        return {
            "levels": str(self.levels),
            "ratio": repr(self.ratio),
            "parts": str(self.parts),
            "embed_dim": str(self.embed_dim),
        }


@dataclasses.dataclass
class PreparedCharacter:
    """A character lifted into normalized training space, with its pyramid,
    aggregation operators, edge sets, and ground truth per level."""

    index: int
    center: np.ndarray
    scale: float
    pyramid: object
    inputs: retarget.CharacterInputs
    edges: list
    gt_weights: list
    gt_parts6: dict
    pose_levels: dict

    def normalize(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def denormalize(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def prepare_characters(dataset: Dataset, config: TrainConfig) -> list:
    """Normalize every character to a unit bbox diagonal, build its pyramid,
    and precompute per-level ground truth (pose meshes, lifted reference
    skinning, matched reference part motions)."""
    prepared = []
    for c, character in enumerate(dataset.characters):
        verts = character.rest.vertices
        low, high = verts.min(axis=0), verts.max(axis=0)
        center = 0.5 * (low + high)
        scale = 1.0 / bbox_diagonal(character.rest)
        rest_norm = TriMesh((verts - center) * scale, character.rest.faces)
        pyramid = build_pyramid(rest_norm, config.ratio, config.levels)
        inputs = retarget.CharacterInputs.from_pyramid(pyramid, key=c)
        edges = [candidate_pairs(level, 0.0) for level in pyramid.levels]

        gt_weights = [character.gt_skinning.matrix]
        for amap in pyramid.down_maps:
            gt_weights.append(gt_weights[-1] @ amap.matrix.T.toarray())

        gt_parts6 = {}
        pose_levels = {}
        for p in range(dataset.n_poses):
            posed = (dataset.posed[(c, p)] - center) * scale
            pose_levels[p] = pyramid.map_down(posed)
            parts = fk_transforms(character.skeleton, dataset.poses[p])
            positions = (parts.positions - center) * scale
            gt_parts6[p] = np.concatenate([positions, parts.rotations], axis=1)
        prepared.append(
            PreparedCharacter(
                c, center, scale, pyramid, inputs, edges, gt_weights, gt_parts6, pose_levels
            )
        )
    return prepared


def training_triples(n_characters: int, train_pose_ids) -> list:
    """Fixed full-batch sample list: the ordered character pairs rotate
    across the pose bank, plus one self-pair per character."""
    if n_characters == 1:
        pairs = [(0, 0)]
    else:
        pairs = [(s, t) for s in range(n_characters) for t in range(n_characters) if s != t]
    triples = [(pairs[i % len(pairs)][0], pairs[i % len(pairs)][1], p) for i, p in enumerate(train_pose_ids)]
    for c in range(n_characters):
        triples.append((c, c, train_pose_ids[c % len(train_pose_ids)]))
    return triples


def pmd(pred, gt) -> float:
    """Point-wise mesh euclidean distance: mean distance between
    corresponding vertices."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"vertex counts differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def _triple_loss(model, config, weights_cfg, prepared, s, t, p, epoch, cache):
    """Forward one (source, target, pose) sample and assemble its loss."""
    src, dst = prepared[s], prepared[t]
    result = retarget.full_forward(
        model,
        src.pose_levels[p],
        src.inputs,
        dst.inputs,
        cache=cache,
        lowest_only=config.no_hr,
        no_refine=config.no_ref,
    )
    top = config.levels
    active = [top] if config.no_hr else list(range(top + 1))
    ret_terms = {}
    for k in active:
        out = result.outputs[k]
        lvl = result.level_outputs[k]
        matched = losses.match_gt_joints(lvl.weights_target.data, dst.gt_weights[k])
        gt6 = dst.gt_parts6[p][matched]
        ret_terms[k] = losses.layer_retarget_loss(
            dst.pose_levels[p][k], out, gt6, lvl.transforms6()
        )
    weights_s = [result.level_outputs[k].weights_source for k in active]
    weights_t = [result.level_outputs[k].weights_target for k in active]
    gt_s = [src.gt_weights[k] for k in active]
    gt_t = [dst.gt_weights[k] for k in active]
    up_s = [src.pyramid.up_maps[k] for k in active[:-1]]
    up_t = [dst.pyramid.up_maps[k] for k in active[:-1]]
    sk = losses.skinning_similarity_loss(weights_s, weights_t, up_s, up_t, gt_s, gt_t)
    rig = None
    for k in active:
        term = losses.rigid_loss(result.outputs[k], dst.pyramid.levels[k].vertices, dst.edges[k])
        rig = term if rig is None else nn.add(rig, term)
    if config.no_hr:
        total = nn.add(ret_terms[top], nn.add(nn.mul(sk, weights_cfg.skin_coef), nn.mul(rig, weights_cfg.rigid_coef)))
    else:
        total = losses.total_loss(
            [ret_terms[k] for k in range(top + 1)], sk, rig, None, weights_cfg, epoch
        )
    logs = {f"ret{k}": float(ret_terms[k].data) for k in active}
    logs["sk"] = float(sk.data)
    logs["rig"] = float(rig.data)
    return total, logs


def _cycle_term(model, config, prepared, pair, pose_id, cache):
    a, b = pair

    def fn(pose_levels, src, dst):
        res = retarget.full_forward(
            model, pose_levels, src.inputs, dst.inputs, cache=cache,
            lowest_only=config.no_hr, no_refine=config.no_ref,
        )
        top = config.levels
        return [res.outputs[top]] if config.no_hr else res.outputs

    top = config.levels
    pose_a = prepared[a].pose_levels[pose_id]
    pose_b = prepared[b].pose_levels[pose_id]
    if config.no_hr:
        pose_a, pose_b = [pose_a[top]], [pose_b[top]]
    return losses.cycle_loss(fn, (prepared[a], pose_a), (prepared[b], pose_b))


@dataclasses.dataclass
class TrainResult:
    model: retarget.RetargetModel
    history: list
    stopped_epoch: int


def train(config: TrainConfig, dataset: Dataset, prepared=None) -> TrainResult:
    """Full-batch training to ``config.epochs``, deterministic in the seed.

    Paired triples carry retargeting, skinning-similarity and rigidity
    losses; character pairs the dataset marks unpaired add the cycle term.
    Aborts with TrainingAbort if any logged term goes non-finite.
    """
    model = retarget.init_model(config.levels, config.parts, config.embed_dim, config.seed)
    params = model.named_parameters()
    state = nn.adam_init(params)
    if prepared is None:
        prepared = prepare_characters(dataset, config)
    triples = training_triples(dataset.n_characters, dataset.train_pose_ids)
    weights_cfg = config.loss_weights()
    history = []
    stopped = config.epochs
    for epoch in range(config.epochs):
        nn.zero_grads(params)
        cache: dict = {}
        sums: dict[str, float] = {}
        n_units = len(triples) + len(dataset.unpaired_pairs)
        for s, t, p in triples:
            loss, logs = _triple_loss(model, config, weights_cfg, prepared, s, t, p, epoch, cache)
            scaled = nn.mul(loss, 1.0 / n_units)
            nn.backward(scaled)
            for key, value in logs.items():
                sums[key] = sums.get(key, 0.0) + value / len(triples)
            sums["total"] = sums.get("total", 0.0) + float(loss.data) / n_units
        for pair in dataset.unpaired_pairs:
            pose_id = dataset.train_pose_ids[epoch % len(dataset.train_pose_ids)]
            cyc = _cycle_term(model, config, prepared, pair, pose_id, cache)
            scaled = nn.mul(cyc, weights_cfg.cycle_coef / n_units)
            nn.backward(scaled)
            sums["cyc"] = sums.get("cyc", 0.0) + float(cyc.data) / len(dataset.unpaired_pairs)
            sums["total"] = sums.get("total", 0.0) + float(scaled.data)
        for term, value in sums.items():
            if not np.isfinite(value):
                raise TrainingAbort(epoch, term)
        grads = {name: p.grad for name, p in params.items()}
        nn.adam_step(params, grads, state, config.learning_rate)
        row = {"epoch": epoch}
        if not config.no_hr:
            for k, w in enumerate(weights_cfg.level_weights(epoch), start=1):
                row[f"w{k}"] = w
        row.update(sums)
        history.append(row)
        if (
            config.stop_rec is not None
            and config.stop_ret is not None
            and (epoch + 1) % config.check_every == 0
        ):
            report = evaluate_protocols(model, dataset, ("rec", "ret"), config, prepared)
            if (
                report.protocols["rec"].mean_pmd <= config.stop_rec
                and report.protocols["ret"].mean_pmd <= config.stop_ret
            ):
                stopped = epoch + 1
                break
    return TrainResult(model, history, stopped)


@dataclasses.dataclass
class ProtocolResult:
    mean_pmd: float
    per_level: dict
    per_sample: list


@dataclasses.dataclass
class EvalReport:
    protocols: dict
    n_samples: int
    seconds: float

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("protocol,level,pmd\n")
            for name, result in self.protocols.items():
                fh.write(f"{name},final,{result.mean_pmd:.9g}\n")
                for level, value in sorted(result.per_level.items()):
                    fh.write(f"{name},{level},{value:.9g}\n")

    def render(self) -> str:
        lines = [f"samples: {self.n_samples}   runtime: {self.seconds:.2f}s"]
        for name, result in self.protocols.items():
            levels = "  ".join(f"L{k}={v:.5f}" for k, v in sorted(result.per_level.items()))
            lines.append(f"{name}: PMD {result.mean_pmd:.6f}   ({levels})")
        return "\n".join(lines)


def _eval_samples(dataset: Dataset, protocol: str):
    chars = range(dataset.n_characters)
    if protocol == "rec":
        return [(c, c, p) for c in chars for p in dataset.test_pose_ids]
    pairs = [(s, t) for s in chars for t in chars if s != t]
    if not pairs:
        raise ValueError(f"protocol {protocol!r} needs at least two characters")
    return [(s, t, p) for s, t in pairs for p in dataset.test_pose_ids]


def evaluate_protocols(model, dataset, protocols, config: TrainConfig, prepared=None) -> EvalReport:
    """PMD evaluation on the test split. rec: self-retargeting against the
    ground-truth pose; ret: cross-character against the paired ground truth;
    cyc: there-and-back against the source pose."""
    if prepared is None:
        prepared = prepare_characters(dataset, config)
    start = time.perf_counter()
    top = config.levels
    active = [top] if config.no_hr else list(range(top + 1))
    results = {}
    n_total = 0
    with nn.no_grad():
        for protocol in protocols:
            if protocol not in ("rec", "ret", "cyc"):
                raise ValueError(f"unknown protocol {protocol!r}")
            samples = _eval_samples(dataset, protocol)
            n_total += len(samples)
            per_level_acc = {k: [] for k in active}
            per_sample = []
            cache: dict = {}
            for s, t, p in samples:
                src, dst = prepared[s], prepared[t]
                first = retarget.full_forward(
                    model, src.pose_levels[p], src.inputs, dst.inputs, cache=cache,
                    lowest_only=config.no_hr, no_refine=config.no_ref,
                )
                if protocol == "cyc":
                    transferred = [
                        first.outputs[k].data if first.outputs[k] is not None else None
                        for k in range(top + 1)
                    ]
                    if config.no_hr:
                        pose_back = [None] * (top + 1)
                        pose_back[top] = transferred[top]
                    else:
                        pose_back = transferred
                    second = retarget.full_forward(
                        model, pose_back, dst.inputs, src.inputs, cache=cache,
                        lowest_only=config.no_hr, no_refine=config.no_ref,
                    )
                    reference = src.pose_levels[p]
                    outputs = second.outputs
                else:
                    reference = dst.pose_levels[p]
                    outputs = first.outputs
                values = {k: pmd(outputs[k].data, reference[k]) for k in active}
                for k, v in values.items():
                    per_level_acc[k].append(v)
                per_sample.append(values[min(active)])
            per_level = {k: float(np.mean(vs)) for k, vs in per_level_acc.items()}
            results[protocol] = ProtocolResult(per_level[min(active)], per_level, per_sample)
    return EvalReport(results, n_total, time.perf_counter() - start)


def evaluate(model, dataset, protocol: str, config: TrainConfig, prepared=None) -> EvalReport:
    return evaluate_protocols(model, dataset, (protocol,), config, prepared)


ABLATION_VARIANTS = ("full", "no_hr", "no_ref", "no_var")


def run_ablation(config: TrainConfig, dataset: Dataset, variant: str):
    """Train one ablation variant and evaluate all protocols on the test
    split. Returns (EvalReport, TrainResult)."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; pick one of {ABLATION_VARIANTS}")
    flags = {name: (variant == name) for name in ("no_hr", "no_ref", "no_var")}
    variant_config = dataclasses.replace(config, **flags)
    result = train(variant_config, dataset)
    report = evaluate_protocols(result.model, dataset, ("rec", "ret", "cyc"), variant_config)
    return report, result


# ---------------------------------------------------------------------------
# Run persistence


def save_history_csv(history, path) -> None:
    columns = ["epoch"]
    for row in history:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in history:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def save_model(path, model, config: TrainConfig) -> None:
    nn.save_checkpoint(path, model.named_parameters(), meta=config.meta())


def load_model(path):
    """Rebuild a model from a checkpoint. Returns (model, meta)."""
    arrays, meta = nn.load_checkpoint(path)
    try:
        levels = int(meta["levels"])
        parts = int(meta["parts"])
        embed_dim = int(meta["embed_dim"])
    except KeyError as exc:
        raise nn.CheckpointError(f"checkpoint is missing required meta key {exc}") from None
    model = retarget.init_model(levels, parts, embed_dim, seed=0)
    nn.restore_params(model.named_parameters(), arrays)
    return model, meta
