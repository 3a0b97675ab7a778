"""Training objectives: per-level retargeting, skinning similarity, rigidity,
cycle consistency, and the epoch-varying weight schedule."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import nn

KL_FLOOR = 1e-12
# Keeps p * log(p) finite at p == 0 without changing any nonzero term.
_P_TINY = 1e-300


def schedule_weight(alpha: float, beta: float, epoch: float, epoch_max: float) -> float:
    """Linear interpolation from alpha (epoch 0) to beta (epoch_max)."""
    if epoch_max <= 0:
        raise ValueError("epoch_max must be positive")
    if not 0 <= epoch <= epoch_max:
        raise ValueError(f"epoch {epoch} outside [0, {epoch_max}]")
    return float(alpha + (epoch / epoch_max) * (beta - alpha))


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Per-level (alpha, beta) schedule endpoints for the coarse-level
    retargeting terms, plus fixed coefficients for the auxiliary terms.

    The scheduled weights must sum below 1 at every epoch so the finest
    level always keeps positive weight.
    """

    alpha: tuple
    beta: tuple
    epoch_max: int
    skin_coef: float = 0.1
    rigid_coef: float = 0.01
    cycle_coef: float = 1.0

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        beta = tuple(float(b) for b in self.beta)
        if len(alpha) != len(beta):
            raise ValueError("alpha and beta must pair up per level")
        for value in alpha + beta:
            if not 0.0 <= value <= 1.0:
                raise ValueError("schedule endpoints must lie in [0, 1]")
        # The schedule is linear in the epoch, so the endpoints bound it.
        if sum(alpha) >= 1.0 or sum(beta) >= 1.0:
            raise ValueError("scheduled weights must sum below 1 at every epoch")
        if self.epoch_max < 1:
            raise ValueError("epoch_max must be at least 1")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def n_coarse_levels(self) -> int:
        return len(self.alpha)

    def level_weights(self, epoch: float) -> list:
        """Weights for levels 1..K at this epoch."""
        return [schedule_weight(a, b, epoch, self.epoch_max) for a, b in zip(self.alpha, self.beta)]


def layer_retarget_loss(v_gt, v_pred, j_gt, j_pred) -> nn.Tensor:
    """Mean absolute error on vertices plus mean absolute error on the 6D
    part transforms."""
    v_term = nn.mean(nn.absolute(nn.sub(nn.as_tensor(v_pred), nn.as_tensor(v_gt))))
    j_term = nn.mean(nn.absolute(nn.sub(nn.as_tensor(j_pred), nn.as_tensor(j_gt))))
    return nn.add(v_term, j_term)


def _validate_distribution(name: str, values: np.ndarray) -> None:
    if values.min() < -1e-9:
        raise ValueError(f"{name} has negative entries")
    if abs(values.sum() - 1.0) > 1e-6:
        raise ValueError(f"{name} does not sum to 1")


def kl_div(p, q) -> nn.Tensor:
    """Kullback-Leibler divergence between two distributions, with q floored
    at 1e-12 and the p log p convention 0 * log 0 = 0."""
    p = nn.as_tensor(p)
    q = nn.as_tensor(q)
    _validate_distribution("p", p.data)
    _validate_distribution("q", q.data)
    log_ratio = nn.sub(nn.log(nn.maximum_const(p, _P_TINY)), nn.log(nn.maximum_const(q, KL_FLOOR)))
    return nn.sum_(nn.mul(p, log_ratio))


def _rows_normalized(weights: nn.Tensor) -> nn.Tensor:
    return nn.div(weights, nn.sum_(weights, axis=1, keepdims=True))


def _row_kl(p_rows: nn.Tensor, q_rows: nn.Tensor) -> nn.Tensor:
    """KL between per-part vertex distributions (rows are normalized first;
    both matrices must share the vertex axis), averaged over parts so the
    scale stays comparable across part counts and resolutions."""
    p = _rows_normalized(p_rows)
    q = _rows_normalized(q_rows)
    log_ratio = nn.sub(nn.log(nn.maximum_const(p, _P_TINY)), nn.log(nn.maximum_const(q, KL_FLOOR)))
    return nn.mul(nn.sum_(nn.mul(p, log_ratio)), 1.0 / p.shape[0])


def _part_mass_kl(p_weights: nn.Tensor, q_weights: nn.Tensor) -> nn.Tensor:
    """KL between the two characters' part-mass distributions (over parts).

    Used when the characters' vertex counts differ, where per-part vertex
    distributions live on different supports.
    """
    p_mass = nn.sum_(p_weights, axis=1)
    q_mass = nn.sum_(q_weights, axis=1)
    p = nn.div(p_mass, nn.sum_(p_mass))
    q = nn.div(q_mass, nn.sum_(q_mass))
    log_ratio = nn.sub(nn.log(nn.maximum_const(p, _P_TINY)), nn.log(nn.maximum_const(q, KL_FLOOR)))
    return nn.sum_(nn.mul(p, log_ratio))


def match_gt_joints(w_pred, w_gt) -> np.ndarray:
    """For each predicted part, the reference joint whose vertex distribution
    it is closest to in KL; many parts may share one joint."""
    p = np.asarray(w_pred.data if isinstance(w_pred, nn.Tensor) else w_pred, dtype=np.float64)
    q = np.asarray(w_gt.data if isinstance(w_gt, nn.Tensor) else w_gt, dtype=np.float64)
    p = p / p.sum(axis=1, keepdims=True)
    q = q / q.sum(axis=1, keepdims=True)
    q = np.maximum(q, KL_FLOOR)
    plogp = np.where(p > 0.0, p * np.log(np.maximum(p, _P_TINY)), 0.0).sum(axis=1)
    cross = p @ np.log(q).T
    kl = plogp[:, None] - cross
    return kl.argmin(axis=1)


def skinning_similarity_loss(
    weights_source,
    weights_target,
    up_maps_source,
    up_maps_target,
    gt_source=None,
    gt_target=None,
) -> nn.Tensor:
    """Similarity of part layouts across characters, levels, and references.

    Per level: KL(target parts, source parts) plus, when reference skinnings
    are given, KL of each character's parts against their best-matching
    reference joint. Between consecutive levels (per character): KL of the
    coarser level's parts against the finer level's parts carried through
    the up map. Cross-character terms compare per-part vertex distributions
    when the vertex counts match, and part-mass distributions otherwise.
    """
    n_levels = len(weights_target)
    terms = []
    for k in range(n_levels):
        w_t, w_s = weights_target[k], weights_source[k]
        if w_t.shape[1] == w_s.shape[1]:
            terms.append(_row_kl(w_t, w_s))
        else:
            terms.append(_part_mass_kl(w_t, w_s))
        for w, gt in ((w_s, gt_source), (w_t, gt_target)):
            if gt is None:
                continue
            gt_k = np.asarray(gt[k], dtype=np.float64)
            matched = match_gt_joints(w.data, gt_k)
            gt_rows = gt_k[matched]
            gt_rows = gt_rows / gt_rows.sum(axis=1, keepdims=True)
            terms.append(_row_kl(w, nn.Tensor(gt_rows)))
    for k in range(1, n_levels):
        for weights, up_maps in ((weights_target, up_maps_target), (weights_source, up_maps_source)):
            # Push the finer level's part distributions onto the coarser
            # vertex set through the up map, then compare.
            finer = weights[k - 1]
            lift = up_maps[k - 1].matrix.T.tocsr()
            lifted = nn.transpose(nn.spmm(lift, nn.transpose(finer)))
            terms.append(_row_kl(weights[k], lifted))
    total = terms[0]
    for term in terms[1:]:
        total = nn.add(total, term)
    return total


def rigid_loss(pred_vertices, rest_vertices, neighbor_pairs) -> nn.Tensor:
    """Mean absolute change of neighbor distances between the rest mesh and
    the prediction; zero under any rigid motion."""
    pairs = np.asarray(neighbor_pairs, dtype=np.int64)
    pred = nn.as_tensor(pred_vertices)
    rest = np.asarray(
        rest_vertices.data if isinstance(rest_vertices, nn.Tensor) else rest_vertices,
        dtype=np.float64,
    )
    delta = nn.sub(pred[pairs[:, 0]], pred[pairs[:, 1]])
    # The tiny shim keeps sqrt differentiable if an edge ever collapses.
    pred_len = nn.sqrt(nn.add(nn.sum_(nn.mul(delta, delta), axis=1), 1e-30))
    rest_len = np.linalg.norm(rest[pairs[:, 0]] - rest[pairs[:, 1]], axis=1)
    return nn.mean(nn.absolute(nn.sub(pred_len, nn.Tensor(rest_len))))


def cycle_loss(retarget_fn, sample_a, sample_b) -> nn.Tensor:
    """Round-trip consistency for an unpaired pair, both directions and all
    levels: retarget a pose to the other character and back, and compare to
    the original per level with mean absolute error.

    ``retarget_fn(pose_levels, source, target) -> list of per-level outputs``
    abstracts the model so oracle stubs can stand in. Each sample is
    ``(character, pose_levels)``.
    """
    total = None
    for (char_src, pose_levels), (char_dst, _) in ((sample_a, sample_b), (sample_b, sample_a)):
        transferred = retarget_fn(pose_levels, char_src, char_dst)
        returned = retarget_fn(transferred, char_dst, char_src)
        for original, back in zip(pose_levels, returned):
            term = nn.mean(nn.absolute(nn.sub(nn.as_tensor(back), nn.as_tensor(original))))
            total = term if total is None else nn.add(total, term)
    return total


def total_loss(level_retarget_terms, skin_term, rigid_term, cycle_term, weights: LossWeights, epoch) -> nn.Tensor:
    """Combine per-level retargeting losses under the epoch schedule with the
    fixed-coefficient auxiliary terms.

    ``level_retarget_terms[k]`` is the level-k term (finest first); entries
    beyond level 0 receive their scheduled weight and level 0 takes the
    remainder, so the retargeting weights always sum to 1.
    """
    level_w = weights.level_weights(epoch)
    if len(level_retarget_terms) != len(level_w) + 1:
        raise ValueError("one retargeting term per pyramid level is required")
    total = nn.mul(level_retarget_terms[0], 1.0 - sum(level_w))
    for w, term in zip(level_w, level_retarget_terms[1:]):
        total = nn.add(total, nn.mul(term, w))
    if skin_term is not None:
        total = nn.add(total, nn.mul(skin_term, weights.skin_coef))
    if rigid_term is not None:
        total = nn.add(total, nn.mul(rigid_term, weights.rigid_coef))
    if cycle_term is not None:
        total = nn.add(total, nn.mul(cycle_term, weights.cycle_coef))
    return total
