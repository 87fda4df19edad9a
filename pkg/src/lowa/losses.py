"""Box regression and classification losses under a bipartite assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import tensor_giou
from .matching import MatchWeights, build_cost_matrix, hungarian_assign


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    match_weights: MatchWeights = field(default_factory=MatchWeights)
    loss_weights: MatchWeights = field(default_factory=MatchWeights)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"focal alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be non-negative, got {self.gamma}")


@dataclass
class MatchingLossValue:
    l1: T.Tensor
    giou: T.Tensor
    focal: T.Tensor
    total: T.Tensor
    num_matched: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k).item() for k in ("l1", "giou", "focal", "total")}


def _zero() -> T.Tensor:
    return T.Tensor(0.0)


def _weighted(t: T.Tensor, w: float) -> T.Tensor:
    return t if w == 1.0 else T.scale(t, w)


def l1_box_loss(pred: T.Tensor, target) -> T.Tensor:
    """Mean over matched pairs of the summed absolute coordinate differences."""
    target = T._lift(target)
    if pred.shape[0] == 0:
        return _zero()
    diff = T.abs_(pred - target)
    return T.scale(T.sum_(diff), 1.0 / pred.shape[0])


def giou_box_loss(pred: T.Tensor, target) -> T.Tensor:
    target = T._lift(target)
    if pred.shape[0] == 0:
        return _zero()
    g = tensor_giou(pred, target)
    return T.scale(T.sum_(1.0 - g), 1.0 / pred.shape[0])


def focal_terms(logits: T.Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> T.Tensor:
    """Un-reduced sigmoid focal loss, one value per cell."""
    if not 0.0 <= alpha <= 1.0 or gamma < 0:
        raise ValueError(f"invalid focal parameters alpha={alpha}, gamma={gamma}")
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    log_p = T.log_sigmoid(logits)
    log_q = T.log_sigmoid(-logits)
    if gamma == 0:
        pos, neg = log_p, log_q
    else:
        pos = T.power(T.sigmoid(-logits), gamma) * log_p
        neg = T.power(T.sigmoid(logits), gamma) * log_q
    return T.scale(T.mul(pos, alpha * t) + T.mul(neg, (1.0 - alpha) * (1.0 - t)), -1.0)


def focal_loss(logits: T.Tensor, targets, alpha: float = 0.25, gamma: float = 2.0,
               num_matched: int | None = None) -> T.Tensor:
    """Cell sum of the focal loss divided by ``max(1, matched proposals)``.

    Matched proposals are the rows of ``targets`` holding at least one 1
    unless ``num_matched`` is given.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    if num_matched is None:
        num_matched = int((t.sum(axis=1) > 0).sum()) if t.size else 0
    if logits.size == 0:
        return _zero()
    return T.scale(T.sum_(focal_terms(logits, t, alpha, gamma)), 1.0 / max(1, num_matched))


def positive_lists(instance_ids, queries) -> list:
    """For each target id, the indices of queries that are positive for it."""
    return [[q for q, query in enumerate(queries) if tid in query.positive_for] for tid in instance_ids]


def assign(outputs, targets, queries, cfg: LossConfig):
    """Hungarian assignment on detached outputs; returns (assignment, positive lists)."""
    pos = positive_lists([t.id for t in targets], queries)
    boxes = np.array([t.box for t in targets], dtype=np.float64).reshape(-1, 4)
    cost = build_cost_matrix(outputs.boxes.data, outputs.logits.data, boxes, pos, cfg.match_weights)
    return hungarian_assign(cost), pos


def batch_matching_loss(outputs_list, targets_list, queries_list, cfg: LossConfig | None = None) -> MatchingLossValue:
    """Matching loss pooled over a batch.

    Box terms average over all matched pairs in the batch; the focal cell sum
    of every image is divided by the total matched count.  Components are
    reported after ``cfg.loss_weights`` is applied, so ``total`` is always
    their plain sum.
    """
    cfg = cfg or LossConfig()
    pred_rows, tgt_rows, focal_sums = [], [], []
    matched = 0
    for outputs, targets, queries in zip(outputs_list, targets_list, queries_list):
        P, Q = outputs.logits.shape
        cls_target = np.zeros((P, Q))
        if targets:
            assignment, pos = assign(outputs, targets, queries, cfg)
            if assignment.pairs:
                props, tidx = assignment.proposals, assignment.targets
                pred_rows.append(T.gather_rows(outputs.boxes, props))
                tgt_rows.append(np.array([targets[j].box for j in tidx], dtype=np.float64))
                for p, j in assignment.pairs:
                    cls_target[p, pos[j]] = 1.0
                matched += len(props)
        if Q:
            focal_sums.append(T.sum_(focal_terms(outputs.logits, cls_target, cfg.alpha, cfg.gamma)))
    if pred_rows:
        pred = pred_rows[0] if len(pred_rows) == 1 else T.concat(pred_rows, axis=0)
        tgt = np.concatenate(tgt_rows, axis=0)
        l1 = _weighted(l1_box_loss(pred, tgt), cfg.loss_weights.l1)
        giou = _weighted(giou_box_loss(pred, tgt), cfg.loss_weights.giou)
    else:
        l1, giou = _zero(), _zero()
    if focal_sums:
        acc = focal_sums[0]
        for s in focal_sums[1:]:
            acc = acc + s
        focal = T.scale(acc, cfg.loss_weights.cls / max(1, matched))
    else:
        focal = _zero()
    total = l1 + giou + focal
    return MatchingLossValue(l1, giou, focal, total, matched)


def matching_loss(outputs, targets, queries, cfg: LossConfig | None = None) -> MatchingLossValue:
    """L1 + GIoU + focal for one image under the optimal assignment."""
    if len(queries) == 0:
        raise ValueError("matching_loss needs a non-empty query set")
    return batch_matching_loss([outputs], [targets], [queries], cfg)
