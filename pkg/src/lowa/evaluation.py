"""Attribute recognition, attribute localisation and detection metrics.

AP is the exact (uninterpolated) mean of the precision at each positive's
rank.  Attributes without a single ground-truth positive are reported but do
not enter any mean.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import pairwise_iou, to_xyxy
from .inference import (
    ImageScores,
    Predictor,
    closed_vocab_from_scores,
    localize_from_scores,
    open_vocab_from_scores,
    select_proposal,
)

AR_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
REFERENCE_OVD_SPLIT = {"novel": 32, "base": 48, "all": 80}


def average_precision(scores, labels) -> float | None:
    """Mean precision at the rank of each positive; ``None`` without positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def _macro(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def attribute_map(scores, ground_truth, attributes: Sequence[str], freq_table=None) -> dict:
    """Per-attribute AP over instances, macro-averaged overall and per frequency split.

    ``scores`` and ``ground_truth`` are ``N x A`` arrays (instances x attributes).
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(ground_truth).astype(bool)
    per_attr = {a: average_precision(scores[:, j], gt[:, j]) for j, a in enumerate(attributes)}
    out = {
        "map_all": _macro(per_attr.values()),
        "per_attribute": per_attr,
        "excluded": sorted(a for a, v in per_attr.items() if v is None),
    }
    if freq_table is not None:
        for name in ("head", "medium", "tail"):
            out[name] = _macro(per_attr[a] for a in attributes if freq_table.split.get(a) == name)
    return out


def top_k_sets(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``N x A`` mask of each row's ``k`` highest scores (ties: lower column)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def mr_f1_at_k(scores, ground_truth, k: int) -> tuple[float | None, float | None]:
    """Macro mean recall and F1 over attributes, using each instance's top-k set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gt = np.asarray(ground_truth).astype(bool)
    pred = top_k_sets(scores, k)
    hits = (pred & gt).sum(axis=0).astype(float)
    n_gt = gt.sum(axis=0)
    n_pred = pred.sum(axis=0)
    recalls, f1s = [], []
    for j in range(gt.shape[1]):
        if n_gt[j] == 0:
            continue
        r = hits[j] / n_gt[j]
        p = hits[j] / n_pred[j] if n_pred[j] else 0.0
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return _macro(recalls), _macro(f1s)


def _greedy_matches(det_boxes, det_scores, gt_boxes, iou_threshold: float) -> int:
    """Number of GT boxes recovered by score-ordered greedy matching."""
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return 0
    iou = pairwise_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in np.argsort(-np.asarray(det_scores), kind="stable"):
        cand = np.where(taken, -1.0, iou[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            taken[g] = True
    return int(taken.sum())


def attribute_localization_ar(detections: Mapping, ground_truth: Mapping, attributes: Sequence[str], k: int = 10,
                              categories: Mapping | None = None,
                              iou_thresholds: Sequence[float] = AR_IOU_THRESHOLDS) -> dict:
    """Average recall of attribute-only queries over IoU thresholds.

    ``detections[image][attr]`` is a list of ``(box_xyxy, score)`` and
    ``ground_truth[image][attr]`` the list of xyxy boxes carrying that attribute.
    Only the ``k`` best detections per (image, attribute) are used.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per_attr = {}
    for a in attributes:
        total = sum(len(g.get(a, ())) for g in ground_truth.values())
        if total == 0:
            per_attr[a] = None
            continue
        recalls = []
        for t in iou_thresholds:
            found = 0
            for img, g in ground_truth.items():
                gts = g.get(a, ())
                if not gts:
                    continue
                dets = sorted(detections.get(img, {}).get(a, ()), key=lambda d: -d[1])[:k]
                boxes = np.array([d[0] for d in dets], dtype=np.float64).reshape(-1, 4)
                scores = np.array([d[1] for d in dets], dtype=np.float64)
                found += _greedy_matches(boxes, scores, np.asarray(gts, dtype=np.float64).reshape(-1, 4), t)
            recalls.append(found / total)
        per_attr[a] = float(np.mean(recalls))
    out = {"mean": _macro(per_attr.values()), "per_attribute": per_attr}
    if categories:
        cats: dict = {}
        for a in attributes:
            cats.setdefault(categories.get(a, "other"), []).append(per_attr[a])
        out["per_category"] = {c: _macro(v) for c, v in sorted(cats.items())}
    return out


def detection_ap(detections: Sequence[tuple], gts: Mapping, iou_threshold: float = 0.5) -> float | None:
    """AP for one class. ``detections``: ``(image, box, score)``; ``gts``: image -> boxes."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][2], i))
    taken = {img: np.zeros(len(v), dtype=bool) for img, v in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img, box, _ = detections[i]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        iou = pairwise_iou(np.asarray(box, dtype=np.float64).reshape(1, 4), np.asarray(g).reshape(-1, 4))[0]
        iou = np.where(taken[img], -1.0, iou)
        j = int(np.argmax(iou))
        if iou[j] >= iou_threshold:
            taken[img][j] = True
            tp[rank] = True
    ranks = np.flatnonzero(tp) + 1
    return float((np.arange(1, len(ranks) + 1) / ranks).sum() / n_gt)


def ovd_ap50(detections: Mapping, ground_truth: Mapping, novel_classes: Sequence[str],
             base_classes: Sequence[str]) -> dict:
    """AP at IoU 0.5 per class; macro-means over novel, base and their union.

    ``detections[cls]`` is a list of ``(image, box_xyxy, score)``;
    ``ground_truth[cls]`` maps image -> list of xyxy boxes.
    """
    novel, base = list(novel_classes), list(base_classes)
    if set(novel) & set(base):
        raise ValueError("novel and base classes overlap")
    per_class = {c: detection_ap(detections.get(c, []), ground_truth.get(c, {}), 0.5) for c in novel + base}
    return {
        "novel": _macro(per_class[c] for c in novel),
        "base": _macro(per_class[c] for c in base),
        "all": _macro(per_class.values()),
        "per_class": per_class,
    }


def minmax_rows(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min(axis=1, keepdims=True) if m.size else m
    span = (m.max(axis=1, keepdims=True) - lo) if m.size else m
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(span > 0, (m - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out


# ---------------------------------------------------------------------------
# end-to-end evaluation over a record set
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    k: int
    map_all: float | None = None
    mr_at_k: float | None = None
    f1_at_k: float | None = None
    head: float | None = None
    medium: float | None = None
    tail: float | None = None
    per_attribute_ap: dict = field(default_factory=dict)
    excluded_attributes: list = field(default_factory=list)
    ar_at_10: float | None = None
    ar_per_category: dict = field(default_factory=dict)
    ar_per_attribute: dict = field(default_factory=dict)
    closed_ap50: float | None = None
    ap50_novel: float | None = None
    ap50_base: float | None = None
    ap50_all: float | None = None
    novel_combo_map: float | None = None
    num_instances: int = 0
    reference_split_sizes: dict = field(default_factory=lambda: dict(REFERENCE_OVD_SPLIT))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def table(self) -> str:
        def pct(v):
            return "   n/a" if v is None else f"{100 * v:6.1f}"
        rows = [
            ("mAP(all)", self.map_all), (f"mR@{self.k}", self.mr_at_k), (f"F1@{self.k}", self.f1_at_k),
            ("Head", self.head), ("Medium", self.medium), ("Tail", self.tail),
            ("AR@10", self.ar_at_10), ("closed AP50", self.closed_ap50),
            ("AP50 novel", self.ap50_novel), ("AP50 base", self.ap50_base), ("AP50 all", self.ap50_all),
            ("novel-combo mAP", self.novel_combo_map),
        ]
        return "\n".join(f"{name:<16}{pct(v)}" for name, v in rows) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["k", "map_all", "mr_at_k", "f1_at_k", "head", "medium", "tail", "ar_at_10",
                 "closed_ap50", "ap50_novel", "ap50_base", "ap50_all", "per_attribute_ap"],
    "properties": {
        "k": {"type": "integer", "minimum": 1},
        **{key: {"type": ["number", "null"], "minimum": 0, "maximum": 1}
           for key in ("map_all", "mr_at_k", "f1_at_k", "head", "medium", "tail", "ar_at_10",
                       "closed_ap50", "ap50_novel", "ap50_base", "ap50_all", "novel_combo_map")},
        "per_attribute_ap": {"type": "object",
                             "additionalProperties": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
    },
}


def evaluate(predictor: Predictor, records, classes: Sequence[str], attributes: Sequence[str], k: int = 8,
             freq_table=None, novel_combos: Sequence[tuple] = (), categories: Mapping | None = None,
             ar_k: int = 10) -> MetricReport:
    """Run the three evaluation protocols over ``records``.

    Open-vocabulary AP50 uses composite "attribute class" queries; pairs in
    ``novel_combos`` (class, attribute) form the novel split.
    """
    class_prompts = [predictor.prompt(c) for c in classes]
    attr_prompts = [predictor.prompt(a) for a in attributes]
    colour_pairs = sorted({(i.class_label, a) for r in records for i in r.instances for a in i.attributes})
    composite = [f"a photo of {a} {c}" for c, a in colour_pairs]
    novel_set = set(map(tuple, novel_combos))
    attr_scores, attr_gt, inst_novel = [], [], []
    closed_dets: dict = {c: [] for c in classes}
    closed_gt: dict = {c: {} for c in classes}
    loc_dets, loc_gt = {}, {}
    comp_dets: dict = {}
    comp_gt: dict = {}
    for r in records:
        pixels = r.load_pixels()
        s = predictor.score(pixels, class_prompts + attr_prompts + composite)
        nc, na = len(classes), len(attributes)
        cls_s = ImageScores(s.boxes, s.logits[:, :nc], s.visual)
        att_s = ImageScores(s.boxes, s.logits[:, nc:nc + na], s.visual)
        comp_s = ImageScores(s.boxes, s.logits[:, nc + na:], s.visual)
        for d in closed_vocab_from_scores(cls_s):
            closed_dets[classes[d.query_index]].append((r.id, d.box, d.score))
        att_prob = att_s.scores
        loc_dets[r.id] = {}
        for a, dets in zip(attributes, localize_from_scores(att_s, ar_k)):
            loc_dets[r.id][a] = [(d.box, d.score) for d in dets]
        loc_gt[r.id] = {}
        for d in open_vocab_from_scores(comp_s, 0.0):
            c, a = colour_pairs[d.query_index]
            comp_dets.setdefault(f"{a} {c}", []).append((r.id, d.box, d.score))
        for inst in r.instances:
            box = to_xyxy(inst.box)
            p = select_proposal(s.boxes, box)
            attr_scores.append(att_prob[p])
            attr_gt.append([a in inst.attributes for a in attributes])
            inst_novel.append(any((inst.class_label, a) in novel_set for a in inst.attributes))
            closed_gt.setdefault(inst.class_label, {}).setdefault(r.id, []).append(box)
            for a in inst.attributes:
                loc_gt[r.id].setdefault(a, []).append(box)
                comp_gt.setdefault(f"{a} {inst.class_label}", {}).setdefault(r.id, []).append(box)
    attr_scores = np.array(attr_scores).reshape(-1, len(attributes))
    attr_gt = np.array(attr_gt, dtype=bool).reshape(-1, len(attributes))
    am = attribute_map(attr_scores, attr_gt, attributes, freq_table)
    mr, f1 = mr_f1_at_k(attr_scores, attr_gt, k)
    ar = attribute_localization_ar(loc_dets, loc_gt, attributes, ar_k, categories)
    closed = _macro(detection_ap(closed_dets[c], closed_gt.get(c, {})) for c in classes)
    keys = [f"{a} {c}" for c, a in colour_pairs]
    novel_keys = [f"{a} {c}" for c, a in colour_pairs if (c, a) in novel_set]
    base_keys = [k_ for k_ in keys if k_ not in novel_keys]
    ovd = ovd_ap50(comp_dets, comp_gt, novel_keys, base_keys)
    mask = np.array(inst_novel, dtype=bool)
    novel_map = attribute_map(attr_scores[mask], attr_gt[mask], attributes)["map_all"] if mask.any() else None
    return MetricReport(
        k=k, map_all=am["map_all"], mr_at_k=mr, f1_at_k=f1, head=am.get("head"), medium=am.get("medium"),
        tail=am.get("tail"), per_attribute_ap=am["per_attribute"], excluded_attributes=am["excluded"],
        ar_at_10=ar["mean"], ar_per_category=ar.get("per_category", {}), ar_per_attribute=ar["per_attribute"],
        closed_ap50=closed, ap50_novel=ovd["novel"], ap50_base=ovd["base"], ap50_all=ovd["all"],
        novel_combo_map=novel_map, num_instances=int(len(attr_gt)),
    )


def logits_matrix(predictor: Predictor, records, composite_queries: Sequence[str]) -> tuple[np.ndarray, list]:
    """Raw logits of the box-free selected proposal of every instance vs each query."""
    rows, names = [], []
    for r in records:
        s = predictor.score(r.load_pixels(), list(composite_queries))
        for inst in r.instances:
            p = select_proposal(s.boxes, to_xyxy(inst.box))
            rows.append(s.logits[p])
            names.append(f"{r.id}:{inst.id}")
    return np.array(rows).reshape(-1, len(composite_queries)), names


def export_logits_matrix(predictor: Predictor, records, composite_queries: Sequence[str], path) -> np.ndarray:
    """Write the row-wise min-max normalised logits matrix as CSV and return it."""
    raw, names = logits_matrix(predictor, records, composite_queries)
    norm = minmax_rows(raw)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance"] + list(composite_queries))
        for name, row in zip(names, norm):
            w.writerow([name] + [repr(float(v)) for v in row])
    return norm


def mean_row_variance(matrix: np.ndarray) -> float:
    return float(np.mean(np.var(np.asarray(matrix), axis=1))) if np.size(matrix) else 0.0
