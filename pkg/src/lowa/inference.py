"""Task adapters on top of a trained model: closed-vocabulary detection,
box-free attribute classification, attribute localisation and free-text
open-vocabulary detection.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import pairwise_iou, to_xyxy
from .model import LOWAModel
from .querygen import Vocabulary, label_text, load_templates, tokenize

NMS_IOU = 0.5
DEFAULT_THRESHOLD = 0.5


@dataclass
class Detection:
    box: tuple  # x0, y0, x1, y1 normalised
    query_index: int
    score: float
    proposal: int = -1

    def to_json(self, queries: Sequence[str] | None = None) -> dict:
        q = queries[self.query_index] if queries is not None else self.query_index
        return {"bbox": [float(v) for v in self.box], "query": q, "score": float(self.score)}


@dataclass
class ImageScores:
    boxes: np.ndarray   # P x 4 xyxy
    logits: np.ndarray  # P x Q
    visual: np.ndarray  # P x D

    @property
    def scores(self) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.logits))


class Predictor:
    """Read-only wrapper pairing a model with its vocabulary and prompt templates."""

    def __init__(self, model: LOWAModel, vocab: Vocabulary, templates: Sequence[str] | None = None):
        self.model = model
        self.vocab = vocab
        self.templates = list(templates or load_templates())
        self._text_cache: dict[str, np.ndarray] = {}

    def prompt(self, label: str) -> str:
        return label_text(label, self.templates)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._text_cache]
        if missing:
            with T.no_grad():
                emb = self.model.encode_texts([tokenize(t, self.vocab) for t in missing]).data
            for t, e in zip(missing, emb):
                self._text_cache[t] = e
        if not texts:
            return np.zeros((0, self.model.config.proj_dim))
        return np.stack([self._text_cache[t] for t in texts])

    def image_features(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        """``(boxes_xyxy, visual_embeddings)`` for one image."""
        with T.no_grad():
            emb = self.model.encode_image(pixels)
            boxes, vis = self.model.heads(emb, 1)
        return to_xyxy(boxes.data), vis.data

    def score(self, pixels, texts: Sequence[str]) -> ImageScores:
        boxes, vis = self.image_features(pixels)
        q = self.embed_texts(list(texts))
        scale = float(np.exp(self.model.params["logit_scale"].data))
        return ImageScores(boxes, scale * vis @ q.T, vis)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU) -> list[int]:
    """Greedy suppression; returns kept indices by descending score (ties: lower index)."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep = []
    if not order:
        return keep
    iou = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_threshold
    return keep


def _pixels(image):
    return image.load_pixels() if hasattr(image, "load_pixels") else np.asarray(image)


def detect_closed_vocab(predictor: Predictor, image, class_list: Sequence[str],
                        iou_threshold: float = NMS_IOU) -> list[Detection]:
    """Each proposal votes for its best class; NMS within each class."""
    if not class_list:
        raise ValueError("class_list must not be empty")
    s = predictor.score(_pixels(image), [predictor.prompt(c) for c in class_list])
    return closed_vocab_from_scores(s, iou_threshold)


def closed_vocab_from_scores(s: ImageScores, iou_threshold: float = NMS_IOU) -> list[Detection]:
    scores = s.scores
    best = np.argmax(scores, axis=1)
    top = scores[np.arange(len(best)), best]
    out = []
    for q in range(scores.shape[1]):
        idx = np.flatnonzero(best == q)
        if idx.size == 0:
            continue
        for k in nms(s.boxes[idx], top[idx], iou_threshold):
            p = int(idx[k])
            out.append(Detection(tuple(s.boxes[p]), q, float(top[p]), p))
    out.sort(key=lambda d: (d.query_index, -d.score, d.proposal))
    return out


def select_proposal(pred_boxes_xyxy: np.ndarray, target_box_xyxy) -> int:
    """Proposal whose predicted box overlaps the target most (ties: lowest index)."""
    iou = pairwise_iou(np.asarray(target_box_xyxy, dtype=np.float64).reshape(1, 4), pred_boxes_xyxy)[0]
    return int(np.argmax(iou))


def classify_attributes_boxfree(predictor: Predictor, image, target_box, attribute_list: Sequence[str]) -> np.ndarray:
    """Sigmoid scores of every attribute for the proposal best overlapping ``target_box`` (xyxy)."""
    boxes, vis = predictor.image_features(_pixels(image))
    p = select_proposal(boxes, target_box)
    q = predictor.embed_texts([predictor.prompt(a) for a in attribute_list])
    scale = float(np.exp(predictor.model.params["logit_scale"].data))
    logits = scale * vis[p] @ q.T
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def localize_by_attribute(predictor: Predictor, image, attribute_list: Sequence[str], top_k: int = 10,
                          iou_threshold: float = NMS_IOU) -> list[list[Detection]]:
    """Per attribute, the ``top_k`` best boxes after class-agnostic NMS."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    s = predictor.score(_pixels(image), [predictor.prompt(a) for a in attribute_list])
    return localize_from_scores(s, top_k, iou_threshold)


def localize_from_scores(s: ImageScores, top_k: int, iou_threshold: float = NMS_IOU) -> list[list[Detection]]:
    scores = s.scores
    out = []
    for q in range(scores.shape[1]):
        keep = nms(s.boxes, scores[:, q], iou_threshold)[:top_k]
        out.append([Detection(tuple(s.boxes[p]), q, float(scores[p, q]), p) for p in keep])
    return out


def detect_open_vocab(predictor: Predictor, image, free_text_queries: Sequence[str],
                      threshold: float = DEFAULT_THRESHOLD, iou_threshold: float = NMS_IOU) -> list[Detection]:
    """All (proposal, query) pairs scoring at least ``threshold``, NMS per query."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s = predictor.score(_pixels(image), list(free_text_queries))
    return open_vocab_from_scores(s, threshold, iou_threshold)


def open_vocab_from_scores(s: ImageScores, threshold: float, iou_threshold: float = NMS_IOU) -> list[Detection]:
    scores = s.scores
    out = []
    for q in range(scores.shape[1]):
        idx = np.flatnonzero(scores[:, q] >= threshold)
        for k in nms(s.boxes[idx], scores[idx, q], iou_threshold):
            p = int(idx[k])
            out.append(Detection(tuple(s.boxes[p]), q, float(scores[p, q]), p))
    return out


def predictions_json(image_id: str, detections: Sequence[Detection], queries: Sequence[str]) -> dict:
    return {"image_id": image_id, "detections": [d.to_json(queries) for d in detections]}


def write_predictions(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
