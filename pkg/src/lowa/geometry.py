"""Box formats and overlap measures.

Boxes travel as ``(..., 4)`` float arrays.  ``cxcywh`` is the regression
format (normalised centre and extent), ``xyxy`` the corner format used for
overlap computations and evaluation.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


def to_xyxy(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_area(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def validate_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    bad = ~((b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1]) & np.isfinite(b).all(axis=1))
    if bad.any():
        raise ValueError(f"degenerate xyxy box at index {int(np.flatnonzero(bad)[0])}")
    return b


def _inter_union(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return a, b, inter, union


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))`` for xyxy boxes."""
    _, _, inter, union = _inter_union(a, b)
    return inter / union


def pairwise_giou(a, b) -> np.ndarray:
    a, b, inter, union = _inter_union(a, b)
    iou = inter / union
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = rb - lt
    enclosing = wh[..., 0] * wh[..., 1]
    return iou - (enclosing - union) / enclosing


# ---------------------------------------------------------------------------
# differentiable, row-aligned variants (M matched pairs)
# ---------------------------------------------------------------------------

def _cols(t: T.Tensor):
    return [T.getitem(t, (slice(None), k)) for k in range(4)]


def tensor_cxcywh_to_xyxy(boxes: T.Tensor):
    """Return the four corner columns ``x0, y0, x1, y1`` as 1-D tensors."""
    cx, cy, w, h = _cols(boxes)
    hw, hh = T.scale(w, 0.5), T.scale(h, 0.5)
    return cx - hw, cy - hh, cx + hw, cy + hh


def tensor_giou(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    """Per-row GIoU between two ``(M, 4)`` cxcywh tensors."""
    px0, py0, px1, py1 = tensor_cxcywh_to_xyxy(pred)
    tx0, ty0, tx1, ty1 = tensor_cxcywh_to_xyxy(target)
    area_p = (px1 - px0) * (py1 - py0)
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw = T.relu(T.minimum(px1, tx1) - T.maximum(px0, tx0))
    ih = T.relu(T.minimum(py1, ty1) - T.maximum(py0, ty0))
    inter = iw * ih
    union = area_p + area_t - inter
    iou = T.div(inter, union)
    ew = T.maximum(px1, tx1) - T.minimum(px0, tx0)
    eh = T.maximum(py1, ty1) - T.minimum(py0, ty0)
    enclosing = ew * eh
    return iou - T.div(enclosing - union, enclosing)
